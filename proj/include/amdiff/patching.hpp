#pragma once

#include <vector>

#include "amdiff/rng.hpp"
#include "amdiff/volume.hpp"

namespace amdiff {

/// Deterministic patch layout over a volume: stride-spaced origins from 0,
/// with a final boundary-clamped origin per axis so every voxel is covered.
struct PatchGrid {
    Index3 dims{};        // volume the grid was planned for
    Index3 patch_size{};
    Index3 stride{};
    std::vector<Index3> origins;  // ordered x fastest, then y, then z
};

/// Throws ConfigError when patch exceeds dims or stride is outside [1, patch].
PatchGrid plan_grid(const Index3& dims, const Index3& patch_size, const Index3& stride);

std::vector<Volume3D> extract(const Volume3D& volume, const PatchGrid& grid);
std::vector<LabelVolume> extract(const LabelVolume& labels, const PatchGrid& grid);
Volume3D extract_one(const Volume3D& volume, const Index3& origin, const Index3& patch_size);
LabelVolume extract_one(const LabelVolume& labels, const Index3& origin, const Index3& patch_size);

/// Each output voxel is the arithmetic mean of all patch values covering it.
Volume3D reassemble(const std::vector<Volume3D>& patches, const PatchGrid& grid);

/// Overlap-accumulate raw per-voxel doubles (used for probability fusion).
/// `channels` planes per patch; result holds channels*numel(dims) doubles.
std::vector<double> reassemble_planes(const std::vector<std::vector<double>>& patches,
                                      const PatchGrid& grid, int channels);

struct TrainingPatch {
    Volume3D lc;
    Volume3D hc;
    LabelVolume labels;
    Index3 origin{};
    bool lesion_fallback = false;  // lesion sampling requested but case has no lesion voxels
};

/// Lesion-balanced patch sampler: with probability lesion_target_frac the origin
/// is drawn uniformly from origins whose patch contains at least one lesion
/// voxel; otherwise uniformly over all valid origins (every integer corner).
TrainingPatch sample_training_patch(const Volume3D& lc, const Volume3D& hc,
                                    const LabelVolume& labels, const Index3& patch_size,
                                    double lesion_target_frac, Rng& rng);

/// Origin-only variant (shared implementation, exposed for statistical tests).
struct OriginSample {
    Index3 origin{};
    bool lesion_fallback = false;
};
OriginSample sample_patch_origin(const LabelVolume& labels, const Index3& patch_size,
                                 double lesion_target_frac, Rng& rng);

}  // namespace amdiff
