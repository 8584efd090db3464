#pragma once

#include <map>
#include <optional>

#include "amdiff/diffusion.hpp"
#include "amdiff/networks.hpp"
#include "amdiff/patching.hpp"
#include "amdiff/training.hpp"
#include "amdiff/volume.hpp"

namespace amdiff {

/// Trained model bundle: parameters plus everything needed to run inference.
struct Checkpoint {
    ModelParams params;
    NetworkConfig network;
    AblationFlags ablation;
    int timesteps = 250;
    double s_offset = 0.008;
    ClassRoster roster = ClassRoster::default_roster();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Patch-wise reverse-diffusion denoising with overlap averaging. Deterministic
/// given seed: patch i uses an rng stream derived from (seed, i).
Volume3D denoise_volume(const Volume3D& i_lc, const Checkpoint& ckpt, const ScheduleTable& sched,
                        const PatchGrid& grid, uint64_t seed, int threads = 1);

struct SegOutput {
    LabelVolume fused;
    Volume3D lesion_prob;
    std::vector<Volume3D> organ_probs;  // channels: background, organ 2, ..., organ S
};

enum class PhcMode {
    chain,     // full reverse chain per patch (default at inference)
    one_step,  // single x0 estimate from x_T
    bypass,    // skip denoiser and revision entirely: segmenter sees (i_lc, i_lc)
};

SegOutput segment_volume(const Volume3D& i_lc, const Checkpoint& ckpt, const ScheduleTable& sched,
                         const PatchGrid& grid, uint64_t seed, PhcMode mode = PhcMode::chain,
                         int threads = 1);

/// Variant reusing an already-denoised volume (avoids re-running the chain).
SegOutput segment_volume_with_phc(const Volume3D& i_lc, const Volume3D& p_hc_suv,
                                  const Checkpoint& ckpt, const PatchGrid& grid, int threads = 1);

/// Fusion rule: organ label = argmax over organ channels; any voxel with
/// lesion probability > 0.5 is relabeled lesion (class 1).
LabelVolume fuse_labels(const Volume3D& lesion_prob, const std::vector<Volume3D>& organ_probs,
                        int num_classes);

struct QuantReport {
    double mtv_ml = 0.0;
    double tlg = 0.0;
    std::map<std::string, double> suv_mean;  // classes 1..S by roster name
    std::optional<std::map<std::string, double>> per_class_nrmse;
    std::optional<std::map<std::string, double>> per_class_dice;
};

QuantReport quantify(const Volume3D& p_hc, const LabelVolume& labels, const ClassRoster& roster);

nlohmann::json quant_report_to_json(const QuantReport& r);
QuantReport quant_report_from_json(const nlohmann::json& j);

}  // namespace amdiff
