#pragma once

#include <vector>

#include "amdiff/rng.hpp"
#include "amdiff/volume.hpp"

namespace amdiff {

/// Axis-aligned ellipsoid with a constant base uptake.
struct OrganShape {
    int class_index = 2;                 // 2..S
    std::array<double, 3> center_mm{};   // absolute position inside the volume
    std::array<double, 3> semi_axes_mm{};
    double suv = 1.0;
};

struct LesionSpec {
    int count_min = 1;
    int count_max = 3;
    double radius_mm_min = 4.0;
    double radius_mm_max = 8.0;
    double suv_min = 8.0;
    double suv_max = 12.0;
};

struct PhantomSpec {
    Index3 dims{48, 48, 48};
    Spacing3 voxel_mm{2.0, 2.0, 2.0};
    std::vector<OrganShape> organs;
    LesionSpec lesions;
    double background_suv = 0.4;
    /// Smooth multiplicative intensity ramp amplitude; 0 disables it. A small
    /// value keeps per-organ intensity non-constant so range-normalized error
    /// metrics stay well defined on synthetic cases.
    double ramp_amplitude = 0.0;
    /// Optional Gaussian smoothing of the activity (FWHM in mm, 0 = off).
    double smoothing_fwhm_mm = 0.0;
    uint64_t seed = 0;
    ClassRoster roster = ClassRoster::default_roster();

    void validate() const;  // throws ConfigError
};

struct LesionBall {
    std::array<double, 3> center_mm{};
    double radius_mm = 0.0;
    double suv = 0.0;
};

struct PhantomCase {
    Volume3D activity;
    LabelVolume labels;
    std::vector<LesionBall> lesions;
};

/// Deterministic synthetic phantom: labels follow the innermost (smallest)
/// shape containing each voxel center, lesions overriding organs overriding
/// background.
PhantomCase generate_phantom(const PhantomSpec& spec);

/// Poisson count-limited acquisition model.
struct CountModel {
    double counts_per_suv = 50.0;  // expected true counts per voxel per unit SUV at full count
    double fraction = 1.0;         // count level in (0, 1]

    void validate() const;  // throws ConfigError
};

/// Per voxel draws k ~ Poisson(activity*counts_per_suv*fraction) and returns
/// k/(counts_per_suv*fraction): unbiased, with variance activity/(counts_per_suv*fraction).
Volume3D simulate_count_level(const Volume3D& activity, const CountModel& model, uint64_t seed);

/// Default whole-body-like organ layout scaled to the volume extent, classes 2..S.
std::vector<OrganShape> default_organ_layout(const Index3& dims, const Spacing3& voxel_mm,
                                             int num_classes);

}  // namespace amdiff
