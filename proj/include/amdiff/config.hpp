#pragma once

#include <filesystem>

#include <json.hpp>

#include "amdiff/phantom.hpp"
#include "amdiff/training.hpp"

namespace amdiff {

/// One structured experiment document. Unknown keys are rejected anywhere in
/// the tree. Defaults encode the reference setup (T = 250, patch 128^3,
/// stride 32^3); desk-scale runs override them in their config files.
struct ExperimentConfig {
    uint64_t seed = 42;

    // phantom
    Index3 phantom_dims{48, 48, 48};
    Spacing3 phantom_voxel_mm{2.0, 2.0, 2.0};
    double background_suv = 0.4;
    double counts_per_suv = 50.0;
    std::vector<double> fractions{0.05, 0.1, 0.2};
    double ramp_amplitude = 0.1;
    double smoothing_fwhm_mm = 0.0;
    int num_classes = 9;
    std::vector<OrganShape> organs;  // empty = default layout for num_classes
    LesionSpec lesions;

    // patching
    Index3 patch{128, 128, 128};
    Index3 stride{32, 32, 32};
    double lesion_target_frac = 0.5;

    // diffusion
    int timesteps = 250;
    double s_offset = 0.008;
    double suv_cutoff = 20.0;

    // network (num_classes and suv_cutoff are synced from the sections above)
    NetworkConfig network;

    // training
    int epochs = 4;
    int steps_per_epoch = 100;
    int batch_size = 2;
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int checkpoint_interval = 0;
    double count_fraction = 0.1;
    bool stop_gradient_at_phc = false;
    double max_grad_norm = 0.0;

    // weights
    double weight_background = 0.1;
    double weight_lesion = 4.0;
    double weight_organ = 1.0;

    AblationFlags ablation;

    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;

    PhantomSpec make_phantom_spec(uint64_t case_seed) const;
    TrainConfig make_train_config() const;
    ClassWeights make_weights() const;
    ClassRoster roster() const { return ClassRoster::truncated(num_classes); }

    void validate() const;
};

}  // namespace amdiff
