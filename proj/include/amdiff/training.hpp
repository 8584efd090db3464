#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "amdiff/diffusion.hpp"
#include "amdiff/losses.hpp"
#include "amdiff/networks.hpp"
#include "amdiff/patching.hpp"
#include "amdiff/volume.hpp"

namespace amdiff {

struct AblationFlags {
    bool use_lor_regularizer = true;
    bool use_revision_module = true;
};

struct TrainConfig {
    int e_max = 4;
    int steps_per_epoch = 100;
    int batch_size = 2;
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int timesteps = 250;
    double s_offset = 0.008;
    Index3 patch{32, 32, 32};
    double lesion_target_frac = 0.5;
    ClassWeights weights;
    uint64_t seed = 0;
    AblationFlags ablation;
    int checkpoint_interval = 0;  // epochs between state snapshots; 0 = none
    bool stop_gradient_at_phc = false;
    /// Global gradient-norm clip applied to the batch-averaged gradients
    /// before the optimizer step; 0 disables clipping. The one-step x0
    /// estimate amplifies regularizer gradients by 1/sqrt(alpha_bar[t]) at
    /// late timesteps, so joint runs usually enable this.
    double max_grad_norm = 0.0;
    NetworkConfig network;

    void validate() const;
};

struct TrainCase {
    std::string id;
    Volume3D lc;
    Volume3D hc;
    LabelVolume labels;
};

struct Dataset {
    std::vector<TrainCase> cases;
};

struct TrainState {
    ModelParams params;
    std::map<std::string, std::vector<double>> adam_m;
    std::map<std::string, std::vector<double>> adam_v;
    long long step = 0;  // completed optimizer steps
    int epoch = 0;       // completed epochs
    std::array<uint64_t, 4> rng_state{};
    long long lesion_fallback_count = 0;
};

/// Per-item randomness, drawn sequentially on the training stream before any
/// graph work so runs and resumes stay bit-identical.
struct ItemDraw {
    Volume3D lc, hc;
    LabelVolume labels;
    int t = 1;
    std::vector<double> eps;
    bool lesion_fallback = false;
};

struct GradAndParts {
    std::map<std::string, std::vector<double>> grads;
    double diff = 0.0, lor = 0.0, rev = 0.0, seg = 0.0;
};

/// Gradient of the per-item Eq.-style objective diff + lambda*(lor + rev + seg)
/// at the given draw. Pure given (params, draw, lambda); exposed for probes.
GradAndParts compute_item_gradients(const ModelParams& params, const ItemDraw& draw,
                                    double lambda_warm, const ScheduleTable& sched,
                                    const TrainConfig& cfg);

/// One optimizer step over a freshly sampled batch; updates state in place.
LossReport train_step(TrainState& state, const Dataset& dataset, const ScheduleTable& sched,
                      const TrainConfig& cfg);

struct TrainSinks {
    std::function<void(long long step, int epoch, const LossReport&)> on_step;
    std::function<void(const TrainState&, int completed_epochs)> on_snapshot;
};

TrainState make_initial_state(const TrainConfig& cfg);
std::vector<LossReport> train(TrainState& state, const Dataset& dataset, const TrainConfig& cfg,
                              const TrainSinks& sinks = {});

void save_train_state(const std::filesystem::path& path, const TrainState& state,
                      const nlohmann::json& meta);
struct LoadedTrainState {
    TrainState state;
    nlohmann::json meta;
};
LoadedTrainState load_train_state(const std::filesystem::path& path);

}  // namespace amdiff
