#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "amdiff/nn.hpp"
#include "amdiff/rng.hpp"

namespace amdiff {

struct ParamArray {
    nn::Shape shape;
    std::vector<double> data;
};

/// Named parameter tree grouped under denoiser/, revision/, segmenter/.
struct ModelParams {
    std::map<std::string, ParamArray> arrays;
    uint64_t init_seed = 0;

    ParamArray& at(const std::string& name);
    const ParamArray& at(const std::string& name) const;
    long long total_size() const;
};

struct NetworkConfig {
    int base_channels = 16;       // channel widths double per level
    int time_embed_dim = 32;
    int ssm_state_dim = 8;
    bool attention_at_lowest = true;
    bool bidirectional_scan = false;
    int revision_channels = 16;
    int num_classes = 9;          // S + 1 including background and lesion
    double suv_cutoff = 20.0;
    int group_size = 8;           // group-norm channels per group (upper bound)

    int organ_channels() const { return num_classes - 1; }  // background + organs, no lesion
    void validate() const;
};

/// Deterministic init: fan-in-scaled normal conv/linear weights, zero biases,
/// unit group-norm gains, zeroed revision output conv, SSM decay at 0.5.
ModelParams init_params(const NetworkConfig& config, uint64_t seed);

/// Binds ModelParams arrays as graph leaves (one leaf per array per graph).
class ParamBank {
public:
    ParamBank(nn::Graph& g, const ModelParams& params, bool trainable = true);

    nn::Var operator()(const std::string& name);
    bool bound(const std::string& name) const { return bound_.count(name) > 0; }

    /// Adds every bound leaf's gradient into grads[name] (allocating on demand).
    void accumulate_grads(std::map<std::string, std::vector<double>>& grads) const;

private:
    nn::Graph* g_;
    const ModelParams* params_;
    bool trainable_;
    std::map<std::string, nn::Var> bound_;
};

/// Conditional noise-prediction UNet: 2-channel input (x_t, conditioning
/// low-count patch), 4 encoder resolutions, 3 decoder resolutions, additive
/// sinusoidal time embedding at every block, self-attention at the lowest
/// resolution. Inputs are {1, D, H, W} in diffusion space.
nn::Var denoiser_forward(nn::Graph& g, ParamBank& pb, const nn::Var& x_t, const nn::Var& i_lc_norm,
                         int t, const NetworkConfig& config);

/// Revision module: p_hcr = i_lc + conv_stack(concat(unmap(p_hc), i_lc)).
/// p_hc_diff is in diffusion space, i_lc_suv in SUV units; the output covers
/// the full SUV range (no upper bound).
nn::Var revision_forward(nn::Graph& g, ParamBank& pb, const nn::Var& p_hc_diff,
                         const nn::Var& i_lc_suv, const NetworkConfig& config);

struct SegLogits {
    nn::Var lesion;  // {2, D, H, W}
    nn::Var organ;   // {num_classes - 1, D, H, W}
};

/// Dual-branch segmenter: shared encoder (stem conv + 3 ResMamba stages with
/// channel/spatial gating and a state-space scan), two 3-level decoders.
/// Inputs are SUV-space {1, D, H, W}; they are scaled by 1/suv_cutoff inside.
SegLogits segmenter_forward(nn::Graph& g, ParamBank& pb, const nn::Var& p_hcr_suv,
                            const nn::Var& i_lc_suv, const NetworkConfig& config);

// ---- forward-only wrappers over flat buffers (inference paths) ----
std::vector<double> run_denoiser(const ModelParams& params, const NetworkConfig& config,
                                 const std::vector<double>& x_t, const std::vector<double>& cond,
                                 int t, const Index3& patch);
std::vector<double> run_revision(const ModelParams& params, const NetworkConfig& config,
                                 const std::vector<double>& p_hc_diff,
                                 const std::vector<double>& i_lc_suv, const Index3& patch);
struct SegProbs {
    std::vector<double> lesion;  // 2 * N, softmaxed
    std::vector<double> organ;   // (num_classes - 1) * N, softmaxed
};
SegProbs run_segmenter(const ModelParams& params, const NetworkConfig& config,
                       const std::vector<double>& p_hcr_suv, const std::vector<double>& i_lc_suv,
                       const Index3& patch);

// ---- parameter container I/O ----
// Layout mirrors .pvol: "APCK1\n", one JSON header line, 0x00, then raw
// little-endian f64 arrays concatenated in header order. Round-trips exactly.
void save_param_container(const std::filesystem::path& path, const ModelParams& params,
                          const nlohmann::json& meta, const std::string& kind);
struct LoadedContainer {
    ModelParams params;
    nlohmann::json meta;
    std::string kind;
};
LoadedContainer load_param_container(const std::filesystem::path& path);

nlohmann::json network_config_to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const nlohmann::json& j);

}  // namespace amdiff
