#include "amdiff/config.hpp"

#include <fstream>
#include <set>

namespace amdiff {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& path,
                const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config: " + path + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key))
            throw ConfigError("config: unknown key '" + path + "." + key + "'");
        (void)value;
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

void read_index3(const json& j, const char* key, Index3& out, const std::string& path) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 3)
        throw ConfigError("config: " + path + "." + key + " must be a 3-element array");
    for (int i = 0; i < 3; ++i) out[i] = a[i].get<int>();
}

void read_spacing3(const json& j, const char* key, Spacing3& out, const std::string& path) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 3)
        throw ConfigError("config: " + path + "." + key + " must be a 3-element array");
    for (int i = 0; i < 3; ++i) out[i] = a[i].get<double>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    check_keys(j, "$",
               {"seed", "phantom", "patching", "diffusion", "network", "training", "weights",
                "ablation"});
    ExperimentConfig c;
    read(j, "seed", c.seed);

    if (j.contains("phantom")) {
        const json& p = j["phantom"];
        check_keys(p, "phantom",
                   {"dims", "voxel_mm", "background_suv", "counts_per_suv", "fractions",
                    "ramp_amplitude", "smoothing_fwhm_mm", "num_classes", "organs", "lesions"});
        read_index3(p, "dims", c.phantom_dims, "phantom");
        read_spacing3(p, "voxel_mm", c.phantom_voxel_mm, "phantom");
        read(p, "background_suv", c.background_suv);
        read(p, "counts_per_suv", c.counts_per_suv);
        read(p, "fractions", c.fractions);
        read(p, "ramp_amplitude", c.ramp_amplitude);
        read(p, "smoothing_fwhm_mm", c.smoothing_fwhm_mm);
        read(p, "num_classes", c.num_classes);
        if (p.contains("organs")) {
            if (!p["organs"].is_array()) throw ConfigError("config: phantom.organs must be an array");
            for (const auto& o : p["organs"]) {
                check_keys(o, "phantom.organs[]", {"class", "center_mm", "semi_axes_mm", "suv"});
                OrganShape shape;
                shape.class_index = o.at("class").get<int>();
                const auto cm = o.at("center_mm").get<std::vector<double>>();
                const auto sm = o.at("semi_axes_mm").get<std::vector<double>>();
                if (cm.size() != 3 || sm.size() != 3)
                    throw ConfigError("config: organ center/semi-axes must be 3-element arrays");
                std::copy(cm.begin(), cm.end(), shape.center_mm.begin());
                std::copy(sm.begin(), sm.end(), shape.semi_axes_mm.begin());
                shape.suv = o.at("suv").get<double>();
                c.organs.push_back(shape);
            }
        }
        if (p.contains("lesions")) {
            const json& l = p["lesions"];
            check_keys(l, "phantom.lesions",
                       {"count_min", "count_max", "radius_mm_min", "radius_mm_max", "suv_min",
                        "suv_max"});
            read(l, "count_min", c.lesions.count_min);
            read(l, "count_max", c.lesions.count_max);
            read(l, "radius_mm_min", c.lesions.radius_mm_min);
            read(l, "radius_mm_max", c.lesions.radius_mm_max);
            read(l, "suv_min", c.lesions.suv_min);
            read(l, "suv_max", c.lesions.suv_max);
        }
    }

    if (j.contains("patching")) {
        const json& p = j["patching"];
        check_keys(p, "patching", {"patch", "stride", "lesion_target_frac"});
        read_index3(p, "patch", c.patch, "patching");
        read_index3(p, "stride", c.stride, "patching");
        read(p, "lesion_target_frac", c.lesion_target_frac);
    }

    if (j.contains("diffusion")) {
        const json& p = j["diffusion"];
        check_keys(p, "diffusion", {"timesteps", "s_offset", "suv_cutoff"});
        read(p, "timesteps", c.timesteps);
        read(p, "s_offset", c.s_offset);
        read(p, "suv_cutoff", c.suv_cutoff);
    }

    if (j.contains("network")) {
        const json& p = j["network"];
        check_keys(p, "network",
                   {"base_channels", "time_embed_dim", "ssm_state_dim", "attention_at_lowest",
                    "bidirectional_scan", "revision_channels", "group_size"});
        read(p, "base_channels", c.network.base_channels);
        read(p, "time_embed_dim", c.network.time_embed_dim);
        read(p, "ssm_state_dim", c.network.ssm_state_dim);
        read(p, "attention_at_lowest", c.network.attention_at_lowest);
        read(p, "bidirectional_scan", c.network.bidirectional_scan);
        read(p, "revision_channels", c.network.revision_channels);
        read(p, "group_size", c.network.group_size);
    }

    if (j.contains("training")) {
        const json& p = j["training"];
        check_keys(p, "training",
                   {"epochs", "steps_per_epoch", "batch_size", "learning_rate", "adam_beta1",
                    "adam_beta2", "adam_eps", "checkpoint_interval", "count_fraction",
                    "stop_gradient_at_phc", "max_grad_norm"});
        read(p, "epochs", c.epochs);
        read(p, "steps_per_epoch", c.steps_per_epoch);
        read(p, "batch_size", c.batch_size);
        read(p, "learning_rate", c.learning_rate);
        read(p, "adam_beta1", c.adam_beta1);
        read(p, "adam_beta2", c.adam_beta2);
        read(p, "adam_eps", c.adam_eps);
        read(p, "checkpoint_interval", c.checkpoint_interval);
        read(p, "count_fraction", c.count_fraction);
        read(p, "stop_gradient_at_phc", c.stop_gradient_at_phc);
        read(p, "max_grad_norm", c.max_grad_norm);
    }

    if (j.contains("weights")) {
        const json& p = j["weights"];
        check_keys(p, "weights", {"background", "lesion", "organ_default"});
        read(p, "background", c.weight_background);
        read(p, "lesion", c.weight_lesion);
        read(p, "organ_default", c.weight_organ);
    }

    if (j.contains("ablation")) {
        const json& p = j["ablation"];
        check_keys(p, "ablation", {"use_lor_regularizer", "use_revision_module"});
        read(p, "use_lor_regularizer", c.ablation.use_lor_regularizer);
        read(p, "use_revision_module", c.ablation.use_revision_module);
    }

    c.network.num_classes = c.num_classes;
    c.network.suv_cutoff = c.suv_cutoff;
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": invalid JSON (" + std::string(e.what()) + ")");
    }
    return from_json(j);
}

json ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    json organs_j = json::array();
    for (const auto& o : organs.empty()
                             ? default_organ_layout(phantom_dims, phantom_voxel_mm, num_classes)
                             : organs) {
        organs_j.push_back({{"class", o.class_index},
                            {"center_mm", o.center_mm},
                            {"semi_axes_mm", o.semi_axes_mm},
                            {"suv", o.suv}});
    }
    j["phantom"] = {{"dims", phantom_dims},
                    {"voxel_mm", phantom_voxel_mm},
                    {"background_suv", background_suv},
                    {"counts_per_suv", counts_per_suv},
                    {"fractions", fractions},
                    {"ramp_amplitude", ramp_amplitude},
                    {"smoothing_fwhm_mm", smoothing_fwhm_mm},
                    {"num_classes", num_classes},
                    {"organs", organs_j},
                    {"lesions",
                     {{"count_min", lesions.count_min},
                      {"count_max", lesions.count_max},
                      {"radius_mm_min", lesions.radius_mm_min},
                      {"radius_mm_max", lesions.radius_mm_max},
                      {"suv_min", lesions.suv_min},
                      {"suv_max", lesions.suv_max}}}};
    j["patching"] = {{"patch", patch},
                     {"stride", stride},
                     {"lesion_target_frac", lesion_target_frac}};
    j["diffusion"] = {{"timesteps", timesteps}, {"s_offset", s_offset}, {"suv_cutoff", suv_cutoff}};
    j["network"] = {{"base_channels", network.base_channels},
                    {"time_embed_dim", network.time_embed_dim},
                    {"ssm_state_dim", network.ssm_state_dim},
                    {"attention_at_lowest", network.attention_at_lowest},
                    {"bidirectional_scan", network.bidirectional_scan},
                    {"revision_channels", network.revision_channels},
                    {"group_size", network.group_size}};
    j["training"] = {{"epochs", epochs},
                     {"steps_per_epoch", steps_per_epoch},
                     {"batch_size", batch_size},
                     {"learning_rate", learning_rate},
                     {"adam_beta1", adam_beta1},
                     {"adam_beta2", adam_beta2},
                     {"adam_eps", adam_eps},
                     {"checkpoint_interval", checkpoint_interval},
                     {"count_fraction", count_fraction},
                     {"stop_gradient_at_phc", stop_gradient_at_phc},
                     {"max_grad_norm", max_grad_norm}};
    j["weights"] = {{"background", weight_background},
                    {"lesion", weight_lesion},
                    {"organ_default", weight_organ}};
    j["ablation"] = {{"use_lor_regularizer", ablation.use_lor_regularizer},
                     {"use_revision_module", ablation.use_revision_module}};
    return j;
}

PhantomSpec ExperimentConfig::make_phantom_spec(uint64_t case_seed) const {
    PhantomSpec spec;
    spec.dims = phantom_dims;
    spec.voxel_mm = phantom_voxel_mm;
    spec.background_suv = background_suv;
    spec.ramp_amplitude = ramp_amplitude;
    spec.smoothing_fwhm_mm = smoothing_fwhm_mm;
    spec.roster = roster();
    spec.organs =
        organs.empty() ? default_organ_layout(phantom_dims, phantom_voxel_mm, num_classes) : organs;
    spec.lesions = lesions;
    spec.seed = case_seed;
    return spec;
}

TrainConfig ExperimentConfig::make_train_config() const {
    TrainConfig t;
    t.e_max = epochs;
    t.steps_per_epoch = steps_per_epoch;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.adam_beta1 = adam_beta1;
    t.adam_beta2 = adam_beta2;
    t.adam_eps = adam_eps;
    t.timesteps = timesteps;
    t.s_offset = s_offset;
    t.patch = patch;
    t.lesion_target_frac = lesion_target_frac;
    t.weights = make_weights();
    t.seed = seed;
    t.ablation = ablation;
    t.checkpoint_interval = checkpoint_interval;
    t.stop_gradient_at_phc = stop_gradient_at_phc;
    t.max_grad_norm = max_grad_norm;
    t.network = network;
    t.network.num_classes = num_classes;  // kept in sync with the phantom roster
    t.network.suv_cutoff = suv_cutoff;
    return t;
}

ClassWeights ExperimentConfig::make_weights() const {
    ClassWeights cw;
    cw.w.assign(static_cast<size_t>(num_classes), weight_organ);
    cw.w[0] = weight_background;
    cw.w[1] = weight_lesion;
    return cw;
}

void ExperimentConfig::validate() const {
    if (num_classes < 3 || num_classes > 9)
        throw ConfigError("config: phantom.num_classes must lie in [3, 9]");
    if (fractions.empty()) throw ConfigError("config: phantom.fractions must not be empty");
    for (double f : fractions)
        if (!(f > 0.0) || f > 1.0)
            throw ConfigError("config: count fractions must lie in (0, 1]");
    if (!(counts_per_suv > 0.0)) throw ConfigError("config: counts_per_suv must be positive");
    for (int i = 0; i < 3; ++i) {
        if (patch[i] < 1 || stride[i] < 1 || stride[i] > patch[i])
            throw ConfigError("config: patching stride must lie in [1, patch] per axis");
    }
    if (timesteps < 1) throw ConfigError("config: diffusion.timesteps must be >= 1");
    if (!(s_offset > 0.0)) throw ConfigError("config: diffusion.s_offset must be positive");
    if (!(count_fraction > 0.0) || count_fraction > 1.0)
        throw ConfigError("config: training.count_fraction must lie in (0, 1]");
    make_weights().validate(num_classes);
    make_train_config().validate();
}

}  // namespace amdiff
