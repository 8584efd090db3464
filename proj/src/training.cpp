#include "amdiff/training.hpp"

#include <cmath>

namespace amdiff {

using nn::Graph;
using nn::Var;

void TrainConfig::validate() const {
    if (e_max < 1) throw ConfigError("e_max must be >= 1");
    if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0))
        throw ConfigError("adam betas must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (timesteps < 1) throw ConfigError("timesteps must be >= 1");
    if (lesion_target_frac < 0.0 || lesion_target_frac > 1.0)
        throw ConfigError("lesion_target_frac must lie in [0, 1]");
    if (max_grad_norm < 0.0) throw ConfigError("max_grad_norm must be >= 0");
    network.validate();
    weights.validate(network.num_classes);
    if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
}

GradAndParts compute_item_gradients(const ModelParams& params, const ItemDraw& draw,
                                    double lambda_warm, const ScheduleTable& sched,
                                    const TrainConfig& cfg) {
    const Index3 patch = draw.hc.dims;
    const nn::Shape shape{1, patch[2], patch[1], patch[0]};
    const DiffusionNorm norm{cfg.network.suv_cutoff};

    const std::vector<double> x0 = norm.map(draw.hc.data);
    const std::vector<double> x_t = forward_diffuse(x0, draw.t, draw.eps, sched);
    const std::vector<double> cond = norm.map(draw.lc.data);

    Graph g(true);
    ParamBank pb(g, params, true);

    Var x_t_c = g.constant(shape, x_t);
    Var cond_c = g.constant(shape, cond);
    Var eps_c = g.constant(shape, draw.eps);
    Var i_lc_suv =
        g.constant(shape, std::vector<double>(draw.lc.data.begin(), draw.lc.data.end()));

    Var eps_hat = denoiser_forward(g, pb, x_t_c, cond_c, draw.t, cfg.network);
    Var diff = diff_loss_node(g, eps_hat, eps_c);

    // One-step x0 estimate; the stand-in for P_HC during joint training.
    const double sa = std::sqrt(sched.alpha_bar[draw.t]);
    const double sb = std::sqrt(1.0 - sched.alpha_bar[draw.t]);
    Var p_hc = nn::clamp(
        g, nn::mul_scalar(g, nn::sub(g, x_t_c, nn::mul_scalar(g, eps_hat, sb)), 1.0 / sa), -1.0,
        1.0);
    if (cfg.stop_gradient_at_phc) p_hc = nn::detach(g, p_hc);

    Var lor;
    if (cfg.ablation.use_lor_regularizer) {
        Var p_hc_suv = nn::mul_scalar(g, nn::add_scalar(g, p_hc, 1.0), cfg.network.suv_cutoff / 2.0);
        lor = lor_loss_node(g, p_hc_suv, draw.hc.data, draw.labels, cfg.weights);
    }

    Var p_hcr;
    Var rev;
    if (cfg.ablation.use_revision_module) {
        p_hcr = revision_forward(g, pb, p_hc, i_lc_suv, cfg.network);
        rev = rev_loss_node(g, p_hcr, draw.hc.data, draw.labels, cfg.weights);
    } else {
        p_hcr = i_lc_suv;
    }

    SegLogits logits = segmenter_forward(g, pb, p_hcr, i_lc_suv, cfg.network);
    Var seg = seg_loss_node(g, nn::softmax_channels(g, logits.lesion),
                            nn::softmax_channels(g, logits.organ), draw.labels, cfg.weights);

    Var side = seg;
    if (rev) side = nn::add(g, side, rev);
    if (lor) side = nn::add(g, side, lor);
    Var total = nn::add(g, diff, nn::mul_scalar(g, side, lambda_warm));

    g.backward(total);

    GradAndParts out;
    out.diff = diff->val[0];
    out.lor = lor ? lor->val[0] : 0.0;
    out.rev = rev ? rev->val[0] : 0.0;
    out.seg = seg->val[0];
    pb.accumulate_grads(out.grads);
    return out;
}

namespace {

ItemDraw draw_item(Rng& rng, const Dataset& dataset, const TrainConfig& cfg) {
    const size_t case_idx =
        dataset.cases.size() == 1 ? 0 : rng.below(dataset.cases.size());
    const TrainCase& tc = dataset.cases[case_idx];
    TrainingPatch p = sample_training_patch(tc.lc, tc.hc, tc.labels, cfg.patch,
                                            cfg.lesion_target_frac, rng);
    ItemDraw d;
    d.lc = std::move(p.lc);
    d.hc = std::move(p.hc);
    d.labels = std::move(p.labels);
    d.lesion_fallback = p.lesion_fallback;
    d.t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.timesteps)));
    d.eps.resize(static_cast<size_t>(numel(cfg.patch)));
    for (auto& v : d.eps) v = rng.normal();
    return d;
}

void adam_update(TrainState& state, const std::map<std::string, std::vector<double>>& grads,
                 const TrainConfig& cfg) {
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (const auto& [name, grad] : grads) {
        ParamArray& p = state.params.at(name);
        auto& m = state.adam_m[name];
        auto& v = state.adam_v[name];
        if (m.empty()) m.assign(grad.size(), 0.0);
        if (v.empty()) v.assign(grad.size(), 0.0);
        for (size_t i = 0; i < grad.size(); ++i) {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p.data[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps);
        }
    }
}

}  // namespace

LossReport train_step(TrainState& state, const Dataset& dataset, const ScheduleTable& sched,
                      const TrainConfig& cfg) {
    if (dataset.cases.empty()) throw ConfigError("train_step: dataset is empty");
    Rng rng(0);
    rng.set_state(state.rng_state);

    const int epoch = static_cast<int>(state.step / cfg.steps_per_epoch);
    const double lambda = warmup_weight(epoch, cfg.e_max);

    // All randomness is drawn sequentially before any gradient work.
    std::vector<ItemDraw> draws;
    draws.reserve(cfg.batch_size);
    for (int i = 0; i < cfg.batch_size; ++i) {
        draws.push_back(draw_item(rng, dataset, cfg));
        if (draws.back().lesion_fallback) ++state.lesion_fallback_count;
    }
    state.rng_state = rng.state();

    std::map<std::string, std::vector<double>> grads;
    double diff = 0.0, lor = 0.0, rev = 0.0, seg = 0.0;
    for (const ItemDraw& d : draws) {
        GradAndParts gp = compute_item_gradients(state.params, d, lambda, sched, cfg);
        diff += gp.diff;
        lor += gp.lor;
        rev += gp.rev;
        seg += gp.seg;
        for (auto& [name, gvec] : gp.grads) {
            auto& dst = grads[name];
            if (dst.empty()) dst.assign(gvec.size(), 0.0);
            for (size_t i = 0; i < gvec.size(); ++i) dst[i] += gvec[i];
        }
    }
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    for (auto& [name, gvec] : grads)
        for (auto& v : gvec) v *= inv_b;

    if (cfg.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const auto& [name, gvec] : grads)
            for (double v : gvec) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > cfg.max_grad_norm) {
            const double scale = cfg.max_grad_norm / norm;
            for (auto& [name, gvec] : grads)
                for (auto& v : gvec) v *= scale;
        }
    }

    LossReport report =
        total_loss(diff * inv_b, lor * inv_b, rev * inv_b, seg * inv_b, lambda);

    adam_update(state, grads, cfg);
    state.step += 1;
    state.epoch = static_cast<int>(state.step / cfg.steps_per_epoch);
    return report;
}

TrainState make_initial_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState state;
    state.params = init_params(cfg.network, cfg.seed);
    state.rng_state = Rng(cfg.seed).derive(0x747261696eULL).state();  // training stream
    return state;
}

std::vector<LossReport> train(TrainState& state, const Dataset& dataset, const TrainConfig& cfg,
                              const TrainSinks& sinks) {
    cfg.validate();
    if (dataset.cases.empty()) throw ConfigError("train: dataset is empty");
    for (const auto& tc : dataset.cases) {
        require_same_geometry(tc.lc, tc.labels, "train case " + tc.id);
        require_same_geometry(tc.hc, tc.labels, "train case " + tc.id);
    }
    const ScheduleTable sched = cosine_schedule(cfg.timesteps, cfg.s_offset);
    const long long total_steps = static_cast<long long>(cfg.e_max) * cfg.steps_per_epoch;

    std::vector<LossReport> history;
    history.reserve(static_cast<size_t>(total_steps - state.step));
    while (state.step < total_steps) {
        const int epoch_before = static_cast<int>(state.step / cfg.steps_per_epoch);
        LossReport r = train_step(state, dataset, sched, cfg);
        history.push_back(r);
        if (sinks.on_step) sinks.on_step(state.step, epoch_before, r);
        const bool epoch_done = state.step % cfg.steps_per_epoch == 0;
        if (epoch_done && sinks.on_snapshot && cfg.checkpoint_interval > 0 &&
            state.epoch % cfg.checkpoint_interval == 0 && state.step < total_steps)
            sinks.on_snapshot(state, state.epoch);
    }
    return history;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state,
                      const nlohmann::json& meta) {
    ModelParams all = state.params;
    for (const auto& [name, m] : state.adam_m) {
        ParamArray a;
        a.shape = {static_cast<int>(m.size())};
        a.data = m;
        all.arrays.emplace("optimizer/m/" + name, std::move(a));
    }
    for (const auto& [name, v] : state.adam_v) {
        ParamArray a;
        a.shape = {static_cast<int>(v.size())};
        a.data = v;
        all.arrays.emplace("optimizer/v/" + name, std::move(a));
    }
    nlohmann::json full_meta = meta;
    full_meta["train_state"] = {
        {"step", state.step},
        {"epoch", state.epoch},
        {"rng_state", state.rng_state},
        {"lesion_fallback_count", state.lesion_fallback_count},
    };
    save_param_container(path, all, full_meta, "train_state");
}

LoadedTrainState load_train_state(const std::filesystem::path& path) {
    LoadedContainer lc = load_param_container(path);
    if (lc.kind != "train_state")
        throw DataError(path.string() + ": container is not a training state");
    LoadedTrainState out;
    out.meta = lc.meta;
    out.state.params.init_seed = lc.params.init_seed;
    for (auto& [name, arr] : lc.params.arrays) {
        if (name.rfind("optimizer/m/", 0) == 0)
            out.state.adam_m[name.substr(12)] = std::move(arr.data);
        else if (name.rfind("optimizer/v/", 0) == 0)
            out.state.adam_v[name.substr(12)] = std::move(arr.data);
        else
            out.state.params.arrays.emplace(name, std::move(arr));
    }
    const auto& ts = lc.meta.at("train_state");
    out.state.step = ts.at("step").get<long long>();
    out.state.epoch = ts.at("epoch").get<int>();
    const auto rs = ts.at("rng_state").get<std::vector<uint64_t>>();
    if (rs.size() != 4) throw DataError(path.string() + ": malformed rng state");
    std::copy(rs.begin(), rs.end(), out.state.rng_state.begin());
    out.state.lesion_fallback_count = ts.value("lesion_fallback_count", 0LL);
    out.meta.erase("train_state");
    return out;
}

}  // namespace amdiff
