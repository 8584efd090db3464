#include "amdiff/pipeline.hpp"

#include <atomic>
#include <cmath>
#include <thread>

namespace amdiff {

using nlohmann::json;

namespace {

constexpr uint64_t kChainStreamTag = 0x636861696eULL;  // per-patch chain noise

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
    threads = std::max(1, threads);
    if (threads == 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    const int workers = static_cast<int>(std::min<size_t>(threads, n));
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    for (auto& th : pool) th.join();
}

void check_inference_inputs(const Volume3D& lc, const Checkpoint& ckpt, const ScheduleTable& sched,
                            const PatchGrid& grid) {
    lc.validate();
    if (grid.dims != lc.dims)
        throw DataError("inference: patch grid was planned for different volume dims");
    if (sched.T != ckpt.timesteps)
        throw ConfigError("inference: schedule T " + std::to_string(sched.T) +
                          " does not match checkpoint timesteps " +
                          std::to_string(ckpt.timesteps));
}

std::vector<double> patch_chain(const Volume3D& lc_patch, const Checkpoint& ckpt,
                                const ScheduleTable& sched, Rng rng) {
    const DiffusionNorm norm{ckpt.network.suv_cutoff};
    const std::vector<double> cond = norm.map(lc_patch.data);
    DenoiserFn fn = [&](const std::vector<double>& x_t, const std::vector<double>& c, int t) {
        return run_denoiser(ckpt.params, ckpt.network, x_t, c, t, lc_patch.dims);
    };
    return sample_chain(cond, fn, sched, rng);
}

std::vector<double> patch_one_step(const Volume3D& lc_patch, const Checkpoint& ckpt,
                                   const ScheduleTable& sched, Rng rng) {
    const DiffusionNorm norm{ckpt.network.suv_cutoff};
    const std::vector<double> cond = norm.map(lc_patch.data);
    std::vector<double> x_t(cond.size());
    for (auto& v : x_t) v = rng.normal();
    const std::vector<double> eps_hat =
        run_denoiser(ckpt.params, ckpt.network, x_t, cond, sched.T, lc_patch.dims);
    return predict_x0(x_t, eps_hat, sched.T, sched);
}

}  // namespace

Volume3D denoise_volume(const Volume3D& i_lc, const Checkpoint& ckpt, const ScheduleTable& sched,
                        const PatchGrid& grid, uint64_t seed, int threads) {
    check_inference_inputs(i_lc, ckpt, sched, grid);
    const DiffusionNorm norm{ckpt.network.suv_cutoff};
    const Rng base(seed);

    std::vector<Volume3D> results(grid.origins.size());
    parallel_for(grid.origins.size(), threads, [&](size_t i) {
        Volume3D lc_patch = extract_one(i_lc, grid.origins[i], grid.patch_size);
        Rng rng = base.derive(kChainStreamTag, i);
        const std::vector<double> x0 = patch_chain(lc_patch, ckpt, sched, rng);
        Volume3D out(grid.patch_size, i_lc.voxel_mm);
        out.data = norm.unmap_to_suv(x0);
        results[i] = std::move(out);
    });
    Volume3D fused = reassemble(results, grid);
    fused.voxel_mm = i_lc.voxel_mm;
    return fused;
}

namespace {

struct PatchProbs {
    std::vector<double> lesion;
    std::vector<double> organ;
};

SegOutput assemble_seg(const std::vector<PatchProbs>& probs, const PatchGrid& grid,
                       const Spacing3& voxel_mm, int num_classes) {
    const int organ_ch = num_classes - 1;
    std::vector<std::vector<double>> lesion_planes, organ_planes;
    lesion_planes.reserve(probs.size());
    organ_planes.reserve(probs.size());
    for (const auto& p : probs) {
        lesion_planes.push_back(p.lesion);
        organ_planes.push_back(p.organ);
    }
    const std::vector<double> lesion = reassemble_planes(lesion_planes, grid, 2);
    const std::vector<double> organ = reassemble_planes(organ_planes, grid, organ_ch);
    const long long n = numel(grid.dims);

    SegOutput out;
    out.lesion_prob = Volume3D(grid.dims, voxel_mm);
    for (long long v = 0; v < n; ++v)
        out.lesion_prob.data[v] = static_cast<float>(lesion[n + v]);  // channel 1 = lesion
    out.organ_probs.reserve(organ_ch);
    for (int c = 0; c < organ_ch; ++c) {
        Volume3D vol(grid.dims, voxel_mm);
        for (long long v = 0; v < n; ++v)
            vol.data[v] = static_cast<float>(organ[static_cast<long long>(c) * n + v]);
        out.organ_probs.push_back(std::move(vol));
    }
    out.fused = fuse_labels(out.lesion_prob, out.organ_probs, num_classes);
    return out;
}

}  // namespace

SegOutput segment_volume(const Volume3D& i_lc, const Checkpoint& ckpt, const ScheduleTable& sched,
                         const PatchGrid& grid, uint64_t seed, PhcMode mode, int threads) {
    check_inference_inputs(i_lc, ckpt, sched, grid);
    const Rng base(seed);
    const bool bypass = mode == PhcMode::bypass || !ckpt.ablation.use_revision_module;

    std::vector<PatchProbs> probs(grid.origins.size());
    parallel_for(grid.origins.size(), threads, [&](size_t i) {
        Volume3D lc_patch = extract_one(i_lc, grid.origins[i], grid.patch_size);
        const std::vector<double> lc_suv(lc_patch.data.begin(), lc_patch.data.end());
        std::vector<double> p_hcr;
        if (bypass) {
            p_hcr = lc_suv;
        } else {
            Rng rng = base.derive(kChainStreamTag, i);
            const std::vector<double> p_hc = mode == PhcMode::chain
                                                 ? patch_chain(lc_patch, ckpt, sched, rng)
                                                 : patch_one_step(lc_patch, ckpt, sched, rng);
            p_hcr = run_revision(ckpt.params, ckpt.network, p_hc, lc_suv, grid.patch_size);
        }
        SegProbs sp = run_segmenter(ckpt.params, ckpt.network, p_hcr, lc_suv, grid.patch_size);
        probs[i] = {std::move(sp.lesion), std::move(sp.organ)};
    });
    return assemble_seg(probs, grid, i_lc.voxel_mm, ckpt.network.num_classes);
}

SegOutput segment_volume_with_phc(const Volume3D& i_lc, const Volume3D& p_hc_suv,
                                  const Checkpoint& ckpt, const PatchGrid& grid, int threads) {
    i_lc.validate();
    require_same_geometry(i_lc, p_hc_suv, "segment_volume_with_phc");
    if (grid.dims != i_lc.dims)
        throw DataError("segment_volume_with_phc: grid dims mismatch");
    const DiffusionNorm norm{ckpt.network.suv_cutoff};
    const bool bypass = !ckpt.ablation.use_revision_module;

    std::vector<PatchProbs> probs(grid.origins.size());
    parallel_for(grid.origins.size(), threads, [&](size_t i) {
        Volume3D lc_patch = extract_one(i_lc, grid.origins[i], grid.patch_size);
        const std::vector<double> lc_suv(lc_patch.data.begin(), lc_patch.data.end());
        std::vector<double> p_hcr;
        if (bypass) {
            p_hcr = lc_suv;
        } else {
            Volume3D phc_patch = extract_one(p_hc_suv, grid.origins[i], grid.patch_size);
            const std::vector<double> p_hc_diff = norm.map(phc_patch.data);
            p_hcr = run_revision(ckpt.params, ckpt.network, p_hc_diff, lc_suv, grid.patch_size);
        }
        SegProbs sp = run_segmenter(ckpt.params, ckpt.network, p_hcr, lc_suv, grid.patch_size);
        probs[i] = {std::move(sp.lesion), std::move(sp.organ)};
    });
    return assemble_seg(probs, grid, i_lc.voxel_mm, ckpt.network.num_classes);
}

LabelVolume fuse_labels(const Volume3D& lesion_prob, const std::vector<Volume3D>& organ_probs,
                        int num_classes) {
    if (static_cast<int>(organ_probs.size()) != num_classes - 1)
        throw ConfigError("fuse_labels: expected " + std::to_string(num_classes - 1) +
                          " organ probability channels");
    for (const auto& v : organ_probs)
        require_same_geometry(lesion_prob, v, "fuse_labels");
    LabelVolume fused(lesion_prob.dims, lesion_prob.voxel_mm, num_classes);
    const long long n = numel(lesion_prob.dims);
    for (long long v = 0; v < n; ++v) {
        int best = 0;
        float best_p = organ_probs[0].data[v];
        for (int c = 1; c < static_cast<int>(organ_probs.size()); ++c)
            if (organ_probs[c].data[v] > best_p) {
                best_p = organ_probs[c].data[v];
                best = c;
            }
        // Organ channel c >= 1 corresponds to class c + 1 (lesion has no organ channel).
        uint8_t label = best == 0 ? 0 : static_cast<uint8_t>(best + 1);
        if (lesion_prob.data[v] > 0.5f) label = 1;
        fused.data[v] = label;
    }
    return fused;
}

QuantReport quantify(const Volume3D& p_hc, const LabelVolume& labels, const ClassRoster& roster) {
    require_same_geometry(p_hc, labels, "quantify");
    if (roster.num_classes() != labels.num_classes)
        throw ConfigError("quantify: roster size does not match label classes");
    const double voxel_ml = p_hc.voxel_mm[0] * p_hc.voxel_mm[1] * p_hc.voxel_mm[2] / 1000.0;

    QuantReport r;
    std::vector<double> sums(labels.num_classes, 0.0);
    std::vector<long long> counts(labels.num_classes, 0);
    for (size_t i = 0; i < labels.data.size(); ++i) {
        sums[labels.data[i]] += p_hc.data[i];
        counts[labels.data[i]] += 1;
    }
    r.mtv_ml = static_cast<double>(counts[1]) * voxel_ml;
    const double lesion_mean = counts[1] > 0 ? sums[1] / counts[1] : 0.0;
    r.tlg = r.mtv_ml * lesion_mean;
    for (int s = 1; s < labels.num_classes; ++s)
        r.suv_mean[roster.names[s]] = counts[s] > 0 ? sums[s] / counts[s] : 0.0;
    return r;
}

json quant_report_to_json(const QuantReport& r) {
    json j;
    j["mtv_ml"] = r.mtv_ml;
    j["tlg"] = r.tlg;
    j["suv_mean"] = r.suv_mean;
    if (r.per_class_nrmse) j["per_class_nrmse"] = *r.per_class_nrmse;
    if (r.per_class_dice) j["per_class_dice"] = *r.per_class_dice;
    return j;
}

QuantReport quant_report_from_json(const json& j) {
    QuantReport r;
    r.mtv_ml = j.at("mtv_ml").get<double>();
    r.tlg = j.at("tlg").get<double>();
    r.suv_mean = j.at("suv_mean").get<std::map<std::string, double>>();
    if (j.contains("per_class_nrmse"))
        r.per_class_nrmse = j["per_class_nrmse"].get<std::map<std::string, double>>();
    if (j.contains("per_class_dice"))
        r.per_class_dice = j["per_class_dice"].get<std::map<std::string, double>>();
    return r;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    json meta;
    meta["network"] = network_config_to_json(ckpt.network);
    meta["ablation"] = {{"use_lor_regularizer", ckpt.ablation.use_lor_regularizer},
                        {"use_revision_module", ckpt.ablation.use_revision_module}};
    meta["timesteps"] = ckpt.timesteps;
    meta["s_offset"] = ckpt.s_offset;
    meta["class_names"] = ckpt.roster.names;
    save_param_container(path, ckpt.params, meta, "model");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    LoadedContainer lc = load_param_container(path);
    if (lc.kind != "model")
        throw DataError(path.string() + ": container is not a model checkpoint");
    Checkpoint ckpt;
    ckpt.params = std::move(lc.params);
    ckpt.network = network_config_from_json(lc.meta.at("network"));
    ckpt.ablation.use_lor_regularizer =
        lc.meta.at("ablation").value("use_lor_regularizer", true);
    ckpt.ablation.use_revision_module =
        lc.meta.at("ablation").value("use_revision_module", true);
    ckpt.timesteps = lc.meta.at("timesteps").get<int>();
    ckpt.s_offset = lc.meta.at("s_offset").get<double>();
    ckpt.roster.names = lc.meta.at("class_names").get<std::vector<std::string>>();
    ckpt.roster.validate();
    return ckpt;
}

}  // namespace amdiff
