#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "amdiff/config.hpp"
#include "amdiff/metrics.hpp"
#include "amdiff/pipeline.hpp"

namespace amdiff::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::string fraction_str(double f) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", f);
    return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << text;
}

void write_json_file(const fs::path& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": invalid JSON (" + e.what() + ")");
    }
}

struct CommonOpts {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    int threads = 1;

    ExperimentConfig load_config() const {
        ExperimentConfig cfg =
            config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
        if (seed_set) cfg.seed = seed;
        return cfg;
    }
};

uint64_t derived_seed(uint64_t base, uint64_t tag, uint64_t index) {
    return Rng(base).derive(tag, index).next_u64();
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

int cmd_phantom(const CommonOpts& common, const std::string& out_dir, int n_cases,
                int n_test_cases) {
    ExperimentConfig cfg = common.load_config();
    if (n_cases < 1) throw ConfigError("phantom: --cases must be >= 1");
    if (n_test_cases < 0 || n_test_cases > n_cases)
        throw ConfigError("phantom: --test-cases must lie in [0, cases]");
    fs::create_directories(out_dir);
    const ClassRoster roster = cfg.roster();

    json manifest;
    manifest["format"] = "amdiff-dataset-v1";
    manifest["seed"] = cfg.seed;
    manifest["class_names"] = roster.names;
    manifest["fractions"] = cfg.fractions;
    manifest["config"] = cfg.to_json();
    json cases = json::array();

    for (int i = 0; i < n_cases; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "case_%03d", i);
        const fs::path case_dir = fs::path(out_dir) / id;
        fs::create_directories(case_dir);

        PhantomSpec spec = cfg.make_phantom_spec(derived_seed(cfg.seed, 0x70686e74ULL, i));
        PhantomCase pc = generate_phantom(spec);
        write_volume(pc.activity, case_dir / "hc.pvol");
        write_volume(pc.labels, case_dir / "labels.pvol");

        json entry;
        entry["id"] = id;
        entry["split"] = i >= n_cases - n_test_cases ? "test" : "train";
        entry["hc"] = std::string(id) + "/hc.pvol";
        entry["labels"] = std::string(id) + "/labels.pvol";
        json lc_map = json::object();
        for (size_t fi = 0; fi < cfg.fractions.size(); ++fi) {
            const double f = cfg.fractions[fi];
            CountModel model{cfg.counts_per_suv, f};
            Volume3D lc = simulate_count_level(
                pc.activity, model, derived_seed(cfg.seed, 0x6c63ULL, i * 1024 + fi));
            const std::string name = "lc_" + fraction_str(f) + ".pvol";
            write_volume(lc, case_dir / name);
            lc_map[fraction_str(f)] = std::string(id) + "/" + name;
        }
        entry["lc"] = lc_map;
        entry["ground_truth"] = quant_report_to_json(quantify(pc.activity, pc.labels, roster));
        cases.push_back(entry);

        json sidecar;
        sidecar["id"] = id;
        sidecar["seed"] = spec.seed;
        json lesions = json::array();
        for (const auto& l : pc.lesions)
            lesions.push_back(
                {{"center_mm", l.center_mm}, {"radius_mm", l.radius_mm}, {"suv", l.suv}});
        sidecar["lesions"] = lesions;
        sidecar["spec"] = cfg.to_json()["phantom"];
        write_json_file(case_dir / "case.json", sidecar);
    }
    manifest["cases"] = cases;
    write_json_file(fs::path(out_dir) / "manifest.json", manifest);
    std::cout << "wrote " << n_cases << " cases to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// dataset loading
// ---------------------------------------------------------------------------

struct ManifestCase {
    std::string id;
    std::string split;
    fs::path hc, labels;
    std::map<std::string, fs::path> lc;
    QuantReport ground_truth;
};

struct Manifest {
    fs::path root;
    uint64_t seed = 0;
    std::vector<std::string> class_names;
    std::vector<double> fractions;
    std::vector<ManifestCase> cases;
};

Manifest load_manifest(const fs::path& data_dir) {
    const json j = read_json_file(data_dir / "manifest.json");
    if (j.value("format", "") != "amdiff-dataset-v1")
        throw DataError(data_dir.string() + ": not an amdiff dataset manifest");
    Manifest m;
    m.root = data_dir;
    m.seed = j.value("seed", 0ULL);
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.fractions = j.at("fractions").get<std::vector<double>>();
    for (const auto& e : j.at("cases")) {
        ManifestCase c;
        c.id = e.at("id").get<std::string>();
        c.split = e.value("split", "train");
        c.hc = data_dir / e.at("hc").get<std::string>();
        c.labels = data_dir / e.at("labels").get<std::string>();
        for (const auto& [key, rel] : e.at("lc").items())
            c.lc[key] = data_dir / rel.get<std::string>();
        c.ground_truth = quant_report_from_json(e.at("ground_truth"));
        m.cases.push_back(std::move(c));
    }
    return m;
}

fs::path lc_path_for(const ManifestCase& c, double fraction) {
    const std::string key = fraction_str(fraction);
    auto it = c.lc.find(key);
    if (it == c.lc.end())
        throw DataError("case " + c.id + " has no low-count volume at fraction " + key);
    return it->second;
}

Dataset load_training_dataset(const Manifest& m, double fraction, const std::string& split) {
    Dataset ds;
    for (const auto& c : m.cases) {
        if (split != "all" && c.split != split) continue;
        TrainCase tc;
        tc.id = c.id;
        tc.hc = read_suv_volume(c.hc);
        tc.labels = read_label_volume(c.labels);
        tc.lc = read_suv_volume(lc_path_for(c, fraction));
        ds.cases.push_back(std::move(tc));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

json loss_report_json(long long step, int epoch, const LossReport& r) {
    return json{{"step", step},   {"epoch", epoch}, {"diff", r.diff},
                {"lor", r.lor},   {"rev", r.rev},   {"seg", r.seg},
                {"lambda", r.lambda_warm},          {"total", r.total}};
}

int cmd_train(const CommonOpts& common, const std::string& data_dir, const std::string& out_dir,
              std::optional<double> fraction_flag, const std::string& resume_path) {
    ExperimentConfig cfg = common.load_config();
    const Manifest manifest = load_manifest(data_dir);
    const double fraction = fraction_flag.value_or(cfg.count_fraction);

    Dataset ds = load_training_dataset(manifest, fraction, "train");
    if (ds.cases.empty()) ds = load_training_dataset(manifest, fraction, "all");
    if (ds.cases.empty()) throw ConfigError("train: dataset is empty");

    fs::create_directories(out_dir);
    const fs::path out = out_dir;
    TrainConfig tcfg = cfg.make_train_config();

    TrainState state;
    const bool resume = !resume_path.empty();
    if (resume)
        state = load_train_state(resume_path).state;
    else
        state = make_initial_state(tcfg);

    std::ofstream log(out / "loss_log.jsonl",
                      std::ios::binary | (resume ? std::ios::app : std::ios::trunc));
    if (!log) throw DataError("cannot open loss log for writing");

    TrainSinks sinks;
    sinks.on_step = [&](long long step, int epoch, const LossReport& r) {
        log << loss_report_json(step, epoch, r).dump() << "\n";
    };
    sinks.on_snapshot = [&](const TrainState& s, int completed_epochs) {
        save_train_state(out / ("state_epoch" + std::to_string(completed_epochs) + ".bin"), s,
                         json{{"config", cfg.to_json()}});
    };

    train(state, ds, tcfg, sinks);
    log.flush();

    Checkpoint ckpt;
    ckpt.params = state.params;
    ckpt.network = tcfg.network;
    ckpt.ablation = tcfg.ablation;
    ckpt.timesteps = tcfg.timesteps;
    ckpt.s_offset = tcfg.s_offset;
    ckpt.roster = cfg.roster();
    save_checkpoint(out / "checkpoint.bin", ckpt);
    save_train_state(out / "state_final.bin", state, json{{"config", cfg.to_json()}});
    write_json_file(out / "config.json", cfg.to_json());
    std::cout << "training complete: " << (out / "checkpoint.bin").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// denoise / segment / quantify
// ---------------------------------------------------------------------------

PatchGrid grid_for(const ExperimentConfig& cfg, const Index3& dims) {
    return plan_grid(dims, cfg.patch, cfg.stride);
}

int cmd_denoise(const CommonOpts& common, const std::string& checkpoint_path,
                const std::string& input_path, const std::string& out_dir) {
    ExperimentConfig cfg = common.load_config();
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const Volume3D lc = read_suv_volume(input_path);
    const ScheduleTable sched = cosine_schedule(ckpt.timesteps, ckpt.s_offset);
    const PatchGrid grid = grid_for(cfg, lc.dims);
    const uint64_t seed = common.seed_set ? common.seed : cfg.seed;

    Volume3D phc = denoise_volume(lc, ckpt, sched, grid, seed, common.threads);
    fs::create_directories(out_dir);
    write_volume(phc, fs::path(out_dir) / "phc.pvol");
    std::cout << "wrote " << (fs::path(out_dir) / "phc.pvol").string() << "\n";
    return 0;
}

int cmd_segment(const CommonOpts& common, const std::string& checkpoint_path,
                const std::string& input_path, const std::string& out_dir, bool fast_seg) {
    ExperimentConfig cfg = common.load_config();
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const Volume3D lc = read_suv_volume(input_path);
    const ScheduleTable sched = cosine_schedule(ckpt.timesteps, ckpt.s_offset);
    const PatchGrid grid = grid_for(cfg, lc.dims);
    const uint64_t seed = common.seed_set ? common.seed : cfg.seed;

    SegOutput seg = segment_volume(lc, ckpt, sched, grid, seed,
                                   fast_seg ? PhcMode::one_step : PhcMode::chain, common.threads);
    fs::create_directories(out_dir);
    const fs::path out = out_dir;
    write_volume(seg.fused, out / "seg.pvol");
    write_volume(seg.lesion_prob, out / "lesion_prob.pvol");
    for (size_t c = 1; c < seg.organ_probs.size(); ++c)
        write_volume(seg.organ_probs[c], out / ("organ_prob_" + ckpt.roster.names[c + 1] + ".pvol"));
    std::cout << "wrote segmentation to " << out_dir << "\n";
    return 0;
}

int cmd_quantify(const std::string& input_path, const std::string& labels_path,
                 const std::string& out_path) {
    const Volume3D phc = read_suv_volume(input_path);
    const LabelVolume labels = read_label_volume(labels_path);
    const ClassRoster roster = ClassRoster::truncated(labels.num_classes);
    const QuantReport r = quantify(phc, labels, roster);
    write_json_file(out_path, quant_report_to_json(r));
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct CaseMetrics {
    std::string id;
    std::optional<double> whole_nrmse, input_nrmse;
    std::map<std::string, std::optional<double>> class_nrmse;
    std::map<std::string, double> class_dice;
    std::optional<QuantReport> report;
    QuantReport gt;
    std::optional<double> mtv_bias, tlg_bias;
};

std::optional<double> safe_nrmse(const Volume3D& pred, const Volume3D& ref,
                                 const Volume3D* mask) {
    try {
        return mask ? nrmse(pred, ref, *mask) : nrmse(pred, ref);
    } catch (const NumericError&) {
        return std::nullopt;
    } catch (const DataError&) {
        return std::nullopt;
    }
}

CaseMetrics evaluate_case(const ManifestCase& mc, const fs::path& pred_dir,
                          const std::vector<std::string>& class_names, double fraction) {
    CaseMetrics out;
    out.id = mc.id;
    out.gt = mc.ground_truth;
    const Volume3D hc = read_suv_volume(mc.hc);
    const LabelVolume gt_labels = read_label_volume(mc.labels);

    try {
        const Volume3D lc = read_suv_volume(lc_path_for(mc, fraction));
        out.input_nrmse = safe_nrmse(lc, hc, nullptr);
    } catch (const DataError&) {
    }

    const fs::path phc_path = pred_dir / mc.id / "phc.pvol";
    const fs::path seg_path = pred_dir / mc.id / "seg.pvol";
    const fs::path report_path = pred_dir / mc.id / "report.json";

    std::optional<Volume3D> phc;
    if (fs::exists(phc_path)) {
        phc = read_suv_volume(phc_path);
        out.whole_nrmse = safe_nrmse(*phc, hc, nullptr);
        for (size_t s = 1; s < class_names.size(); ++s) {
            const Volume3D mask = one_hot_mask(gt_labels, static_cast<int>(s));
            out.class_nrmse[class_names[s]] = safe_nrmse(*phc, hc, &mask);
        }
    }
    std::optional<LabelVolume> seg;
    if (fs::exists(seg_path)) {
        seg = read_label_volume(seg_path);
        for (size_t s = 1; s < class_names.size(); ++s)
            out.class_dice[class_names[s]] = dice(*seg, gt_labels, static_cast<int>(s));
    }
    if (fs::exists(report_path)) {
        out.report = quant_report_from_json(read_json_file(report_path));
    } else if (phc && seg) {
        out.report = quantify(*phc, *seg, ClassRoster::truncated(gt_labels.num_classes));
    }
    if (out.report) {
        if (out.gt.mtv_ml != 0.0) out.mtv_bias = percent_bias(out.report->mtv_ml, out.gt.mtv_ml);
        if (out.gt.tlg != 0.0) out.tlg_bias = percent_bias(out.report->tlg, out.gt.tlg);
    }
    return out;
}

json mean_std_json(const std::vector<double>& v) {
    const MeanStd ms = mean_std(v);
    return json{{"mean", ms.mean}, {"std", ms.std}, {"n", ms.n}};
}

json regression_json(const std::vector<double>& gt, const std::vector<double>& est) {
    if (gt.size() < 2) return nullptr;
    try {
        const RegressionResult r = ols_regression(gt, est);
        return json{{"slope", r.slope},
                    {"intercept", r.intercept},
                    {"r_squared", r.r_squared},
                    {"n", r.n},
                    {"constant_y", r.constant_y}};
    } catch (const NumericError&) {
        return nullptr;
    }
}

std::string render_metrics_table(const std::vector<std::string>& class_names,
                                 const std::vector<std::pair<std::string, json>>& rows) {
    // rows: label -> {"nrmse": {class: value|null}, "dice": {class: value|null}}
    std::vector<std::string> cols = {"whole"};
    for (size_t s = 1; s < class_names.size(); ++s) cols.push_back(class_names[s]);
    auto fmt = [](const json& v) -> std::string {
        if (v.is_null()) return "-";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", v.get<double>());
        return buf;
    };
    std::string text;
    for (const char* metric : {"nrmse", "dice"}) {
        text += std::string(metric) + " (rows: method, columns: class)\n";
        std::string head = "  method";
        head.resize(42, ' ');
        for (const auto& c : cols)
            if (metric == std::string("dice") && c == "whole") continue;
        for (const auto& c : cols) {
            if (std::string(metric) == "dice" && c == "whole") continue;
            std::string cell = c;
            cell.resize(12, ' ');
            head += cell;
        }
        text += head + "\n";
        for (const auto& [label, data] : rows) {
            std::string line = "  " + label;
            line.resize(42, ' ');
            for (const auto& c : cols) {
                if (std::string(metric) == "dice" && c == "whole") continue;
                json v = nullptr;
                if (data.contains(metric) && data[metric].contains(c)) v = data[metric][c];
                std::string cell = fmt(v);
                cell.resize(12, ' ');
                line += cell;
            }
            text += line + "\n";
        }
        text += "\n";
    }
    return text;
}

json aggregate_cases(const std::vector<CaseMetrics>& cases,
                     const std::vector<std::string>& class_names) {
    json agg;
    std::vector<double> whole, input;
    for (const auto& c : cases) {
        if (c.whole_nrmse) whole.push_back(*c.whole_nrmse);
        if (c.input_nrmse) input.push_back(*c.input_nrmse);
    }
    json nrmse_j = json::object();
    json dice_j = json::object();
    if (!whole.empty()) nrmse_j["whole"] = mean_std_json(whole)["mean"];
    for (size_t s = 1; s < class_names.size(); ++s) {
        std::vector<double> vals, dvals;
        for (const auto& c : cases) {
            auto it = c.class_nrmse.find(class_names[s]);
            if (it != c.class_nrmse.end() && it->second) vals.push_back(*it->second);
            auto dit = c.class_dice.find(class_names[s]);
            if (dit != c.class_dice.end()) dvals.push_back(dit->second);
        }
        nrmse_j[class_names[s]] = vals.empty() ? json(nullptr) : json(mean_std(vals).mean);
        dice_j[class_names[s]] = dvals.empty() ? json(nullptr) : json(mean_std(dvals).mean);
    }
    agg["nrmse"] = nrmse_j;
    agg["dice"] = dice_j;
    if (!input.empty()) agg["input_nrmse_whole"] = mean_std(input).mean;

    std::vector<double> mtv_bias, tlg_bias;
    for (const auto& c : cases) {
        if (c.mtv_bias) mtv_bias.push_back(*c.mtv_bias);
        if (c.tlg_bias) tlg_bias.push_back(*c.tlg_bias);
    }
    agg["mtv_bias_percent"] = mtv_bias.empty() ? json(nullptr) : mean_std_json(mtv_bias);
    agg["tlg_bias_percent"] = tlg_bias.empty() ? json(nullptr) : mean_std_json(tlg_bias);
    return agg;
}

json evaluate_dir(const Manifest& manifest, const fs::path& pred_dir, double fraction,
                  const std::string& split, std::vector<CaseMetrics>* out_cases) {
    std::vector<CaseMetrics> cases;
    std::vector<std::string> unpaired;
    for (const auto& mc : manifest.cases) {
        if (split != "all" && mc.split != split) continue;
        if (!fs::exists(pred_dir / mc.id)) {
            unpaired.push_back(mc.id);
            continue;
        }
        cases.push_back(evaluate_case(mc, pred_dir, manifest.class_names, fraction));
    }
    if (!unpaired.empty()) {
        std::cerr << "warning: excluded unpaired cases:";
        for (const auto& id : unpaired) std::cerr << " " << id;
        std::cerr << "\n";
    }

    json out;
    json case_list = json::array();
    std::vector<double> gt_mtv, est_mtv, gt_tlg, est_tlg;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> suv_pairs;
    for (const auto& c : cases) {
        json cj;
        cj["id"] = c.id;
        cj["whole_nrmse"] = c.whole_nrmse ? json(*c.whole_nrmse) : json(nullptr);
        cj["input_nrmse"] = c.input_nrmse ? json(*c.input_nrmse) : json(nullptr);
        json cn = json::object();
        for (const auto& [name, v] : c.class_nrmse) cn[name] = v ? json(*v) : json(nullptr);
        cj["per_class_nrmse"] = cn;
        cj["per_class_dice"] = c.class_dice;
        cj["ground_truth"] = quant_report_to_json(c.gt);
        if (c.report) {
            cj["prediction"] = quant_report_to_json(*c.report);
            gt_mtv.push_back(c.gt.mtv_ml);
            est_mtv.push_back(c.report->mtv_ml);
            gt_tlg.push_back(c.gt.tlg);
            est_tlg.push_back(c.report->tlg);
            for (const auto& [name, v] : c.gt.suv_mean) {
                auto it = c.report->suv_mean.find(name);
                if (it != c.report->suv_mean.end()) {
                    suv_pairs[name].first.push_back(v);
                    suv_pairs[name].second.push_back(it->second);
                }
            }
        }
        cj["mtv_bias_percent"] = c.mtv_bias ? json(*c.mtv_bias) : json(nullptr);
        cj["tlg_bias_percent"] = c.tlg_bias ? json(*c.tlg_bias) : json(nullptr);
        case_list.push_back(cj);
    }
    out["cases"] = case_list;
    out["unpaired"] = unpaired;
    out["aggregate"] = aggregate_cases(cases, manifest.class_names);
    json reg;
    reg["mtv_ml"] = regression_json(gt_mtv, est_mtv);
    reg["tlg"] = regression_json(gt_tlg, est_tlg);
    for (const auto& [name, pair] : suv_pairs)
        reg["suv_mean_" + name] = regression_json(pair.first, pair.second);
    out["regression"] = reg;
    if (out_cases) *out_cases = std::move(cases);
    return out;
}

int cmd_evaluate(const CommonOpts& common, const std::string& pred_dir, const std::string& ref_dir,
                 const std::string& out_path, std::optional<double> fraction_flag,
                 const std::string& pred_b_dir, const std::string& split) {
    ExperimentConfig cfg = common.load_config();
    const Manifest manifest = load_manifest(ref_dir);
    double fraction = fraction_flag.value_or(
        *std::min_element(manifest.fractions.begin(), manifest.fractions.end()));

    std::vector<CaseMetrics> cases_a;
    json out = evaluate_dir(manifest, pred_dir, fraction, split, &cases_a);

    if (!pred_b_dir.empty()) {
        std::vector<CaseMetrics> cases_b;
        evaluate_dir(manifest, pred_b_dir, fraction, split, &cases_b);
        auto paired = [&](auto getter) {
            std::vector<double> a, b;
            for (const auto& ca : cases_a)
                for (const auto& cb : cases_b)
                    if (ca.id == cb.id) {
                        auto va = getter(ca);
                        auto vb = getter(cb);
                        if (va && vb) {
                            a.push_back(*va);
                            b.push_back(*vb);
                        }
                    }
            return std::make_pair(a, b);
        };
        json wj = json::object();
        auto add_test = [&](const std::string& name, auto getter) {
            auto [a, b] = paired(getter);
            if (a.empty()) {
                wj[name] = nullptr;
                return;
            }
            const WilcoxonResult w = wilcoxon_signed_rank(a, b);
            wj[name] = json{{"p_two_sided", w.p_two_sided},
                            {"statistic", w.statistic},
                            {"n_effective", w.n_effective},
                            {"exact", w.exact}};
        };
        add_test("whole_nrmse", [](const CaseMetrics& c) { return c.whole_nrmse; });
        add_test("lesion_dice", [](const CaseMetrics& c) -> std::optional<double> {
            auto it = c.class_dice.find("lesion");
            if (it == c.class_dice.end()) return std::nullopt;
            return it->second;
        });
        add_test("tlg", [](const CaseMetrics& c) -> std::optional<double> {
            if (!c.report) return std::nullopt;
            return c.report->tlg;
        });
        out["wilcoxon"] = wj;
    }

    write_json_file(out_path, out);
    std::vector<std::pair<std::string, json>> rows = {
        {"prediction", json{{"nrmse", out["aggregate"]["nrmse"]},
                            {"dice", out["aggregate"]["dice"]}}}};
    fs::path txt = out_path;
    txt.replace_extension(".txt");
    write_text_file(txt, render_metrics_table(manifest.class_names, rows));
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(const CommonOpts& common, const std::string& data_dir, const std::string& out_dir,
               std::optional<double> fraction_flag) {
    ExperimentConfig cfg = common.load_config();
    const Manifest manifest = load_manifest(data_dir);
    const double fraction = fraction_flag.value_or(cfg.count_fraction);
    fs::create_directories(out_dir);

    Dataset train_ds = load_training_dataset(manifest, fraction, "train");
    if (train_ds.cases.empty()) train_ds = load_training_dataset(manifest, fraction, "all");
    if (train_ds.cases.empty()) throw ConfigError("ablate: dataset is empty");

    bool has_test = false;
    for (const auto& c : manifest.cases) has_test |= c.split == "test";
    const std::string eval_split = has_test ? "test" : "all";

    struct Variant {
        std::string dir_name;
        std::string label;
        AblationFlags flags;
    };
    const std::vector<Variant> variants = {
        {"full", "AMDiff", {true, true}},
        {"no_lor", "w/o lesion-organ-specific regularizer", {false, true}},
        {"no_rev", "w/o denoising revision", {true, false}},
    };

    std::vector<std::pair<std::string, json>> table_rows;
    json comparison;
    for (const auto& variant : variants) {
        const fs::path vdir = fs::path(out_dir) / variant.dir_name;
        fs::create_directories(vdir);

        TrainConfig tcfg = cfg.make_train_config();
        tcfg.ablation = variant.flags;  // identical seeds across variants

        TrainState state = make_initial_state(tcfg);
        std::ofstream log(vdir / "loss_log.jsonl", std::ios::binary | std::ios::trunc);
        TrainSinks sinks;
        sinks.on_step = [&](long long step, int epoch, const LossReport& r) {
            log << loss_report_json(step, epoch, r).dump() << "\n";
        };
        train(state, train_ds, tcfg, sinks);
        log.flush();

        Checkpoint ckpt;
        ckpt.params = state.params;
        ckpt.network = tcfg.network;
        ckpt.ablation = variant.flags;
        ckpt.timesteps = tcfg.timesteps;
        ckpt.s_offset = tcfg.s_offset;
        ckpt.roster = cfg.roster();
        save_checkpoint(vdir / "checkpoint.bin", ckpt);
        json recorded = cfg.to_json();
        recorded["ablation"] = {{"use_lor_regularizer", variant.flags.use_lor_regularizer},
                                {"use_revision_module", variant.flags.use_revision_module}};
        write_json_file(vdir / "config.json", recorded);

        const ScheduleTable sched = cosine_schedule(ckpt.timesteps, ckpt.s_offset);
        const fs::path pred_dir = vdir / "pred";
        size_t case_idx = 0;
        for (const auto& mc : manifest.cases) {
            ++case_idx;
            if (eval_split != "all" && mc.split != eval_split) continue;
            const Volume3D lc = read_suv_volume(lc_path_for(mc, fraction));
            const PatchGrid grid = grid_for(cfg, lc.dims);
            const uint64_t seed = derived_seed(cfg.seed, 0x61626c61ULL, case_idx);
            fs::create_directories(pred_dir / mc.id);

            Volume3D phc = denoise_volume(lc, ckpt, sched, grid, seed, common.threads);
            write_volume(phc, pred_dir / mc.id / "phc.pvol");
            SegOutput seg = segment_volume_with_phc(lc, phc, ckpt, grid, common.threads);
            write_volume(seg.fused, pred_dir / mc.id / "seg.pvol");
            write_json_file(pred_dir / mc.id / "report.json",
                            quant_report_to_json(quantify(phc, seg.fused, ckpt.roster)));
        }

        json eval = evaluate_dir(manifest, pred_dir, fraction, eval_split, nullptr);
        write_json_file(vdir / "eval.json", eval);
        comparison[variant.dir_name] = eval["aggregate"];
        table_rows.push_back({variant.label,
                              json{{"nrmse", eval["aggregate"]["nrmse"]},
                                   {"dice", eval["aggregate"]["dice"]}}});
    }

    write_json_file(fs::path(out_dir) / "comparison_table.json", comparison);
    write_text_file(fs::path(out_dir) / "comparison_table.txt",
                    render_metrics_table(manifest.class_names, table_rows));
    std::cout << "wrote " << (fs::path(out_dir) / "comparison_table.json").string() << "\n";
    return 0;
}

}  // namespace amdiff::cli

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    using namespace amdiff;
    using namespace amdiff::cli;

    CLI::App app{"amdiff: unified denoising and lesion/organ segmentation for low-count PET"};
    app.require_subcommand(1);

    CommonOpts common;
    app.add_option("--threads", common.threads, "worker thread cap")->capture_default_str();

    auto add_common = [&](CLI::App* sub, bool with_config = true) {
        if (with_config) sub->add_option("--config", common.config_path, "experiment config JSON");
        sub->add_option("--seed", common.seed, "seed override")
            ->each([&](const std::string&) { common.seed_set = true; });
    };

    int exit_code = 0;

    // phantom
    auto* ph = app.add_subcommand("phantom", "generate a synthetic dataset");
    std::string ph_out;
    int ph_cases = 1, ph_test = 0;
    add_common(ph);
    ph->add_option("--out", ph_out, "output directory")->required();
    ph->add_option("--cases", ph_cases, "number of cases")->capture_default_str();
    ph->add_option("--test-cases", ph_test, "trailing cases marked as test split")
        ->capture_default_str();
    ph->callback([&]() { exit_code = cmd_phantom(common, ph_out, ph_cases, ph_test); });

    // train
    auto* tr = app.add_subcommand("train", "train the joint model");
    std::string tr_data, tr_out, tr_resume;
    double tr_fraction = -1.0;
    add_common(tr);
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--count-fraction", tr_fraction, "training count fraction");
    tr->add_option("--resume", tr_resume, "training state to resume from");
    tr->callback([&]() {
        exit_code = cmd_train(common, tr_data, tr_out,
                              tr_fraction > 0 ? std::optional<double>(tr_fraction) : std::nullopt,
                              tr_resume);
    });

    // denoise
    auto* dn = app.add_subcommand("denoise", "denoise a low-count volume");
    std::string dn_ckpt, dn_in, dn_out;
    add_common(dn);
    dn->add_option("--checkpoint", dn_ckpt, "model checkpoint")->required();
    dn->add_option("--input", dn_in, "low-count .pvol")->required();
    dn->add_option("--out", dn_out, "output directory")->required();
    dn->callback([&]() { exit_code = cmd_denoise(common, dn_ckpt, dn_in, dn_out); });

    // segment
    auto* sg = app.add_subcommand("segment", "segment lesions and organs");
    std::string sg_ckpt, sg_in, sg_out;
    bool sg_fast = false;
    add_common(sg);
    sg->add_option("--checkpoint", sg_ckpt, "model checkpoint")->required();
    sg->add_option("--input", sg_in, "low-count .pvol")->required();
    sg->add_option("--out", sg_out, "output directory")->required();
    sg->add_flag("--fast-seg", sg_fast, "one-step x0 estimate instead of the full chain");
    sg->callback([&]() { exit_code = cmd_segment(common, sg_ckpt, sg_in, sg_out, sg_fast); });

    // quantify
    auto* qt = app.add_subcommand("quantify", "clinical metrics from a volume and labels");
    std::string qt_in, qt_labels, qt_out;
    qt->add_option("--input", qt_in, "SUV .pvol (denoised or reference)")->required();
    qt->add_option("--labels", qt_labels, "label .pvol (predicted or ground truth)")->required();
    qt->add_option("--out", qt_out, "output report.json path")->required();
    qt->callback([&]() { exit_code = cmd_quantify(qt_in, qt_labels, qt_out); });

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "metrics tables, regression, bias summary");
    std::string ev_pred, ev_ref, ev_out, ev_pred_b, ev_split = "all";
    double ev_fraction = -1.0;
    add_common(ev);
    ev->add_option("--pred", ev_pred, "prediction directory")->required();
    ev->add_option("--ref", ev_ref, "reference dataset directory")->required();
    ev->add_option("--out", ev_out, "output JSON path")->required();
    ev->add_option("--count-fraction", ev_fraction, "fraction for the low-count baseline");
    ev->add_option("--pred-b", ev_pred_b, "second prediction directory for Wilcoxon tests");
    ev->add_option("--split", ev_split, "train|test|all")->capture_default_str();
    ev->callback([&]() {
        exit_code = cmd_evaluate(common, ev_pred, ev_ref, ev_out,
                                 ev_fraction > 0 ? std::optional<double>(ev_fraction) : std::nullopt,
                                 ev_pred_b, ev_split);
    });

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and compare the ablation variants");
    std::string ab_data, ab_out;
    double ab_fraction = -1.0;
    add_common(ab);
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--count-fraction", ab_fraction, "fraction used for training and prediction");
    ab->callback([&]() {
        exit_code = cmd_ablate(common, ab_data, ab_out,
                               ab_fraction > 0 ? std::optional<double>(ab_fraction) : std::nullopt);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return exit_code;
}
