#include "amdiff/networks.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace amdiff {

using nlohmann::json;
using nn::Graph;
using nn::Shape;
using nn::Var;

ParamArray& ModelParams::at(const std::string& name) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ConfigError("unknown parameter array: " + name);
    return it->second;
}

const ParamArray& ModelParams::at(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ConfigError("unknown parameter array: " + name);
    return it->second;
}

long long ModelParams::total_size() const {
    long long n = 0;
    for (const auto& [name, a] : arrays) n += static_cast<long long>(a.data.size());
    return n;
}

void NetworkConfig::validate() const {
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw ConfigError("time_embed_dim must be even and >= 2");
    if (ssm_state_dim < 1) throw ConfigError("ssm_state_dim must be >= 1");
    if (revision_channels < 1) throw ConfigError("revision_channels must be >= 1");
    if (num_classes < 3) throw ConfigError("num_classes must be >= 3 (background, lesion, organ)");
    if (!(suv_cutoff > 0.0)) throw ConfigError("suv_cutoff must be positive");
    if (group_size < 1) throw ConfigError("group_size must be >= 1");
}

ParamBank::ParamBank(Graph& g, const ModelParams& params, bool trainable)
    : g_(&g), params_(&params), trainable_(trainable) {}

Var ParamBank::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const ParamArray& a = params_->at(name);
    Var v = g_->leaf(a.shape, a.data, trainable_);
    bound_.emplace(name, v);
    return v;
}

void ParamBank::accumulate_grads(std::map<std::string, std::vector<double>>& grads) const {
    for (const auto& [name, var] : bound_) {
        if (!var->requires_grad || var->grad.empty()) continue;
        auto& dst = grads[name];
        if (dst.empty()) dst.assign(var->val.size(), 0.0);
        for (size_t i = 0; i < var->grad.size(); ++i) dst[i] += var->grad[i];
    }
}

// ---------------------------------------------------------------------------
// architecture helpers
// ---------------------------------------------------------------------------

namespace {

struct Ctx {
    Graph& g;
    ParamBank& pb;
    const NetworkConfig& cfg;
};

Var conv3(Ctx& c, const std::string& p, const Var& x, int stride = 1) {
    return nn::conv3d(c.g, x, c.pb(p + ".w"), c.pb(p + ".b"), stride, 1);
}

Var conv1(Ctx& c, const std::string& p, const Var& x) {
    return nn::conv3d(c.g, x, c.pb(p + ".w"), c.pb(p + ".b"), 1, 0);
}

Var gnorm(Ctx& c, const std::string& p, const Var& x) {
    return nn::group_norm(c.g, x, c.pb(p + ".g"), c.pb(p + ".b"), c.cfg.group_size);
}

/// Two-conv residual block; adds a projected time-embedding channel bias when
/// temb is non-null. 1x1 skip projection when channel counts differ.
Var res_block(Ctx& c, const std::string& p, const Var& x, int cin, int cout, const Var& temb) {
    Var h = conv3(c, p + ".conv1", x);
    h = gnorm(c, p + ".gn1", h);
    if (temb) {
        Var tb = nn::linear(c.g, temb, c.pb(p + ".temb.w"), c.pb(p + ".temb.b"));
        h = nn::add_channel_bias(c.g, h, tb);
    }
    h = nn::silu(c.g, h);
    h = conv3(c, p + ".conv2", h);
    h = gnorm(c, p + ".gn2", h);
    h = nn::silu(c.g, h);
    Var skip = cin == cout ? x : conv1(c, p + ".skip", x);
    return nn::add(c.g, h, skip);
}

Var self_attention(Ctx& c, const std::string& p, const Var& x) {
    const int C = x->shape[0];
    const long long N = static_cast<long long>(x->shape[1]) * x->shape[2] * x->shape[3];
    const Shape seq{C, static_cast<int>(N)};
    Var q = nn::reshape(c.g, conv1(c, p + ".q", x), seq);
    Var k = nn::reshape(c.g, conv1(c, p + ".k", x), seq);
    Var v = nn::reshape(c.g, conv1(c, p + ".v", x), seq);
    Var scores = nn::mul_scalar(c.g, nn::matmul(c.g, q, k, true, false),
                                1.0 / std::sqrt(static_cast<double>(C)));
    Var attn = nn::softmax_rows(c.g, scores);          // {N, N}, rows sum to 1
    Var out = nn::matmul(c.g, v, attn, false, true);   // {C, N}
    Var y = conv1(c, p + ".proj", nn::reshape(c.g, out, x->shape));
    return nn::add(c.g, x, y);
}

std::vector<double> sinusoidal_time_embedding(int t, int dim) {
    const int half = dim / 2;
    std::vector<double> e(dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        e[i] = std::sin(t * freq);
        e[half + i] = std::cos(t * freq);
    }
    return e;
}

struct LevelPlan {
    std::array<Index3, 4> dims;     // spatial dims at levels 0..3
    std::array<bool, 3> halved{};   // whether downsample k actually halved
};

/// Each downsample needs even dims (exact halving) or an already-saturated
/// 1x1x1 tensor. Mixed or odd dims cannot be mirrored by the decoder.
LevelPlan plan_levels(const Index3& patch, const char* what) {
    LevelPlan plan;
    plan.dims[0] = patch;
    for (int k = 0; k < 3; ++k) {
        const Index3& d = plan.dims[k];
        const bool all_one = d[0] == 1 && d[1] == 1 && d[2] == 1;
        if (all_one) {
            plan.dims[k + 1] = d;
            plan.halved[k] = false;
            continue;
        }
        for (int i = 0; i < 3; ++i)
            if (d[i] % 2 != 0)
                throw ConfigError(std::string(what) +
                                  ": patch dims must halve cleanly at every level; got " +
                                  std::to_string(d[i]) + " at level " + std::to_string(k));
        plan.dims[k + 1] = {d[0] / 2, d[1] / 2, d[2] / 2};
        plan.halved[k] = true;
    }
    return plan;
}

Index3 var_spatial(const Var& x) { return {x->shape[3], x->shape[2], x->shape[1]}; }

void check_volume_input(const Var& x, const char* what) {
    if (x->shape.size() != 4 || x->shape[0] != 1)
        throw ConfigError(std::string(what) + ": expected a {1, D, H, W} tensor, got " +
                          nn::shape_str(x->shape));
}

/// ResMamba: conv block, squeeze-excite channel gate, 1-voxel spatial gate,
/// diagonal state-space scan over the flattened voxel sequence, residual add.
Var res_mamba(Ctx& c, const std::string& p, const Var& x, int channels) {
    Var v = conv3(c, p + ".conv", x);
    v = gnorm(c, p + ".gn", v);
    v = nn::silu(c.g, v);
    Var se = nn::sigmoid(c.g, nn::linear(c.g, nn::global_avg_pool(c.g, v), c.pb(p + ".se.w"),
                                         c.pb(p + ".se.b")));
    v = nn::scale_channels(c.g, v, se);
    Var gate = nn::sigmoid(c.g, conv1(c, p + ".gate", v));
    v = nn::mul_spatial(c.g, v, gate);

    const long long N = static_cast<long long>(v->shape[1]) * v->shape[2] * v->shape[3];
    Var seq = nn::reshape(c.g, v, {channels, static_cast<int>(N)});
    Var a = nn::tanh(c.g, c.pb(p + ".a_raw"));
    Var y = nn::ssm_scan(c.g, seq, a, c.pb(p + ".b"), c.pb(p + ".c"), c.pb(p + ".d"));
    if (c.cfg.bidirectional_scan) {
        Var rev = nn::ssm_scan(c.g, nn::reverse_seq(c.g, seq), a, c.pb(p + ".b"),
                               c.pb(p + ".c"), c.pb(p + ".d"));
        y = nn::add(c.g, y, nn::reverse_seq(c.g, rev));
    }
    return nn::add(c.g, x, nn::reshape(c.g, y, x->shape));
}

}  // namespace

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

nn::Var denoiser_forward(Graph& g, ParamBank& pb, const Var& x_t, const Var& i_lc_norm, int t,
                         const NetworkConfig& config) {
    config.validate();
    check_volume_input(x_t, "denoiser_forward");
    check_volume_input(i_lc_norm, "denoiser_forward");
    if (!nn::same_shape(x_t->shape, i_lc_norm->shape))
        throw ConfigError("denoiser_forward: x_t and condition shapes differ");
    const LevelPlan plan = plan_levels(var_spatial(x_t), "denoiser_forward");
    const int C0 = config.base_channels, C1 = 2 * C0, C2 = 4 * C0, C3 = 8 * C0;
    Ctx c{g, pb, config};

    Var temb = g.constant({config.time_embed_dim},
                          sinusoidal_time_embedding(t, config.time_embed_dim));
    temb = nn::linear(g, temb, pb("denoiser/time.fc1.w"), pb("denoiser/time.fc1.b"));
    temb = nn::silu(g, temb);
    temb = nn::linear(g, temb, pb("denoiser/time.fc2.w"), pb("denoiser/time.fc2.b"));

    Var x = nn::concat_channels(g, x_t, i_lc_norm);
    Var e0 = res_block(c, "denoiser/enc0", conv3(c, "denoiser/in_conv", x), C0, C0, temb);
    Var e1 = res_block(c, "denoiser/res1", conv3(c, "denoiser/down1", e0, 2), C1, C1, temb);
    Var e2 = res_block(c, "denoiser/res2", conv3(c, "denoiser/down2", e1, 2), C2, C2, temb);
    Var m = res_block(c, "denoiser/res3a", conv3(c, "denoiser/down3", e2, 2), C3, C3, temb);
    if (config.attention_at_lowest) m = self_attention(c, "denoiser/attn", m);
    m = res_block(c, "denoiser/res3b", m, C3, C3, temb);

    Var u2 = plan.halved[2] ? nn::upsample_nearest2(g, m) : m;
    Var d2 = res_block(c, "denoiser/dec2",
                       nn::concat_channels(g, conv3(c, "denoiser/up2", u2), e2), 2 * C2, C2, temb);
    Var u1 = plan.halved[1] ? nn::upsample_nearest2(g, d2) : d2;
    Var d1 = res_block(c, "denoiser/dec1",
                       nn::concat_channels(g, conv3(c, "denoiser/up1", u1), e1), 2 * C1, C1, temb);
    Var u0 = plan.halved[0] ? nn::upsample_nearest2(g, d1) : d1;
    Var d0 = res_block(c, "denoiser/dec0",
                       nn::concat_channels(g, conv3(c, "denoiser/up0", u0), e0), 2 * C0, C0, temb);

    Var h = gnorm(c, "denoiser/head.gn", d0);
    h = nn::silu(g, h);
    return conv3(c, "denoiser/head", h);
}

nn::Var revision_forward(Graph& g, ParamBank& pb, const Var& p_hc_diff, const Var& i_lc_suv,
                         const NetworkConfig& config) {
    config.validate();
    check_volume_input(p_hc_diff, "revision_forward");
    check_volume_input(i_lc_suv, "revision_forward");
    if (!nn::same_shape(p_hc_diff->shape, i_lc_suv->shape))
        throw DataError("revision_forward: geometry mismatch between p_hc and i_lc");
    Ctx c{g, pb, config};
    // Back to SUV range [0, cutoff] before the conv stack.
    Var unmapped = nn::mul_scalar(
        g, nn::add_scalar(g, nn::clamp(g, p_hc_diff, -1.0, 1.0), 1.0), config.suv_cutoff / 2.0);
    Var h = nn::concat_channels(g, unmapped, i_lc_suv);
    h = nn::silu(g, conv3(c, "revision/conv1", h));
    h = nn::silu(g, conv3(c, "revision/conv2", h));
    h = conv3(c, "revision/conv3", h);  // zero-initialized: identity residual at init
    return nn::add(g, i_lc_suv, h);
}

SegLogits segmenter_forward(Graph& g, ParamBank& pb, const Var& p_hcr_suv, const Var& i_lc_suv,
                            const NetworkConfig& config) {
    config.validate();
    check_volume_input(p_hcr_suv, "segmenter_forward");
    check_volume_input(i_lc_suv, "segmenter_forward");
    if (!nn::same_shape(p_hcr_suv->shape, i_lc_suv->shape))
        throw DataError("segmenter_forward: geometry mismatch between inputs");
    const LevelPlan plan = plan_levels(var_spatial(p_hcr_suv), "segmenter_forward");
    const int C0 = config.base_channels, C1 = 2 * C0, C2 = 4 * C0, C3 = 8 * C0;
    Ctx c{g, pb, config};

    const double scale = 1.0 / config.suv_cutoff;
    Var in = nn::concat_channels(g, nn::mul_scalar(g, p_hcr_suv, scale),
                                 nn::mul_scalar(g, i_lc_suv, scale));
    Var s0 = nn::silu(g, gnorm(c, "segmenter/stem_gn", conv3(c, "segmenter/stem", in)));
    Var r1 = res_mamba(
        c, "segmenter/stage1.rm",
        nn::silu(g, gnorm(c, "segmenter/stage1.down_gn", conv3(c, "segmenter/stage1.down", s0, 2))),
        C1);
    Var r2 = res_mamba(
        c, "segmenter/stage2.rm",
        nn::silu(g, gnorm(c, "segmenter/stage2.down_gn", conv3(c, "segmenter/stage2.down", r1, 2))),
        C2);
    Var r3 = res_mamba(
        c, "segmenter/stage3.rm",
        nn::silu(g, gnorm(c, "segmenter/stage3.down_gn", conv3(c, "segmenter/stage3.down", r2, 2))),
        C3);

    auto decode = [&](const std::string& prefix, int out_channels) {
        Var x = r3;
        const Var skips[3] = {s0, r1, r2};
        const int widths[4] = {C0, C1, C2, C3};
        for (int lvl = 2; lvl >= 0; --lvl) {
            Var u = plan.halved[lvl] ? nn::upsample_nearest2(g, x) : x;
            u = conv3(c, prefix + ".up" + std::to_string(lvl), u);
            Var cat = nn::concat_channels(g, u, skips[lvl]);
            x = res_block(c, prefix + ".dec" + std::to_string(lvl), cat, 2 * widths[lvl],
                          widths[lvl], nullptr);
        }
        (void)out_channels;
        return conv1(c, prefix + ".head", x);
    };

    SegLogits out;
    out.lesion = decode("segmenter/lesion", 2);
    out.organ = decode("segmenter/organ", config.organ_channels());
    return out;
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

namespace {

struct Init {
    ModelParams p;
    Rng rng;

    void raw(const std::string& name, Shape shape, double fill) {
        ParamArray a;
        a.shape = std::move(shape);
        a.data.assign(static_cast<size_t>(nn::shape_numel(a.shape)), fill);
        p.arrays.emplace(name, std::move(a));
    }
    void gauss(const std::string& name, Shape shape, double std) {
        ParamArray a;
        a.shape = std::move(shape);
        a.data.resize(static_cast<size_t>(nn::shape_numel(a.shape)));
        for (auto& v : a.data) v = std * rng.normal();
        p.arrays.emplace(name, std::move(a));
    }
    void conv(const std::string& name, int cout, int cin, int k, bool zero = false) {
        const double std = zero ? 0.0 : std::sqrt(2.0 / (cin * k * k * k));
        gauss(name + ".w", {cout, cin, k, k, k}, std);
        raw(name + ".b", {cout}, 0.0);
    }
    void lin(const std::string& name, int m, int n, bool zero = false) {
        gauss(name + ".w", {m, n}, zero ? 0.0 : std::sqrt(2.0 / n));
        raw(name + ".b", {m}, 0.0);
    }
    void gn(const std::string& name, int c) {
        raw(name + ".g", {c}, 1.0);
        raw(name + ".b", {c}, 0.0);
    }
    void res_block(const std::string& p_, int cin, int cout, int temb_dim) {
        conv(p_ + ".conv1", cout, cin, 3);
        gn(p_ + ".gn1", cout);
        if (temb_dim > 0) lin(p_ + ".temb", cout, temb_dim);
        conv(p_ + ".conv2", cout, cout, 3);
        gn(p_ + ".gn2", cout);
        if (cin != cout) conv(p_ + ".skip", cout, cin, 1);
    }
    void res_mamba(const std::string& p_, int channels, int state_dim) {
        conv(p_ + ".conv", channels, channels, 3);
        gn(p_ + ".gn", channels);
        lin(p_ + ".se", channels, channels);
        conv(p_ + ".gate", 1, channels, 1);
        raw(p_ + ".a_raw", {channels, state_dim}, std::atanh(0.5));
        gauss(p_ + ".b", {channels, state_dim}, 0.1);
        gauss(p_ + ".c", {channels, state_dim}, 0.1);
        raw(p_ + ".d", {channels}, 0.0);
    }
};

}  // namespace

ModelParams init_params(const NetworkConfig& config, uint64_t seed) {
    config.validate();
    Init b;
    b.rng = Rng(seed).derive(0x696e6974ULL);
    b.p.init_seed = seed;
    const int C0 = config.base_channels, C1 = 2 * C0, C2 = 4 * C0, C3 = 8 * C0;
    const int E = config.time_embed_dim;

    // denoiser
    b.conv("denoiser/in_conv", C0, 2, 3);
    b.lin("denoiser/time.fc1", E, E);
    b.lin("denoiser/time.fc2", E, E);
    b.res_block("denoiser/enc0", C0, C0, E);
    b.conv("denoiser/down1", C1, C0, 3);
    b.res_block("denoiser/res1", C1, C1, E);
    b.conv("denoiser/down2", C2, C1, 3);
    b.res_block("denoiser/res2", C2, C2, E);
    b.conv("denoiser/down3", C3, C2, 3);
    b.res_block("denoiser/res3a", C3, C3, E);
    if (config.attention_at_lowest) {
        b.conv("denoiser/attn.q", C3, C3, 1);
        b.conv("denoiser/attn.k", C3, C3, 1);
        b.conv("denoiser/attn.v", C3, C3, 1);
        b.conv("denoiser/attn.proj", C3, C3, 1, /*zero=*/true);
    }
    b.res_block("denoiser/res3b", C3, C3, E);
    b.conv("denoiser/up2", C2, C3, 3);
    b.res_block("denoiser/dec2", 2 * C2, C2, E);
    b.conv("denoiser/up1", C1, C2, 3);
    b.res_block("denoiser/dec1", 2 * C1, C1, E);
    b.conv("denoiser/up0", C0, C1, 3);
    b.res_block("denoiser/dec0", 2 * C0, C0, E);
    b.gn("denoiser/head.gn", C0);
    b.conv("denoiser/head", 1, C0, 3);

    // revision (final conv zeroed so p_hcr == i_lc at init)
    const int Cr = config.revision_channels;
    b.conv("revision/conv1", Cr, 2, 3);
    b.conv("revision/conv2", Cr, Cr, 3);
    b.conv("revision/conv3", 1, Cr, 3, /*zero=*/true);

    // segmenter
    b.conv("segmenter/stem", C0, 2, 3);
    b.gn("segmenter/stem_gn", C0);
    const int widths[4] = {C0, C1, C2, C3};
    for (int k = 1; k <= 3; ++k) {
        const std::string st = "segmenter/stage" + std::to_string(k);
        b.conv(st + ".down", widths[k], widths[k - 1], 3);
        b.gn(st + ".down_gn", widths[k]);
        b.res_mamba(st + ".rm", widths[k], config.ssm_state_dim);
    }
    for (const std::string branch : {"segmenter/lesion", "segmenter/organ"}) {
        for (int lvl = 2; lvl >= 0; --lvl) {
            b.conv(branch + ".up" + std::to_string(lvl), widths[lvl], widths[lvl + 1], 3);
            b.res_block(branch + ".dec" + std::to_string(lvl), 2 * widths[lvl], widths[lvl], 0);
        }
    }
    b.conv("segmenter/lesion.head", 2, C0, 1);
    b.conv("segmenter/organ.head", config.organ_channels(), C0, 1);

    return std::move(b.p);
}

// ---------------------------------------------------------------------------
// forward-only wrappers
// ---------------------------------------------------------------------------

namespace {

Shape patch_shape(const Index3& patch) { return {1, patch[2], patch[1], patch[0]}; }

}  // namespace

std::vector<double> run_denoiser(const ModelParams& params, const NetworkConfig& config,
                                 const std::vector<double>& x_t, const std::vector<double>& cond,
                                 int t, const Index3& patch) {
    Graph g(false);
    ParamBank pb(g, params, false);
    Var a = g.leaf(patch_shape(patch), x_t, false);
    Var b = g.leaf(patch_shape(patch), cond, false);
    return denoiser_forward(g, pb, a, b, t, config)->val;
}

std::vector<double> run_revision(const ModelParams& params, const NetworkConfig& config,
                                 const std::vector<double>& p_hc_diff,
                                 const std::vector<double>& i_lc_suv, const Index3& patch) {
    Graph g(false);
    ParamBank pb(g, params, false);
    Var a = g.leaf(patch_shape(patch), p_hc_diff, false);
    Var b = g.leaf(patch_shape(patch), i_lc_suv, false);
    return revision_forward(g, pb, a, b, config)->val;
}

SegProbs run_segmenter(const ModelParams& params, const NetworkConfig& config,
                       const std::vector<double>& p_hcr_suv, const std::vector<double>& i_lc_suv,
                       const Index3& patch) {
    Graph g(false);
    ParamBank pb(g, params, false);
    Var a = g.leaf(patch_shape(patch), p_hcr_suv, false);
    Var b = g.leaf(patch_shape(patch), i_lc_suv, false);
    SegLogits logits = segmenter_forward(g, pb, a, b, config);
    SegProbs out;
    out.lesion = nn::softmax_channels(g, logits.lesion)->val;
    out.organ = nn::softmax_channels(g, logits.organ)->val;
    return out;
}

// ---------------------------------------------------------------------------
// parameter container I/O
// ---------------------------------------------------------------------------

namespace {
constexpr char kParamMagic[] = "APCK1\n";
}

void save_param_container(const std::filesystem::path& path, const ModelParams& params,
                          const json& meta, const std::string& kind) {
    json header;
    header["version"] = 1;
    header["kind"] = kind;
    header["init_seed"] = params.init_seed;
    header["meta"] = meta;
    json arr = json::array();
    for (const auto& [name, a] : params.arrays) {  // map order: sorted, deterministic
        json e;
        e["name"] = name;
        e["shape"] = a.shape;
        arr.push_back(e);
    }
    header["arrays"] = arr;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(kParamMagic, 6);
    const std::string head = header.dump();
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.put('\n');
    out.put('\0');
    for (const auto& [name, a] : params.arrays)
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (!out) throw DataError("write failed: " + path.string());
}

LoadedContainer load_param_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    char magic[6];
    in.read(magic, 6);
    if (in.gcount() != 6 || std::memcmp(magic, kParamMagic, 6) != 0)
        throw DataError(path.string() + ": bad magic, not a parameter container");
    std::string head;
    if (!std::getline(in, head)) throw DataError(path.string() + ": missing header line");
    if (in.get() != 0) throw DataError(path.string() + ": missing 0x00 separator");
    json header;
    try {
        header = json::parse(head);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": header is not valid JSON (" + e.what() + ")");
    }
    if (header.value("version", 0) != 1)
        throw DataError(path.string() + ": unsupported container version");

    LoadedContainer lc;
    lc.kind = header.value("kind", "");
    lc.meta = header.value("meta", json::object());
    lc.params.init_seed = header.value("init_seed", 0ULL);
    for (const auto& e : header["arrays"]) {
        ParamArray a;
        a.shape = e["shape"].get<std::vector<int>>();
        const size_t n = static_cast<size_t>(nn::shape_numel(a.shape));
        a.data.resize(n);
        in.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (static_cast<size_t>(in.gcount()) != n * sizeof(double))
            throw DataError(path.string() + ": truncated payload for array " +
                            e["name"].get<std::string>());
        lc.params.arrays.emplace(e["name"].get<std::string>(), std::move(a));
    }
    if (in.peek() != EOF) throw DataError(path.string() + ": trailing bytes after payload");
    return lc;
}

json network_config_to_json(const NetworkConfig& c) {
    json j;
    j["base_channels"] = c.base_channels;
    j["time_embed_dim"] = c.time_embed_dim;
    j["ssm_state_dim"] = c.ssm_state_dim;
    j["attention_at_lowest"] = c.attention_at_lowest;
    j["bidirectional_scan"] = c.bidirectional_scan;
    j["revision_channels"] = c.revision_channels;
    j["num_classes"] = c.num_classes;
    j["suv_cutoff"] = c.suv_cutoff;
    j["group_size"] = c.group_size;
    return j;
}

NetworkConfig network_config_from_json(const json& j) {
    NetworkConfig c;
    c.base_channels = j.value("base_channels", c.base_channels);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.ssm_state_dim = j.value("ssm_state_dim", c.ssm_state_dim);
    c.attention_at_lowest = j.value("attention_at_lowest", c.attention_at_lowest);
    c.bidirectional_scan = j.value("bidirectional_scan", c.bidirectional_scan);
    c.revision_channels = j.value("revision_channels", c.revision_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.suv_cutoff = j.value("suv_cutoff", c.suv_cutoff);
    c.group_size = j.value("group_size", c.group_size);
    c.validate();
    return c;
}

}  // namespace amdiff
