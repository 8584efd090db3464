#include "amdiff/losses.hpp"

#include <algorithm>
#include <cmath>

namespace amdiff {

using nn::Graph;
using nn::Var;

namespace {

constexpr double kProbClamp = 1e-7;
constexpr double kDiceEps = 1e-7;
constexpr double kFocalExponent = 4.0 / 3.0;

void check_lengths(size_t a, size_t b, const char* what) {
    if (a != b)
        throw DataError(std::string(what) + ": operand lengths differ (" + std::to_string(a) +
                        " vs " + std::to_string(b) + ")");
}

}  // namespace

ClassWeights ClassWeights::defaults(int num_classes) {
    ClassWeights cw;
    cw.w.assign(static_cast<size_t>(num_classes), 1.0);
    cw.w[0] = 0.1;
    if (num_classes > 1) cw.w[1] = 4.0;
    return cw;
}

void ClassWeights::validate(int num_classes) const {
    if (static_cast<int>(w.size()) != num_classes)
        throw ConfigError("class weights must have one entry per class (got " +
                          std::to_string(w.size()) + ", need " + std::to_string(num_classes) +
                          ")");
    bool any_positive = false;
    for (double v : w) {
        if (v < 0.0) throw ConfigError("class weights must be non-negative");
        if (v > 0.0) any_positive = true;
    }
    if (!any_positive) throw ConfigError("at least one class weight must be positive");
}

// ---------------------------------------------------------------------------
// plain evaluations
// ---------------------------------------------------------------------------

double diff_loss(std::span<const double> eps_hat, std::span<const double> eps) {
    check_lengths(eps_hat.size(), eps.size(), "diff_loss");
    double s = 0.0;
    for (size_t i = 0; i < eps.size(); ++i) s += std::fabs(eps_hat[i] - eps[i]);
    return s / static_cast<double>(eps.size());
}

double masked_l1(std::span<const double> pred, std::span<const double> ref,
                 std::span<const double> mask) {
    check_lengths(pred.size(), ref.size(), "masked_l1");
    check_lengths(pred.size(), mask.size(), "masked_l1");
    double s = 0.0, m = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        s += mask[i] * std::fabs(pred[i] - ref[i]);
        m += mask[i];
    }
    return s / std::max(m, 1.0);
}

namespace {

double class_weighted_l1(const Volume3D& pred, const Volume3D& ref, const LabelVolume& labels,
                         const ClassWeights& weights, int s_begin) {
    require_same_geometry(pred, labels, "class-weighted L1");
    require_same_geometry(ref, labels, "class-weighted L1");
    weights.validate(labels.num_classes);
    double total = 0.0;
    for (int s = s_begin; s < labels.num_classes; ++s) {
        if (weights.w[s] == 0.0) continue;
        double acc = 0.0, cnt = 0.0;
        for (size_t i = 0; i < labels.data.size(); ++i) {
            if (labels.data[i] != s) continue;
            acc += std::fabs(static_cast<double>(pred.data[i]) - ref.data[i]);
            cnt += 1.0;
        }
        total += weights.w[s] * (acc / std::max(cnt, 1.0));
    }
    return total;
}

}  // namespace

double lor_loss(const Volume3D& pred_suv, const Volume3D& ref_suv, const LabelVolume& labels,
                const ClassWeights& weights) {
    return class_weighted_l1(pred_suv, ref_suv, labels, weights, 1);
}

double rev_loss(const Volume3D& pred_suv, const Volume3D& ref_suv, const LabelVolume& labels,
                const ClassWeights& weights) {
    return class_weighted_l1(pred_suv, ref_suv, labels, weights, 0);
}

namespace {

struct ClassTerms {
    double ce = 0.0;
    double fd = 0.0;
};

/// CE_s and focal-Dice terms for one class given its per-voxel probability.
ClassTerms class_terms(const double* prob, const uint8_t* labels, size_t n, int s) {
    double ce = 0.0;
    double num = 0.0, den_p = 0.0, den_m = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double p = std::clamp(prob[i], kProbClamp, 1.0 - kProbClamp);
        const double m = labels[i] == s ? 1.0 : 0.0;
        ce -= m * std::log(p) + (1.0 - m) * std::log(1.0 - p);
        num += p * m;
        den_p += p * p;
        den_m += m;  // m^2 == m for a binary mask
    }
    ClassTerms t;
    t.ce = ce / static_cast<double>(n);
    const double dc = std::max(0.0, 1.0 - 2.0 * num / (den_p + den_m + kDiceEps));
    t.fd = std::pow(dc, kFocalExponent);
    return t;
}

}  // namespace

double seg_loss(std::span<const double> lesion_probs, std::span<const double> organ_probs,
                const LabelVolume& labels, const ClassWeights& weights) {
    weights.validate(labels.num_classes);
    const size_t n = labels.data.size();
    const int S = labels.num_classes - 1;
    check_lengths(lesion_probs.size(), 2 * n, "seg_loss lesion head");
    check_lengths(organ_probs.size(), static_cast<size_t>(S) * n, "seg_loss organ head");

    double total = 0.0;
    for (int s = 1; s <= S; ++s) {
        // Lesion comes from the lesion head; organs from organ-head channel s-1.
        const double* prob =
            s == 1 ? lesion_probs.data() + n : organ_probs.data() + static_cast<size_t>(s - 1) * n;
        const ClassTerms t = class_terms(prob, labels.data.data(), n, s);
        total += weights.w[s] * (t.ce + t.fd);
    }
    return total / static_cast<double>(S);
}

double warmup_weight(int e, int e_max) {
    if (e_max < 1) throw ConfigError("warmup_weight: e_max must be >= 1");
    if (e < 0 || e > e_max) throw ConfigError("warmup_weight: e must lie in [0, e_max]");
    const double u = 1.0 - static_cast<double>(e) / e_max;
    return std::exp(-5.0 * u * u);
}

LossReport total_loss(double diff, double lor, double rev, double seg, double lambda_warm) {
    for (double v : {diff, lor, rev, seg, lambda_warm})
        if (!std::isfinite(v)) throw NumericError("total_loss: non-finite loss component");
    LossReport r;
    r.diff = diff;
    r.lor = lor;
    r.rev = rev;
    r.seg = seg;
    r.lambda_warm = lambda_warm;
    r.total = diff + lambda_warm * (lor + rev + seg);
    return r;
}

// ---------------------------------------------------------------------------
// tape builders
// ---------------------------------------------------------------------------

Var diff_loss_node(Graph& g, const Var& eps_hat, const Var& eps) {
    return nn::mean_all(g, nn::abs(g, nn::sub(g, eps_hat, eps)));
}

Var masked_l1_node(Graph& g, const Var& pred, const Var& ref, const Var& mask) {
    double msum = 0.0;
    for (double v : mask->val) msum += v;
    Var diff = nn::abs(g, nn::sub(g, pred, ref));
    return nn::mul_scalar(g, nn::sum_all(g, nn::mul(g, diff, mask)), 1.0 / std::max(msum, 1.0));
}

namespace {

Var class_weighted_l1_node(Graph& g, const Var& pred, const std::vector<float>& ref,
                           const LabelVolume& labels, const ClassWeights& weights, int s_begin) {
    weights.validate(labels.num_classes);
    if (static_cast<long long>(ref.size()) != pred->numel() ||
        static_cast<long long>(labels.data.size()) != pred->numel())
        throw DataError("class-weighted L1 node: geometry mismatch");
    Var ref_c = g.constant(pred->shape, std::vector<double>(ref.begin(), ref.end()));
    Var total = g.scalar(0.0);
    for (int s = s_begin; s < labels.num_classes; ++s) {
        if (weights.w[s] == 0.0) continue;
        std::vector<double> mask(labels.data.size());
        for (size_t i = 0; i < mask.size(); ++i) mask[i] = labels.data[i] == s ? 1.0 : 0.0;
        Var term = masked_l1_node(g, pred, ref_c, g.constant(pred->shape, std::move(mask)));
        total = nn::add(g, total, nn::mul_scalar(g, term, weights.w[s]));
    }
    return total;
}

}  // namespace

Var lor_loss_node(Graph& g, const Var& pred_suv, const std::vector<float>& ref_suv,
                  const LabelVolume& labels, const ClassWeights& weights) {
    return class_weighted_l1_node(g, pred_suv, ref_suv, labels, weights, 1);
}

Var rev_loss_node(Graph& g, const Var& pred_suv, const std::vector<float>& ref_suv,
                  const LabelVolume& labels, const ClassWeights& weights) {
    return class_weighted_l1_node(g, pred_suv, ref_suv, labels, weights, 0);
}

Var seg_loss_node(Graph& g, const Var& lesion_probs, const Var& organ_probs,
                  const LabelVolume& labels, const ClassWeights& weights) {
    weights.validate(labels.num_classes);
    const long long n = numel(labels.dims);
    const int S = labels.num_classes - 1;
    if (lesion_probs->shape[0] != 2 || organ_probs->shape[0] != S)
        throw ConfigError("seg_loss_node: head channel counts do not match the class roster");
    if (lesion_probs->numel() != 2 * n || organ_probs->numel() != static_cast<long long>(S) * n)
        throw DataError("seg_loss_node: geometry mismatch");

    Var total = g.scalar(0.0);
    for (int s = 1; s <= S; ++s) {
        if (weights.w[s] == 0.0) continue;
        Var p = s == 1 ? nn::slice_channels(g, lesion_probs, 1, 2)
                       : nn::slice_channels(g, organ_probs, s - 1, s);
        p = nn::clamp(g, p, kProbClamp, 1.0 - kProbClamp);

        std::vector<double> mask(static_cast<size_t>(n)), inv(static_cast<size_t>(n));
        double msum = 0.0;
        for (long long i = 0; i < n; ++i) {
            const double m = labels.data[i] == s ? 1.0 : 0.0;
            mask[i] = m;
            inv[i] = 1.0 - m;
            msum += m;
        }
        Var mask_c = g.constant(p->shape, std::move(mask));
        Var inv_c = g.constant(p->shape, std::move(inv));

        Var log_p = nn::log(g, p);
        Var log_1p = nn::log(g, nn::add_scalar(g, nn::neg(g, p), 1.0));
        Var ce = nn::neg(g, nn::mean_all(g, nn::add(g, nn::mul(g, mask_c, log_p),
                                                    nn::mul(g, inv_c, log_1p))));

        Var num = nn::sum_all(g, nn::mul(g, p, mask_c));
        Var den = nn::add_scalar(g, nn::sum_all(g, nn::mul(g, p, p)), msum + kDiceEps);
        Var dc = nn::add_scalar(g, nn::mul_scalar(g, nn::div(g, num, den), -2.0), 1.0);
        // Clamp shields the fractional power from negative float residue; the
        // exact value is always in [0, 1].
        Var fd = nn::pow_const(g, nn::clamp(g, dc, 0.0, 1.5), kFocalExponent);

        total = nn::add(g, total, nn::mul_scalar(g, nn::add(g, ce, fd), weights.w[s]));
    }
    return nn::mul_scalar(g, total, 1.0 / static_cast<double>(S));
}

}  // namespace amdiff
