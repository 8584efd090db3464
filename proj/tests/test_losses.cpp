#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "amdiff/losses.hpp"
#include "test_util.hpp"

using namespace amdiff;
using test::central_diff;
using test::random_vec;
using test::rel_err;

namespace {

LabelVolume make_labels(Index3 dims, int num_classes, const std::vector<uint8_t>& data) {
    LabelVolume l(dims, {2, 2, 2}, num_classes);
    l.data = data;
    return l;
}

Volume3D make_suv(Index3 dims, const std::vector<float>& data) {
    Volume3D v(dims, {2, 2, 2});
    v.data = data;
    return v;
}

}  // namespace

TEST_CASE("diff_loss is the elementwise mean absolute error") {
    std::vector<double> a = {1, 2, 3, 4};
    CHECK(diff_loss(a, a) == 0.0);
    std::vector<double> b = {1.5, 2.5, 3.5, 4.5};
    CHECK(diff_loss(b, a) == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(1);
    std::vector<double> x = random_vec(rng, 100), y = random_vec(rng, 100);
    double brute = 0;
    for (int i = 0; i < 100; ++i) brute += std::fabs(x[i] - y[i]);
    brute /= 100;
    CHECK(rel_err(diff_loss(x, y), brute) < 1e-7);
}

TEST_CASE("masked_l1 conventions") {
    std::vector<double> pred = {1, 1, 0, 0}, ref = {0, 0, 0, 0};
    std::vector<double> empty(4, 0.0), full(4, 1.0);
    CHECK(masked_l1(pred, ref, empty) == 0.0);  // degenerate guard
    CHECK(masked_l1(pred, ref, full) == doctest::Approx(0.5));

    std::vector<double> p2 = {1, 1, 0, 0}, r2 = {0, 0, 0, 0}, m4 = {1, 1, 1, 1};
    CHECK(masked_l1(p2, r2, m4) == doctest::Approx(0.5));  // diffs [1,1,0,0] over 4 voxels

    Rng rng(2);
    std::vector<double> x = random_vec(rng, 50), y = random_vec(rng, 50);
    double brute = 0;
    for (int i = 0; i < 50; ++i) brute += std::fabs(x[i] - y[i]);
    CHECK(rel_err(masked_l1(x, y, std::vector<double>(50, 1.0)), brute / 50) < 1e-12);
}

TEST_CASE("lor_loss weights masked errors over classes 1..S") {
    // half the volume is class 1 with diff 1, weight 2 -> loss 2
    const Index3 dims = {4, 1, 1};
    LabelVolume labels = make_labels(dims, 2, {1, 1, 0, 0});
    Volume3D ref = make_suv(dims, {5, 5, 5, 5});
    Volume3D pred = make_suv(dims, {6, 6, 5, 5});
    ClassWeights w;
    w.w = {0.5, 2.0};
    CHECK(lor_loss(pred, ref, labels, w) == doctest::Approx(2.0));
    CHECK(lor_loss(ref, ref, labels, w) == 0.0);
}

TEST_CASE("lor_loss matches per-class brute force at S = 3") {
    Rng rng(3);
    const Index3 dims = {4, 3, 2};
    const int n = 24;
    std::vector<uint8_t> ldata(n);
    std::vector<float> p(n), r(n);
    for (int i = 0; i < n; ++i) {
        ldata[i] = uint8_t(rng.below(4));
        p[i] = float(rng.uniform(0, 10));
        r[i] = float(rng.uniform(0, 10));
    }
    LabelVolume labels = make_labels(dims, 4, ldata);
    Volume3D pred = make_suv(dims, p), ref = make_suv(dims, r);
    ClassWeights w;
    w.w = {0.1, 4.0, 1.0, 0.7};

    double brute = 0;
    for (int s = 1; s <= 3; ++s) {
        double acc = 0, cnt = 0;
        for (int i = 0; i < n; ++i)
            if (ldata[i] == s) {
                acc += std::fabs(double(p[i]) - r[i]);
                cnt += 1;
            }
        brute += w.w[s] * (acc / std::max(cnt, 1.0));
    }
    CHECK(rel_err(lor_loss(pred, ref, labels, w), brute) < 1e-7);
}

TEST_CASE("rev_loss includes the background and decomposes into lor_loss") {
    Rng rng(4);
    const Index3 dims = {4, 2, 2};
    const int n = 16;
    std::vector<uint8_t> ldata(n);
    std::vector<float> p(n), r(n);
    for (int i = 0; i < n; ++i) {
        ldata[i] = uint8_t(rng.below(3));
        p[i] = float(rng.uniform(0, 10));
        r[i] = float(rng.uniform(0, 10));
    }
    LabelVolume labels = make_labels(dims, 3, ldata);
    Volume3D pred = make_suv(dims, p), ref = make_suv(dims, r);
    ClassWeights w;
    w.w = {0.3, 2.0, 1.0};

    CHECK(rev_loss(ref, ref, labels, w) == 0.0);

    // rev_loss - w0 * masked_l1(background) == lor_loss
    std::vector<double> pd(p.begin(), p.end()), rd(r.begin(), r.end()), m0(n);
    for (int i = 0; i < n; ++i) m0[i] = ldata[i] == 0 ? 1.0 : 0.0;
    const double decomposed = rev_loss(pred, ref, labels, w) - w.w[0] * masked_l1(pd, rd, m0);
    CHECK(rel_err(decomposed, lor_loss(pred, ref, labels, w)) < 1e-12);

    // difference confined to background with w0 = 0 -> 0
    Volume3D pred_bg = ref;
    for (int i = 0; i < n; ++i)
        if (ldata[i] == 0) pred_bg.data[i] += 3.0f;
    ClassWeights w0 = w;
    w0.w[0] = 0.0;
    CHECK(rev_loss(pred_bg, ref, labels, w0) == 0.0);
}

TEST_CASE("seg_loss limiting cases") {
    const Index3 dims = {2, 2, 2};
    const int n = 8;
    // classes: 0 background, 1 lesion, 2 one organ
    std::vector<uint8_t> ldata = {0, 1, 1, 0, 2, 2, 0, 0};
    LabelVolume labels = make_labels(dims, 3, ldata);
    ClassWeights w;
    w.w = {0.1, 1.0, 1.0};

    SUBCASE("perfect one-hot prediction drives the loss to zero") {
        std::vector<double> lesion(2 * n), organ(2 * n);
        for (int i = 0; i < n; ++i) {
            const bool is_lesion = ldata[i] == 1;
            lesion[i] = is_lesion ? 1e-9 : 1.0 - 1e-9;
            lesion[n + i] = is_lesion ? 1.0 - 1e-9 : 1e-9;
            const bool is_organ = ldata[i] == 2;
            organ[i] = is_organ ? 1e-9 : 1.0 - 1e-9;
            organ[n + i] = is_organ ? 1.0 - 1e-9 : 1e-9;
        }
        CHECK(seg_loss(lesion, organ, labels, w) < 1e-5);
    }

    SUBCASE("class absent from prediction and labels contributes FD = 1") {
        // no voxel labeled 2 and organ head never predicts it
        std::vector<uint8_t> no_organ = {0, 1, 1, 0, 0, 0, 0, 0};
        LabelVolume l2 = make_labels(dims, 3, no_organ);
        std::vector<double> lesion(2 * n), organ(2 * n);
        for (int i = 0; i < n; ++i) {
            const bool is_lesion = no_organ[i] == 1;
            lesion[i] = is_lesion ? 1e-9 : 1.0 - 1e-9;
            lesion[n + i] = is_lesion ? 1.0 - 1e-9 : 1e-9;
            organ[i] = 1.0 - 1e-9;  // all mass on background channel
            organ[n + i] = 1e-9;
        }
        // lesion class is near-perfect (~0); organ class contributes ~w*(CE + 1)
        const double loss = seg_loss(lesion, organ, l2, w);
        const double expected_organ_fd = 1.0;
        CHECK(loss == doctest::Approx(w.w[2] * expected_organ_fd / 2.0).epsilon(1e-3));
    }
}

namespace {

/// Direct transliteration of the seg loss formula for the oracle test.
double seg_loss_oracle(const std::vector<double>& lesion, const std::vector<double>& organ,
                       const LabelVolume& labels, const ClassWeights& w) {
    const int n = int(labels.data.size());
    const int S = labels.num_classes - 1;
    double total = 0;
    for (int s = 1; s <= S; ++s) {
        const double* prob = s == 1 ? lesion.data() + n : organ.data() + (s - 1) * size_t(n);
        double ce = 0, num = 0, den_p = 0, den_m = 0;
        for (int i = 0; i < n; ++i) {
            const double p = std::clamp(prob[i], 1e-7, 1.0 - 1e-7);
            const double m = labels.data[i] == s ? 1.0 : 0.0;
            ce -= m * std::log(p) + (1 - m) * std::log(1 - p);
            num += p * m;
            den_p += p * p;
            den_m += m * m;
        }
        const double dc = 1.0 - 2.0 * num / (den_p + den_m + 1e-7);
        total += w.w[s] * (ce / n + std::pow(std::max(dc, 0.0), 4.0 / 3.0));
    }
    return total / S;
}

}  // namespace

TEST_CASE("seg_loss matches a direct formula transliteration on random 2^3 cases") {
    Rng rng(5);
    const Index3 dims = {2, 2, 2};
    const int n = 8;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<uint8_t> ldata(n);
        for (auto& v : ldata) v = uint8_t(rng.below(3));
        LabelVolume labels = make_labels(dims, 3, ldata);  // S = 2
        std::vector<double> lesion(2 * n), organ(2 * n);
        for (int i = 0; i < n; ++i) {
            const double a = rng.uniform(0.01, 0.99);
            lesion[i] = 1 - a;
            lesion[n + i] = a;
            const double b = rng.uniform(0.01, 0.99);
            organ[i] = 1 - b;
            organ[n + i] = b;
        }
        ClassWeights w;
        w.w = {0.1, 4.0, 1.0};
        CHECK(std::fabs(seg_loss(lesion, organ, labels, w) -
                        seg_loss_oracle(lesion, organ, labels, w)) < 1e-6);
    }
}

TEST_CASE("warmup weight endpoints and monotonicity") {
    CHECK(warmup_weight(10, 10) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(warmup_weight(0, 10) == doctest::Approx(std::exp(-5.0)).epsilon(1e-12));
    CHECK(warmup_weight(5, 10) == doctest::Approx(std::exp(-1.25)).epsilon(1e-12));
    double prev = -1;
    for (int e = 0; e <= 20; ++e) {
        const double w = warmup_weight(e, 20);
        CHECK(w > prev);  // strictly increasing
        prev = w;
    }
    CHECK_THROWS_AS(warmup_weight(-1, 10), ConfigError);
    CHECK_THROWS_AS(warmup_weight(11, 10), ConfigError);
    CHECK_THROWS_AS(warmup_weight(0, 0), ConfigError);
}

TEST_CASE("total_loss composition identity") {
    LossReport r0 = total_loss(0.7, 1.0, 2.0, 3.0, 0.0);
    CHECK(r0.total == 0.7);
    LossReport r1 = total_loss(1.0, 1.0, 1.0, 1.0, 1.0);
    CHECK(r1.total == doctest::Approx(4.0).epsilon(1e-15));

    Rng rng(6);
    for (int i = 0; i < 20; ++i) {
        const double d = rng.uniform(0, 2), l = rng.uniform(0, 2), v = rng.uniform(0, 2),
                     s = rng.uniform(0, 2), lam = rng.uniform(0, 1);
        LossReport r = total_loss(d, l, v, s, lam);
        CHECK(std::fabs(r.total - (r.diff + r.lambda_warm * (r.lor + r.rev + r.seg))) < 1e-12);
    }
    CHECK_THROWS_AS(total_loss(std::nan(""), 0, 0, 0, 0.5), NumericError);
}

// ---------------------------------------------------------------------------
// tape builders: value equality with the plain forms plus FD gradients
// ---------------------------------------------------------------------------

TEST_CASE("tape losses equal their plain evaluations") {
    Rng rng(7);
    const Index3 dims = {2, 2, 2};
    const int n = 8;
    std::vector<uint8_t> ldata(n);
    for (auto& v : ldata) v = uint8_t(rng.below(3));
    LabelVolume labels = make_labels(dims, 3, ldata);
    ClassWeights w;
    w.w = {0.2, 3.0, 1.0};
    std::vector<float> ref(n);
    for (auto& v : ref) v = float(rng.uniform(0, 10));
    std::vector<double> pred = random_vec(rng, n, 3.0);
    for (auto& v : pred) v = std::fabs(v);

    nn::Graph g(true);
    nn::Var pv = g.leaf({1, 2, 2, 2}, pred, true);
    Volume3D pred_vol = make_suv(dims, std::vector<float>(pred.begin(), pred.end()));
    Volume3D ref_vol = make_suv(dims, ref);
    CHECK(rel_err(lor_loss_node(g, pv, ref, labels, w)->val[0],
                  lor_loss(pred_vol, ref_vol, labels, w)) < 1e-6);
    CHECK(rel_err(rev_loss_node(g, pv, ref, labels, w)->val[0],
                  rev_loss(pred_vol, ref_vol, labels, w)) < 1e-6);
}

TEST_CASE("loss gradients match central finite differences") {
    Rng rng(8);
    const Index3 dims = {2, 2, 2};
    const int n = 8;
    std::vector<uint8_t> ldata = {0, 1, 2, 0, 1, 2, 0, 0};
    LabelVolume labels = make_labels(dims, 3, ldata);
    ClassWeights w;
    w.w = {0.2, 3.0, 1.0};

    SUBCASE("diff_loss") {
        std::vector<double> a = random_vec(rng, n), b = random_vec(rng, n);
        nn::Graph g(true);
        nn::Var av = g.leaf({1, 2, 2, 2}, a, true);
        nn::Var loss = diff_loss_node(g, av, g.constant({1, 2, 2, 2}, b));
        g.backward(loss);
        auto eval = [&]() { return diff_loss(a, b); };
        for (int i = 0; i < n; ++i)
            CHECK(rel_err(central_diff(eval, &a[i]), av->grad[i]) < 1e-3);
    }

    SUBCASE("lor and rev loss nodes") {
        std::vector<float> ref(n);
        for (auto& v : ref) v = float(rng.uniform(0, 10));
        std::vector<double> pred(n);
        for (auto& v : pred) v = rng.uniform(0, 10);

        for (bool use_rev : {false, true}) {
            nn::Graph g(true);
            nn::Var pv = g.leaf({1, 2, 2, 2}, pred, true);
            nn::Var loss = use_rev ? rev_loss_node(g, pv, ref, labels, w)
                                   : lor_loss_node(g, pv, ref, labels, w);
            g.backward(loss);
            // float64 transliteration (Volume3D storage is f32, too coarse for FD)
            auto eval = [&]() {
                double total = 0;
                for (int s = use_rev ? 0 : 1; s < 3; ++s) {
                    double acc = 0, cnt = 0;
                    for (int i = 0; i < n; ++i)
                        if (ldata[i] == s) {
                            acc += std::fabs(pred[i] - double(ref[i]));
                            cnt += 1;
                        }
                    total += w.w[s] * (acc / std::max(cnt, 1.0));
                }
                return total;
            };
            for (int i = 0; i < n; ++i) {
                const double an = pv->grad.empty() ? 0.0 : pv->grad[i];
                const double fd = central_diff(eval, &pred[i]);
                if (std::fabs(fd) < 1e-10 && std::fabs(an) < 1e-10) continue;
                CHECK(rel_err(fd, an) < 1e-3);
            }
        }
    }

    SUBCASE("seg loss through the softmax heads") {
        std::vector<double> lesion_logits = random_vec(rng, 2 * n);
        std::vector<double> organ_logits = random_vec(rng, 2 * n);
        nn::Graph g(true);
        nn::Var ll = g.leaf({2, 2, 2, 2}, lesion_logits, true);
        nn::Var ol = g.leaf({2, 2, 2, 2}, organ_logits, true);
        nn::Var loss = seg_loss_node(g, nn::softmax_channels(g, ll), nn::softmax_channels(g, ol),
                                     labels, w);
        g.backward(loss);

        auto softmax2_at = [&](const std::vector<double>& logits) {
            std::vector<double> p(2 * n);
            for (int i = 0; i < n; ++i) {
                const double m = std::max(logits[i], logits[n + i]);
                const double e0 = std::exp(logits[i] - m), e1 = std::exp(logits[n + i] - m);
                p[i] = e0 / (e0 + e1);
                p[n + i] = e1 / (e0 + e1);
            }
            return p;
        };
        auto eval = [&]() {
            return seg_loss(softmax2_at(lesion_logits), softmax2_at(organ_logits), labels, w);
        };
        for (int i = 0; i < 2 * n; ++i) {
            CHECK(rel_err(central_diff(eval, &lesion_logits[i]), ll->grad[i]) < 1e-3);
            CHECK(rel_err(central_diff(eval, &organ_logits[i]), ol->grad[i]) < 1e-3);
        }
    }
}

TEST_CASE("class weight defaults and validation") {
    ClassWeights w = ClassWeights::defaults(5);
    CHECK(w.w == std::vector<double>{0.1, 4.0, 1.0, 1.0, 1.0});
    CHECK_NOTHROW(w.validate(5));
    ClassWeights bad;
    bad.w = {0.0, 0.0};
    CHECK_THROWS_AS(bad.validate(2), ConfigError);
    ClassWeights neg;
    neg.w = {-1.0, 1.0};
    CHECK_THROWS_AS(neg.validate(2), ConfigError);
}
