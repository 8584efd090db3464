#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "amdiff/nn.hpp"
#include "test_util.hpp"

using namespace amdiff;
using test::central_diff;
using test::random_vec;
using test::rel_err;

namespace {

using BuildFn = std::function<nn::Var(nn::Graph&, std::vector<nn::Var>&)>;
using InputSpec = std::vector<std::pair<nn::Shape, std::vector<double>>>;

/// Objective sum(r * op(inputs)); checks every input coordinate's analytic
/// gradient against central finite differences. Returns the worst rel error.
double check_op(const BuildFn& build, InputSpec inputs, Rng& rng) {
    nn::Graph g(true);
    std::vector<nn::Var> leaves;
    for (auto& [shape, data] : inputs) leaves.push_back(g.leaf(shape, data, true));
    nn::Var out = build(g, leaves);
    const std::vector<double> r = random_vec(rng, out->val.size());
    nn::Var obj = nn::sum_all(g, nn::mul(g, out, g.constant(out->shape, r)));
    g.backward(obj);

    auto eval = [&]() {
        nn::Graph ge(false);
        std::vector<nn::Var> lv;
        for (auto& [shape, data] : inputs) lv.push_back(ge.leaf(shape, data, false));
        nn::Var o = build(ge, lv);
        double s = 0;
        for (size_t i = 0; i < o->val.size(); ++i) s += o->val[i] * r[i];
        return s;
    };

    double worst = 0.0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& data = inputs[k].second;
        for (size_t i = 0; i < data.size(); ++i) {
            const double fd = central_diff(eval, &data[i]);
            const double an = leaves[k]->grad.empty() ? 0.0 : leaves[k]->grad[i];
            if (std::fabs(fd) < 1e-10 && std::fabs(an) < 1e-10) continue;
            worst = std::max(worst, rel_err(fd, an));
        }
    }
    return worst;
}

InputSpec two(nn::Shape s, Rng& rng, double scale = 1.0) {
    return {{s, random_vec(rng, nn::shape_numel(s), scale)},
            {s, random_vec(rng, nn::shape_numel(s), scale)}};
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    Rng rng(1);
    const nn::Shape s{2, 2, 2, 3};

    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::add(g, v[0], v[1]); }, two(s, rng),
                   rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::sub(g, v[0], v[1]); }, two(s, rng),
                   rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::mul(g, v[0], v[1]); }, two(s, rng),
                   rng) < 1e-6);

    InputSpec div_in = two(s, rng);
    for (auto& x : div_in[1].second) x = 1.0 + std::fabs(x);  // keep denominators away from 0
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::div(g, v[0], v[1]); }, div_in, rng) <
          1e-6);

    InputSpec one = {{s, random_vec(rng, nn::shape_numel(s))}};
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::mul_scalar(g, v[0], -2.5); }, one,
                   rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::add_scalar(g, v[0], 1.5); }, one, rng) <
          1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::abs(g, v[0]); }, one, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::sigmoid(g, v[0]); }, one, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::silu(g, v[0]); }, one, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::tanh(g, v[0]); }, one, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::clamp(g, v[0], -0.7, 0.7); }, one,
                   rng) < 1e-5);

    InputSpec pos = {{s, random_vec(rng, nn::shape_numel(s))}};
    for (auto& x : pos[0].second) x = 0.5 + std::fabs(x);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::log(g, v[0]); }, pos, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::pow_const(g, v[0], 4.0 / 3.0); }, pos,
                   rng) < 1e-6);
}

TEST_CASE("reduction and reshape gradients") {
    Rng rng(2);
    InputSpec one = {{{3, 2, 2, 2}, random_vec(rng, 24)}};
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::sum_all(g, v[0]); }, one, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::mean_all(g, v[0]); }, one, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::reshape(g, v[0], {6, 4}); }, one, rng) <
          1e-6);
}

TEST_CASE("channel and spatial structure gradients") {
    Rng rng(3);
    const nn::Shape s{3, 2, 2, 2};

    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::concat_channels(g, v[0], v[1]); },
                   {{s, random_vec(rng, 24)}, {{2, 2, 2, 2}, random_vec(rng, 16)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::slice_channels(g, v[0], 1, 3); },
                   {{s, random_vec(rng, 24)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::add_channel_bias(g, v[0], v[1]); },
                   {{s, random_vec(rng, 24)}, {{3}, random_vec(rng, 3)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::scale_channels(g, v[0], v[1]); },
                   {{s, random_vec(rng, 24)}, {{3}, random_vec(rng, 3)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::mul_spatial(g, v[0], v[1]); },
                   {{s, random_vec(rng, 24)}, {{1, 2, 2, 2}, random_vec(rng, 8)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::global_avg_pool(g, v[0]); },
                   {{s, random_vec(rng, 24)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::softmax_channels(g, v[0]); },
                   {{s, random_vec(rng, 24)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::upsample_nearest2(g, v[0]); },
                   {{{2, 1, 2, 2}, random_vec(rng, 8)}}, rng) < 1e-6);
}

TEST_CASE("upsample_nearest2 values") {
    nn::Graph g(false);
    nn::Var x = g.leaf({1, 1, 1, 2}, {1.0, 2.0}, false);
    nn::Var y = nn::upsample_nearest2(g, x);
    CHECK(y->shape == nn::Shape{1, 2, 2, 4});
    CHECK(y->val == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2});
}

TEST_CASE("conv3d gradients across stride/kernel variants") {
    Rng rng(4);
    // k3 s1 p1
    CHECK(check_op(
              [](nn::Graph& g, auto& v) { return nn::conv3d(g, v[0], v[1], v[2], 1, 1); },
              {{{2, 3, 3, 3}, random_vec(rng, 54)},
               {{3, 2, 3, 3, 3}, random_vec(rng, 162, 0.3)},
               {{3}, random_vec(rng, 3)}},
              rng) < 1e-6);
    // k3 s2 p1 (downsample)
    CHECK(check_op(
              [](nn::Graph& g, auto& v) { return nn::conv3d(g, v[0], v[1], v[2], 2, 1); },
              {{{2, 4, 4, 4}, random_vec(rng, 128)},
               {{2, 2, 3, 3, 3}, random_vec(rng, 108, 0.3)},
               {{2}, random_vec(rng, 2)}},
              rng) < 1e-6);
    // k1 s1 p0 (pointwise)
    CHECK(check_op(
              [](nn::Graph& g, auto& v) { return nn::conv3d(g, v[0], v[1], v[2], 1, 0); },
              {{{3, 2, 2, 2}, random_vec(rng, 24)},
               {{2, 3, 1, 1, 1}, random_vec(rng, 6)},
               {{2}, random_vec(rng, 2)}},
              rng) < 1e-6);
    // stride-2 on a saturated 1x1x1 input keeps a center tap
    nn::Graph g(false);
    nn::Var x = g.leaf({1, 1, 1, 1}, {2.0}, false);
    nn::Var w = g.leaf({1, 1, 3, 3, 3}, std::vector<double>(27, 1.0), false);
    nn::Var b = g.leaf({1}, {0.5}, false);
    nn::Var y = nn::conv3d(g, x, w, b, 2, 1);
    CHECK(y->shape == nn::Shape{1, 1, 1, 1});
    CHECK(y->val[0] == doctest::Approx(2.5));
}

TEST_CASE("conv3d matches a brute-force correlation oracle") {
    Rng rng(14);
    const int ci = 2, co = 2, D = 3, K = 3, pad = 1;
    InputSpec in = {{{ci, D, D, D}, random_vec(rng, ci * D * D * D)},
                    {{co, ci, K, K, K}, random_vec(rng, co * ci * K * K * K)},
                    {{co}, random_vec(rng, co)}};
    nn::Graph g(false);
    nn::Var x = g.leaf(in[0].first, in[0].second, false);
    nn::Var w = g.leaf(in[1].first, in[1].second, false);
    nn::Var b = g.leaf(in[2].first, in[2].second, false);
    nn::Var y = nn::conv3d(g, x, w, b, 1, pad);
    auto X = [&](int c, int z, int yy, int xx) -> double {
        if (z < 0 || z >= D || yy < 0 || yy >= D || xx < 0 || xx >= D) return 0.0;
        return in[0].second[((c * D + z) * D + yy) * D + xx];
    };
    for (int c = 0; c < co; ++c)
        for (int z = 0; z < D; ++z)
            for (int yy = 0; yy < D; ++yy)
                for (int xx = 0; xx < D; ++xx) {
                    double acc = in[2].second[c];
                    for (int cc = 0; cc < ci; ++cc)
                        for (int kd = 0; kd < K; ++kd)
                            for (int kh = 0; kh < K; ++kh)
                                for (int kw = 0; kw < K; ++kw)
                                    acc += in[1].second[(((c * ci + cc) * K + kd) * K + kh) * K +
                                                        kw] *
                                           X(cc, z - pad + kd, yy - pad + kh, xx - pad + kw);
                    CHECK(std::fabs(y->val[((c * D + z) * D + yy) * D + xx] - acc) < 1e-9);
                }
}

TEST_CASE("group_norm gradients and normalization") {
    Rng rng(5);
    CHECK(check_op(
              [](nn::Graph& g, auto& v) { return nn::group_norm(g, v[0], v[1], v[2], 2); },
              {{{4, 2, 2, 2}, random_vec(rng, 32)},
               {{4}, random_vec(rng, 4, 0.5)},
               {{4}, random_vec(rng, 4, 0.5)}},
              rng) < 1e-5);

    nn::Graph g(false);
    nn::Var x = g.leaf({2, 1, 2, 2}, random_vec(rng, 8, 3.0), false);
    nn::Var gamma = g.leaf({2}, {1.0, 1.0}, false);
    nn::Var beta = g.leaf({2}, {0.0, 0.0}, false);
    nn::Var y = nn::group_norm(g, x, gamma, beta, 1);  // per-channel groups
    for (int c = 0; c < 2; ++c) {
        double m = 0, v2 = 0;
        for (int i = 0; i < 4; ++i) m += y->val[c * 4 + i];
        m /= 4;
        for (int i = 0; i < 4; ++i) v2 += (y->val[c * 4 + i] - m) * (y->val[c * 4 + i] - m);
        CHECK(std::fabs(m) < 1e-10);
        CHECK(v2 / 4 == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("dense layer and matmul gradients") {
    Rng rng(6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::linear(g, v[0], v[1], v[2]); },
                   {{{4}, random_vec(rng, 4)},
                    {{3, 4}, random_vec(rng, 12)},
                    {{3}, random_vec(rng, 3)}},
                   rng) < 1e-6);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            const nn::Shape sa = ta ? nn::Shape{3, 2} : nn::Shape{2, 3};
            const nn::Shape sb = tb ? nn::Shape{4, 3} : nn::Shape{3, 4};
            CHECK(check_op(
                      [ta, tb](nn::Graph& g, auto& v) {
                          return nn::matmul(g, v[0], v[1], ta, tb);
                      },
                      {{sa, random_vec(rng, 6)}, {sb, random_vec(rng, 12)}}, rng) < 1e-6);
        }
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::softmax_rows(g, v[0]); },
                   {{{3, 4}, random_vec(rng, 12)}}, rng) < 1e-6);
    CHECK(check_op([](nn::Graph& g, auto& v) { return nn::reverse_seq(g, v[0]); },
                   {{{2, 5}, random_vec(rng, 10)}}, rng) < 1e-6);
}

namespace {

/// Literal recurrence: h_k = a h_{k-1} + b x_k, y_k = sum_j c h + d x, per channel.
std::vector<double> naive_ssm(const std::vector<double>& x, int C, int N,
                              const std::vector<double>& a, const std::vector<double>& b,
                              const std::vector<double>& c, const std::vector<double>& d, int S) {
    std::vector<double> y(x.size(), 0.0);
    for (int ch = 0; ch < C; ++ch) {
        for (int k = 0; k < N; ++k) y[ch * N + k] = d[ch] * x[ch * N + k];
        for (int j = 0; j < S; ++j) {
            double h = 0.0;
            for (int k = 0; k < N; ++k) {
                h = a[ch * S + j] * h + b[ch * S + j] * x[ch * N + k];
                y[ch * N + k] += c[ch * S + j] * h;
            }
        }
    }
    return y;
}

}  // namespace

TEST_CASE("ssm_scan equals the naive recurrence for lengths {1,2,7,64} x 100 draws") {
    Rng rng(7);
    for (int len : {1, 2, 7, 64}) {
        for (int draw = 0; draw < 100; ++draw) {
            const int C = 1 + int(rng.below(3));
            const int S = 1 + int(rng.below(3));
            std::vector<double> x = random_vec(rng, size_t(C) * len);
            std::vector<double> a(size_t(C) * S), b = random_vec(rng, size_t(C) * S),
                                     c = random_vec(rng, size_t(C) * S),
                                     d = random_vec(rng, C);
            for (auto& v : a) v = rng.uniform(-0.95, 0.95);
            nn::Graph g(false);
            nn::Var y = nn::ssm_scan(g, g.leaf({C, len}, x, false), g.leaf({C, S}, a, false),
                                     g.leaf({C, S}, b, false), g.leaf({C, S}, c, false),
                                     g.leaf({C}, d, false));
            const std::vector<double> expect = naive_ssm(x, C, len, a, b, c, d, S);
            for (size_t i = 0; i < expect.size(); ++i)
                CHECK(std::fabs(y->val[i] - expect[i]) < 1e-6);
        }
    }
}

TEST_CASE("ssm_scan limiting cases") {
    nn::Graph g(false);
    // a = 0: memoryless, y = (c*b + d) * x
    std::vector<double> x = {1.0, -2.0, 3.0, 0.5};
    nn::Var y0 = nn::ssm_scan(g, g.leaf({1, 4}, x, false), g.leaf({1, 1}, {0.0}, false),
                              g.leaf({1, 1}, {2.0}, false), g.leaf({1, 1}, {1.5}, false),
                              g.leaf({1}, {0.25}, false));
    for (int k = 0; k < 4; ++k)
        CHECK(y0->val[k] == doctest::Approx((1.5 * 2.0 + 0.25) * x[k]).epsilon(1e-12));

    // a -> 1-, b = c = 1, d = 0 approaches the cumulative sum
    nn::Var y1 = nn::ssm_scan(g, g.leaf({1, 4}, x, false), g.leaf({1, 1}, {0.999999}, false),
                              g.leaf({1, 1}, {1.0}, false), g.leaf({1, 1}, {1.0}, false),
                              g.leaf({1}, {0.0}, false));
    double cum = 0;
    for (int k = 0; k < 4; ++k) {
        cum += x[k];
        CHECK(y1->val[k] == doctest::Approx(cum).epsilon(1e-4));
    }

    // |a| >= 1 is a parameterization error
    CHECK_THROWS_AS(nn::ssm_scan(g, g.leaf({1, 4}, x, false), g.leaf({1, 1}, {1.0}, false),
                                 g.leaf({1, 1}, {1.0}, false), g.leaf({1, 1}, {1.0}, false),
                                 g.leaf({1}, {0.0}, false)),
                    ConfigError);
}

TEST_CASE("ssm_scan gradients") {
    Rng rng(8);
    InputSpec in = {{{2, 6}, random_vec(rng, 12)},
                    {{2, 2}, {}},
                    {{2, 2}, random_vec(rng, 4)},
                    {{2, 2}, random_vec(rng, 4)},
                    {{2}, random_vec(rng, 2)}};
    in[1].second = {0.4, -0.3, 0.7, 0.1};
    CHECK(check_op(
              [](nn::Graph& g, auto& v) {
                  return nn::ssm_scan(g, v[0], v[1], v[2], v[3], v[4]);
              },
              in, rng) < 1e-6);
}

TEST_CASE("detach blocks gradient flow") {
    nn::Graph g(true);
    nn::Var x = g.leaf({1}, {2.0}, true);
    nn::Var y = nn::mul(g, nn::detach(g, x), x);  // d/dx should be detach(x) = 2, not 2x = 4
    g.backward(y);
    CHECK(x->grad[0] == doctest::Approx(2.0));
}
