#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "amdiff/diffusion.hpp"
#include "test_util.hpp"

using namespace amdiff;
using test::random_vec;
using test::rel_err;

TEST_CASE("cosine schedule invariants for T in {1, 10, 50, 250}") {
    for (int T : {1, 10, 50, 250}) {
        ScheduleTable s = cosine_schedule(T);
        REQUIRE(s.T == T);
        double prod = 1.0;
        for (int t = 1; t <= T; ++t) {
            CHECK(s.alpha[t] > 0.0);
            CHECK(s.alpha[t] < 1.0);
            CHECK(s.beta[t] == 1.0 - s.alpha[t]);
            prod *= s.alpha[t];
            CHECK(std::fabs(s.alpha_bar[t] - prod) < 1e-12);
            if (t > 1) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);  // strictly decreasing
            CHECK(s.sigma[t] >= 0.0);
        }
        CHECK(s.sigma[1] == 0.0);
    }
    CHECK_THROWS_AS(cosine_schedule(0), ConfigError);
}

TEST_CASE("cosine schedule endpoints at T = 250") {
    ScheduleTable s = cosine_schedule(250);
    CHECK(s.alpha_bar[1] > 0.99);
    CHECK(s.alpha_bar[250] < 1e-3);
}

TEST_CASE("running product matches the direct formula in the pre-clip regime") {
    const int T = 250;
    const double s_off = 0.008;
    ScheduleTable s = cosine_schedule(T, s_off);
    auto f = [&](double u) {
        const double c = std::cos(((u / T + s_off) / (1.0 + s_off)) * 3.14159265358979323846 / 2.0);
        return c * c;
    };
    for (int t = 1; t <= T; ++t) {
        // Skip once clipping has engaged (alpha at a clamp boundary).
        bool clipped = false;
        for (int k = 1; k <= t; ++k)
            clipped |= s.alpha[k] <= 0.001 || s.alpha[k] >= 0.9999;
        if (clipped) continue;
        CHECK(std::fabs(s.alpha_bar[t] - f(t) / f(0)) < 1e-10);
    }
}

TEST_CASE("forward diffusion endpoint cases") {
    ScheduleTable s = cosine_schedule(50);
    Rng rng(1);
    std::vector<double> x0 = random_vec(rng, 32);
    std::vector<double> zero(32, 0.0);

    std::vector<double> xt = forward_diffuse(x0, 17, zero, s);
    for (size_t i = 0; i < x0.size(); ++i)
        CHECK(xt[i] == doctest::Approx(std::sqrt(s.alpha_bar[17]) * x0[i]).epsilon(1e-12));

    std::vector<double> eps = random_vec(rng, 32);
    std::vector<double> from_zero = forward_diffuse(zero, 17, eps, s);
    for (size_t i = 0; i < eps.size(); ++i)
        CHECK(from_zero[i] ==
              doctest::Approx(std::sqrt(1.0 - s.alpha_bar[17]) * eps[i]).epsilon(1e-12));

    CHECK_THROWS_AS(forward_diffuse(x0, 0, eps, s), ConfigError);
    CHECK_THROWS_AS(forward_diffuse(x0, 51, eps, s), ConfigError);
}

TEST_CASE("closed form equals iterative single-step composition") {
    ScheduleTable s = cosine_schedule(50);
    Rng rng(2);
    const int n = 16;
    std::vector<double> x0 = random_vec(rng, n, 0.5);
    for (int t_target : {1, 7, 25, 50}) {
        std::vector<double> x = x0;
        for (int t = 1; t <= t_target; ++t) {
            std::vector<double> step_eps = random_vec(rng, n);
            for (int i = 0; i < n; ++i)
                x[i] = std::sqrt(s.alpha[t]) * x[i] + std::sqrt(1.0 - s.alpha[t]) * step_eps[i];
        }
        // matched composite noise
        std::vector<double> eps_eff(n);
        const double sa = std::sqrt(s.alpha_bar[t_target]);
        const double sb = std::sqrt(1.0 - s.alpha_bar[t_target]);
        for (int i = 0; i < n; ++i) eps_eff[i] = (x[i] - sa * x0[i]) / sb;
        std::vector<double> closed = forward_diffuse(x0, t_target, eps_eff, s);
        for (int i = 0; i < n; ++i) CHECK(std::fabs(closed[i] - x[i]) < 1e-5);
    }
}

TEST_CASE("predict_x0 inverts forward diffusion") {
    ScheduleTable s = cosine_schedule(50);
    Rng rng(3);
    std::vector<double> x0 = random_vec(rng, 64, 0.4);
    for (auto& v : x0) v = std::clamp(v, -1.0, 1.0);
    for (int t : {1, 10, 30, 50}) {
        std::vector<double> eps = random_vec(rng, 64);
        std::vector<double> xt = forward_diffuse(x0, t, eps, s);
        std::vector<double> rec = predict_x0(xt, eps, t, s);
        for (size_t i = 0; i < x0.size(); ++i) CHECK(std::fabs(rec[i] - x0[i]) < 1e-12);
    }
    // eps_hat = 0 with noiseless x_t recovers x0 exactly
    std::vector<double> zero(64, 0.0);
    std::vector<double> xt = forward_diffuse(x0, 20, zero, s);
    std::vector<double> rec = predict_x0(xt, zero, 20, s);
    for (size_t i = 0; i < x0.size(); ++i) CHECK(std::fabs(rec[i] - x0[i]) < 1e-12);
}

TEST_CASE("reverse step: determinism at t = 1 and scaling identity") {
    ScheduleTable s = cosine_schedule(50);
    Rng rng(4);
    std::vector<double> x = random_vec(rng, 16);
    std::vector<double> zero(16, 0.0);

    std::vector<double> out = reverse_step(x, zero, 1, {}, s);  // no noise needed at t = 1
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(out[i] == doctest::Approx(x[i] / std::sqrt(s.alpha[1])).epsilon(1e-12));

    std::vector<double> out10 = reverse_step(x, zero, 10, zero, s);
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(out10[i] == doctest::Approx(x[i] / std::sqrt(s.alpha[10])).epsilon(1e-12));
}

TEST_CASE("reverse step with the oracle noise equals the DDPM posterior mean") {
    ScheduleTable s = cosine_schedule(50);
    Rng rng(5);
    std::vector<double> x0 = random_vec(rng, 16, 0.5);
    std::vector<double> zero(16, 0.0);
    for (int t = 2; t <= 50; ++t) {
        std::vector<double> eps = random_vec(rng, 16);
        std::vector<double> xt = forward_diffuse(x0, t, eps, s);
        std::vector<double> eps_hat(16);
        const double sa = std::sqrt(s.alpha_bar[t]);
        const double sb = std::sqrt(1.0 - s.alpha_bar[t]);
        for (int i = 0; i < 16; ++i) eps_hat[i] = (xt[i] - sa * x0[i]) / sb;

        std::vector<double> stepped = reverse_step(xt, eps_hat, t, zero, s);
        const double abar_prev = s.alpha_bar[t] / s.alpha[t];
        for (int i = 0; i < 16; ++i) {
            const double posterior =
                (std::sqrt(abar_prev) * s.beta[t] * x0[i] +
                 std::sqrt(s.alpha[t]) * (1.0 - abar_prev) * xt[i]) /
                (1.0 - s.alpha_bar[t]);
            CHECK(std::fabs(stepped[i] - posterior) < 1e-6);
        }
    }
}

TEST_CASE("sample_chain with an oracle denoiser converges to the target") {
    ScheduleTable s = cosine_schedule(50);
    Rng rng(6);
    std::vector<double> target = random_vec(rng, 64, 0.4);
    for (auto& v : target) v = std::clamp(v, -0.9, 0.9);
    DenoiserFn oracle = [&](const std::vector<double>& x_t, const std::vector<double>&, int t) {
        std::vector<double> eps_hat(x_t.size());
        const double sa = std::sqrt(s.alpha_bar[t]);
        const double sb = std::sqrt(1.0 - s.alpha_bar[t]);
        for (size_t i = 0; i < x_t.size(); ++i) eps_hat[i] = (x_t[i] - sa * target[i]) / sb;
        return eps_hat;
    };
    Rng chain_rng(77);
    std::vector<double> out = sample_chain(std::vector<double>(64, 0.0), oracle, s, chain_rng);
    double mse = 0;
    for (size_t i = 0; i < out.size(); ++i) mse += (out[i] - target[i]) * (out[i] - target[i]);
    CHECK(std::sqrt(mse / out.size()) < 0.05);
}

TEST_CASE("sample_chain determinism and the T = 1 minimal chain") {
    ScheduleTable s = cosine_schedule(5);
    DenoiserFn zero_fn = [](const std::vector<double>& x, const std::vector<double>&, int) {
        return std::vector<double>(x.size(), 0.0);
    };
    Rng a(42), b(42);
    std::vector<double> cond(27, 0.0);
    CHECK(sample_chain(cond, zero_fn, s, a) == sample_chain(cond, zero_fn, s, b));

    ScheduleTable s1 = cosine_schedule(1);
    Rng c(42);
    std::vector<double> out = sample_chain(cond, zero_fn, s1, c);
    Rng d(42);
    std::vector<double> x(27);
    for (auto& v : x) v = d.normal();
    std::vector<double> expect = reverse_step(x, std::vector<double>(27, 0.0), 1, {}, s1);
    CHECK(out == expect);
}

TEST_CASE("variance preservation under the forward process") {
    ScheduleTable s = cosine_schedule(10);
    Rng rng(8);
    const int n = 200000;
    for (int t : {1, 5, 10}) {
        double ss = 0;
        for (int i = 0; i < n; ++i) {
            const double x0 = rng.normal();  // unit variance signal
            const double eps = rng.normal();
            const double xt =
                std::sqrt(s.alpha_bar[t]) * x0 + std::sqrt(1 - s.alpha_bar[t]) * eps;
            ss += xt * xt;
        }
        CHECK(ss / n == doctest::Approx(1.0).epsilon(0.10));
    }
}

TEST_CASE("diffusion normalization maps [0, cutoff] onto [-1, 1]") {
    DiffusionNorm norm;
    CHECK(norm.map(0.0) == -1.0);
    CHECK(norm.map(10.0) == 0.0);
    CHECK(norm.map(20.0) == 1.0);
    CHECK(norm.map(35.0) == 1.0);  // cutoff applied
    for (double suv : {0.0, 0.31, 5.0, 12.7, 20.0})
        CHECK(norm.unmap(norm.map(suv)) == doctest::Approx(suv).epsilon(1e-12));
    CHECK(norm.unmap(-3.0) == 0.0);
    CHECK(norm.unmap(3.0) == 20.0);
}
