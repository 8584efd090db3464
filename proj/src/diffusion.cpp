#include "amdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace amdiff {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_same_size(const std::vector<double>& a, const std::vector<double>& b,
                     const char* what) {
    if (a.size() != b.size())
        throw DataError(std::string(what) + ": operand sizes differ (" +
                        std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
}

}  // namespace

ScheduleTable cosine_schedule(int T, double s_offset) {
    if (T < 1) throw ConfigError("cosine_schedule: T must be >= 1");
    if (!(s_offset > 0.0)) throw ConfigError("cosine_schedule: s_offset must be positive");

    auto f = [&](double u) {
        const double v = std::cos(((u / T + s_offset) / (1.0 + s_offset)) * kPi / 2.0);
        return v * v;
    };
    const double f0 = f(0.0);

    ScheduleTable s;
    s.T = T;
    s.alpha.assign(T + 1, 0.0);
    s.alpha_bar.assign(T + 1, 0.0);
    s.beta.assign(T + 1, 0.0);
    s.sigma.assign(T + 1, 0.0);

    double abar_formula_prev = 1.0;
    double abar_running = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double abar_formula = f(static_cast<double>(t)) / f0;
        double a = abar_formula / abar_formula_prev;
        a = std::clamp(a, 0.001, 0.9999);
        abar_formula_prev = abar_formula;

        const double abar_prev = abar_running;
        abar_running *= a;
        s.alpha[t] = a;
        s.alpha_bar[t] = abar_running;
        s.beta[t] = 1.0 - a;
        // Posterior standard deviation; zero at t == 1 because alpha_bar[0] == 1.
        s.sigma[t] = std::sqrt(s.beta[t] * (1.0 - abar_prev) / (1.0 - abar_running));
    }
    return s;
}

std::vector<double> forward_diffuse(const std::vector<double>& x0, int t,
                                    const std::vector<double>& eps, const ScheduleTable& sched) {
    sched.check(t);
    check_same_size(x0, eps, "forward_diffuse");
    const double sa = std::sqrt(sched.alpha_bar[t]);
    const double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = sa * x0[i] + sb * eps[i];
    return out;
}

std::vector<double> predict_x0(const std::vector<double>& x_t, const std::vector<double>& eps_hat,
                               int t, const ScheduleTable& sched) {
    sched.check(t);
    check_same_size(x_t, eps_hat, "predict_x0");
    const double sa = std::sqrt(sched.alpha_bar[t]);
    const double sb = std::sqrt(1.0 - sched.alpha_bar[t]);
    std::vector<double> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i)
        out[i] = std::clamp((x_t[i] - sb * eps_hat[i]) / sa, -1.0, 1.0);
    return out;
}

std::vector<double> reverse_step(const std::vector<double>& x_t,
                                 const std::vector<double>& eps_hat, int t,
                                 const std::vector<double>& z, const ScheduleTable& sched) {
    sched.check(t);
    check_same_size(x_t, eps_hat, "reverse_step");
    const double inv_sqrt_a = 1.0 / std::sqrt(sched.alpha[t]);
    const double coef = (1.0 - sched.alpha[t]) / std::sqrt(1.0 - sched.alpha_bar[t]);
    const double sigma = sched.sigma[t];
    const bool add_noise = t > 1 && sigma > 0.0;
    if (add_noise) check_same_size(x_t, z, "reverse_step noise");
    std::vector<double> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) {
        out[i] = inv_sqrt_a * (x_t[i] - coef * eps_hat[i]);
        if (add_noise) out[i] += sigma * z[i];
    }
    return out;
}

std::vector<double> sample_chain(const std::vector<double>& condition_lc,
                                 const DenoiserFn& denoiser_fn, const ScheduleTable& sched,
                                 Rng& rng) {
    std::vector<double> x(condition_lc.size());
    for (auto& v : x) v = rng.normal();
    std::vector<double> z(condition_lc.size());
    for (int t = sched.T; t >= 1; --t) {
        std::vector<double> eps_hat = denoiser_fn(x, condition_lc, t);
        check_same_size(x, eps_hat, "sample_chain denoiser output");
        if (t > 1)
            for (auto& v : z) v = rng.normal();
        x = reverse_step(x, eps_hat, t, z, sched);
    }
    return x;
}

std::vector<double> DiffusionNorm::map(const std::vector<float>& suv) const {
    std::vector<double> out(suv.size());
    for (size_t i = 0; i < suv.size(); ++i) out[i] = map(static_cast<double>(suv[i]));
    return out;
}

std::vector<float> DiffusionNorm::unmap_to_suv(const std::vector<double>& x) const {
    std::vector<float> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(unmap(x[i]));
    return out;
}

}  // namespace amdiff
