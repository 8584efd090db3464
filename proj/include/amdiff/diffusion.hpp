#pragma once

#include <functional>
#include <vector>

#include "amdiff/common.hpp"
#include "amdiff/rng.hpp"

namespace amdiff {

/// Precomputed per-timestep diffusion coefficients, 1-indexed over t in [1, T].
struct ScheduleTable {
    int T = 0;
    std::vector<double> alpha;      // retention per step, in (0, 1)
    std::vector<double> alpha_bar;  // running product of alpha
    std::vector<double> beta;       // 1 - alpha
    std::vector<double> sigma;      // posterior std; sigma[1] == 0

    void check(int t) const {
        if (t < 1 || t > T)
            throw ConfigError("timestep " + std::to_string(t) + " outside [1, " +
                              std::to_string(T) + "]");
    }
};

/// Cosine variance schedule (Nichol-Dhariwal form): alpha_bar(t) = f(t)/f(0)
/// with f(u) = cos^2(((u/T + s)/(1 + s)) * pi/2), per-step alpha clipped to
/// [0.001, 0.9999], and alpha_bar recomputed as the product of clipped alphas.
ScheduleTable cosine_schedule(int T, double s_offset = 0.008);

/// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.
std::vector<double> forward_diffuse(const std::vector<double>& x0, int t,
                                    const std::vector<double>& eps, const ScheduleTable& sched);

/// x0_hat = (x_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t]), clamped to [-1, 1].
std::vector<double> predict_x0(const std::vector<double>& x_t, const std::vector<double>& eps_hat,
                               int t, const ScheduleTable& sched);

/// One reverse step; z is ignored at t == 1 (sigma[1] == 0) and may be empty then.
std::vector<double> reverse_step(const std::vector<double>& x_t,
                                 const std::vector<double>& eps_hat, int t,
                                 const std::vector<double>& z, const ScheduleTable& sched);

using DenoiserFn = std::function<std::vector<double>(const std::vector<double>& x_t,
                                                     const std::vector<double>& condition, int t)>;

/// Full reverse chain: x_T ~ N(0, I), then reverse_step down to t = 1.
/// Deterministic given the rng state; returns the diffusion-space x0.
std::vector<double> sample_chain(const std::vector<double>& condition_lc,
                                 const DenoiserFn& denoiser_fn, const ScheduleTable& sched,
                                 Rng& rng);

/// Linear map between SUV space [0, cutoff] and diffusion space [-1, 1].
struct DiffusionNorm {
    double suv_cutoff = 20.0;

    double map(double suv) const {
        const double s = std::min(std::max(suv, 0.0), suv_cutoff);
        return s / (suv_cutoff / 2.0) - 1.0;
    }
    double unmap(double x) const {
        const double c = std::min(std::max(x, -1.0), 1.0);
        return (c + 1.0) * (suv_cutoff / 2.0);
    }
    std::vector<double> map(const std::vector<float>& suv) const;
    std::vector<float> unmap_to_suv(const std::vector<double>& x) const;
};

}  // namespace amdiff
