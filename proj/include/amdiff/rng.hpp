#pragma once

#include <array>
#include <cstdint>

namespace amdiff {

/// Deterministic xoshiro256++ stream with portable distributions.
///
/// The standard library distributions are implementation-defined, so every
/// draw used by the artifact (uniform, normal, Poisson) is implemented here
/// to keep outputs byte-identical across toolchains. State is serializable
/// for exact training resume.
class Rng {
public:
    explicit Rng(uint64_t seed = 0);

    /// Independent child stream; identical (seed, tag) pairs give identical streams.
    Rng derive(uint64_t tag) const;
    Rng derive(uint64_t tag_a, uint64_t tag_b) const;

    uint64_t next_u64();
    /// Uniform in [0, 1) with 53-bit resolution.
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n); n must be positive.
    uint64_t below(uint64_t n);
    /// Standard normal via Box-Muller (two uniforms per draw, no cached state).
    double normal();
    /// Poisson with the given mean; exact inversion for small means,
    /// Hormann PTRS transformed rejection for large ones.
    long long poisson(double mean);

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

private:
    std::array<uint64_t, 4> s_{};
};

}  // namespace amdiff
