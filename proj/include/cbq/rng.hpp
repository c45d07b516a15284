#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace cbq {

/// Deterministic splitmix64 generator. Hand-rolled draw functions keep
/// sampled streams identical across standard library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (two draws per call).
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stdev) { return mean + stdev * normal(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  private:
    std::uint64_t state_;
};

}  // namespace cbq
