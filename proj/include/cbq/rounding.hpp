#pragma once

#include "cbq/quantizer.hpp"
#include "cbq/rng.hpp"
#include "cbq/tensor.hpp"

namespace cbq {

/// Low-rank learnable factors behind the near-binary compensation matrix
/// A = clip(sigmoid(V1 x V2) * (zeta - gamma) + gamma, 0, 1) that corrects
/// floor-rounding of weight quantization.
struct RoundingCompensation {
    Tensor v1;  // [d x r]
    Tensor v2;  // [r x k]
    std::size_t rank = 1;

    static constexpr double kZeta = 1.1;
    static constexpr double kGamma = -0.1;
};

struct RegularizerSchedule {
    double k_reg = 0.01;
    double beta_start = 20.0;
    double beta_end = 2.0;
    std::size_t total_iters = 1;

    // linear anneal, monotone non-increasing over the window's iterations
    double beta_at(std::size_t iter) const {
        if (total_iters <= 1) return beta_end;
        const double t = static_cast<double>(std::min(iter, total_iters - 1)) /
                         static_cast<double>(total_iters - 1);
        return beta_start + (beta_end - beta_start) * t;
    }
};

/// Warm start: V2 gets small uniform noise, V1 is the least-squares fit so
/// sigmoid(V1 x V2) approximates the fractional part of w/step (compensation
/// starts out near nearest-rounding behaviour). Falls back to V1 = 0
/// (A = 0.5 everywhere) if the fit is unstable.
RoundingCompensation init_compensation(const Tensor& w, const QuantState& state,
                                       const QuantSpec& spec, std::size_t rank, Rng& rng);

Tensor compensation_matrix(const RoundingCompensation& c);

/// step * clamp(floor(w/step) + A, q_min, q_max); requires a floor spec.
Tensor compensated_quant(const Tensor& w, const QuantState& state, const RoundingCompensation& c,
                         const QuantSpec& spec);

/// k_reg * sum(1 - |2A - 1|^beta(iter)); zero exactly on binary A.
Tensor rounding_regularizer(const Tensor& a, const RegularizerSchedule& sched, std::size_t iter);

/// Learnable parameters of the factorization: rank * (d + k).
std::size_t parameter_count(const RoundingCompensation& c);

}  // namespace cbq
