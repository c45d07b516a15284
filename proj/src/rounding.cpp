#include "cbq/rounding.hpp"

#include <algorithm>
#include <cmath>

#include "cbq/errors.hpp"

namespace cbq {

namespace {

// Solve X * M = B for X, with M [r x r] symmetric positive definite-ish and
// B [d x r]. Gaussian elimination with partial pivoting on M^T (tiny r).
// Returns false when a pivot collapses.
bool solve_right(const std::vector<double>& m, std::size_t r, std::vector<double>& b,
                 std::size_t d) {
    std::vector<double> a = m;  // row-major r x r, overwritten
    std::vector<std::size_t> perm(r);
    for (std::size_t i = 0; i < r; ++i) perm[i] = i;

    // LU factorization
    for (std::size_t col = 0; col < r; ++col) {
        std::size_t piv = col;
        for (std::size_t i = col + 1; i < r; ++i) {
            if (std::fabs(a[i * r + col]) > std::fabs(a[piv * r + col])) piv = i;
        }
        if (std::fabs(a[piv * r + col]) < 1e-12) return false;
        if (piv != col) {
            for (std::size_t j = 0; j < r; ++j) std::swap(a[piv * r + j], a[col * r + j]);
            std::swap(perm[piv], perm[col]);
        }
        for (std::size_t i = col + 1; i < r; ++i) {
            const double f = a[i * r + col] / a[col * r + col];
            a[i * r + col] = f;
            for (std::size_t j = col + 1; j < r; ++j) a[i * r + j] -= f * a[col * r + j];
        }
    }

    // Solve M^T x = rhs for each row of B (M symmetric in our use, but keep
    // the permutation bookkeeping correct regardless).
    std::vector<double> y(r);
    for (std::size_t row = 0; row < d; ++row) {
        double* brow = b.data() + row * r;
        for (std::size_t i = 0; i < r; ++i) y[i] = brow[perm[i]];
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < i; ++j) y[i] -= a[i * r + j] * y[j];
        }
        for (std::size_t i = r; i-- > 0;) {
            for (std::size_t j = i + 1; j < r; ++j) y[i] -= a[i * r + j] * y[j];
            y[i] /= a[i * r + i];
        }
        std::copy(y.begin(), y.end(), brow);
    }
    return true;
}

}  // namespace

RoundingCompensation init_compensation(const Tensor& w, const QuantState& state,
                                       const QuantSpec& spec, std::size_t rank, Rng& rng) {
    if (w.shape().size() != 2) throw ConfigError("compensation expects a 2-D weight matrix");
    const std::size_t d = w.shape()[0], k = w.shape()[1];
    const std::size_t max_rank = std::max<std::size_t>(1, std::min(d, k) / 4);
    if (rank < 1 || rank > max_rank) {
        throw ConfigError("compensation rank " + std::to_string(rank) +
                          " outside [1, " + std::to_string(max_rank) + "] for " +
                          shape_str(w.shape()));
    }

    // Target logits reproducing A ~ frac(w/step).
    const double span = RoundingCompensation::kZeta - RoundingCompensation::kGamma;
    const auto ws = w.data();
    const auto ss = state.step.data();
    std::vector<double> target(d * k);
    for (std::size_t i = 0; i < ws.size(); ++i) {
        const double step = ss[quant_group_of(w.shape(), spec, i)];
        const double v = ws[i] / step;
        double f = v - std::floor(v);
        f = std::clamp(f, 1e-3, 1.0 - 1e-3);
        const double sig = (f - RoundingCompensation::kGamma) / span;
        target[i] = std::log(sig / (1.0 - sig));
    }

    std::vector<double> v2(rank * k);
    for (double& x : v2) x = rng.uniform(-0.5, 0.5);

    // V1 = Z V2^T (V2 V2^T)^-1
    std::vector<double> zv2t(d * rank, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const double z = target[i * k + j];
            for (std::size_t a = 0; a < rank; ++a) zv2t[i * rank + a] += z * v2[a * k + j];
        }
    }
    std::vector<double> gram(rank * rank, 0.0);
    for (std::size_t a = 0; a < rank; ++a) {
        for (std::size_t b = 0; b < rank; ++b) {
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += v2[a * k + j] * v2[b * k + j];
            gram[a * rank + b] = s;
        }
    }
    std::vector<double> v1 = zv2t;
    bool ok = solve_right(gram, rank, v1, d);
    if (ok) {
        for (double x : v1) {
            if (!std::isfinite(x)) {
                ok = false;
                break;
            }
        }
    }
    if (!ok) std::fill(v1.begin(), v1.end(), 0.0);

    RoundingCompensation c;
    c.v1 = Tensor::from(std::move(v1), {d, rank}, true);
    c.v2 = Tensor::from(std::move(v2), {rank, k}, true);
    c.rank = rank;
    return c;
}

Tensor compensation_matrix(const RoundingCompensation& c) {
    const double span = RoundingCompensation::kZeta - RoundingCompensation::kGamma;
    return clamp(shift(scale(sigmoid(matmul(c.v1, c.v2)), span), RoundingCompensation::kGamma),
                 0.0, 1.0);
}

Tensor compensated_quant(const Tensor& w, const QuantState& state, const RoundingCompensation& c,
                         const QuantSpec& spec) {
    if (spec.rounding != Rounding::Floor) {
        throw ConfigError("compensated quantization requires floor rounding");
    }
    return fake_quant_compensated(w, state, compensation_matrix(c), spec);
}

Tensor rounding_regularizer(const Tensor& a, const RegularizerSchedule& sched, std::size_t iter) {
    const double beta = sched.beta_at(iter);
    const Tensor t = abs_t(shift(scale(a, 2.0), -1.0));
    return scale(sum_all(shift(neg(pow_scalar(t, beta)), 1.0)), sched.k_reg);
}

std::size_t parameter_count(const RoundingCompensation& c) {
    const std::size_t d = c.v1.shape()[0];
    const std::size_t k = c.v2.shape()[1];
    return c.rank * (d + k);
}

}  // namespace cbq
