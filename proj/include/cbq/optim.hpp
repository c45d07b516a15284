#pragma once

#include <cmath>
#include <vector>

#include "cbq/tensor.hpp"

namespace cbq {

/// Adaptive-moment gradient descent with bias correction. Parameters keep
/// their own learning rates; a parameter without a deposited gradient this
/// step is treated as having a zero gradient.
class AdamOptimizer {
  public:
    AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add_param(Tensor t, double lr) {
        Slot s;
        s.t = std::move(t);
        s.lr = lr;
        s.m.assign(s.t.numel(), 0.0);
        s.v.assign(s.t.numel(), 0.0);
        slots_.push_back(std::move(s));
    }

    void zero_grad() {
        for (auto& s : slots_) s.t.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& s : slots_) {
            auto data = s.t.data();
            const bool has = s.t.has_grad();
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = has ? s.t.grad()[i] : 0.0;
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                data[i] -= s.lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    std::size_t param_count() const { return slots_.size(); }

  private:
    struct Slot {
        Tensor t;
        double lr = 0.0;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    std::size_t t_ = 0;
    double beta1_, beta2_, eps_;
};

}  // namespace cbq
