#include <cmath>

#include "cbq/errors.hpp"
#include "cbq/quantizer.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cbq;
using namespace cbqtest;

namespace {

QuantState fixed_step(double step, bool requires_grad = true) {
    return QuantState{Tensor::from({step}, {1}, requires_grad)};
}

// random values whose v = x/step stays away from rounding and clamp edges
Tensor safe_values(Rng& rng, std::size_t n, double step, const QuantSpec& spec, double margin) {
    std::vector<double> data(n);
    for (auto& x : data) {
        while (true) {
            const double v = rng.uniform(spec.q_min() + 1.0, spec.q_max() - 1.0);
            const double frac = v - std::floor(v);
            if (frac > margin && frac < 1.0 - margin && std::fabs(frac - 0.5) > margin) {
                x = v * step;
                break;
            }
        }
    }
    return Tensor::from(std::move(data), {n}, true);
}

}  // namespace

TEST_CASE("init_step follows max-abs over q_max") {
    QuantSpec s3 = act_spec(3);
    QuantState st = init_step(Tensor::from({-4, 3}, {2}), s3);
    CHECK(st.step.item() == doctest::Approx(4.0 / 3.0));

    QuantState degenerate = init_step(Tensor::from({0.0}, {1}), act_spec(8));
    CHECK(degenerate.step.item() == 1e-8);

    QuantSpec pc = act_spec(8, Granularity::PerChannel, 0);
    QuantState rows = init_step(Tensor::from({1, 0, 0, 8}, {2, 2}), pc);
    CHECK(rows.step.data()[0] == doctest::Approx(1.0 / 127.0));
    CHECK(rows.step.data()[1] == doctest::Approx(8.0 / 127.0));
}

TEST_CASE("fake_quant forward examples") {
    QuantState st = fixed_step(1.0);
    Tensor x = Tensor::from({0.9}, {1});
    CHECK(fake_quant(x, st, act_spec(8)).item() == 1.0);
    CHECK(fake_quant(x, st, weight_spec(8)).item() == 0.0);

    Tensor big = Tensor::from({100.0}, {1});
    CHECK(fake_quant(big, st, act_spec(4)).item() == 7.0);

    CHECK_THROWS_AS(fake_quant(x, fixed_step(0.0), act_spec(8)), ConfigError);
    CHECK_THROWS_AS(act_spec(1), ConfigError);
    CHECK_THROWS_AS(act_spec(17), ConfigError);
}

TEST_CASE("quantizer properties: idempotence, bound, monotonicity, range") {
    Rng rng(42);
    const QuantSpec nearest = act_spec(5);
    const QuantSpec floor5 = weight_spec(5);
    for (int trial = 0; trial < 2000; ++trial) {
        const double step = rng.uniform(0.01, 2.0);
        QuantState st = fixed_step(step, false);
        const double x = rng.uniform(-40.0, 40.0);
        Tensor tx = Tensor::from({x}, {1});

        const double qn = fake_quant(tx, st, nearest).item();
        const double qf = fake_quant(tx, st, floor5).item();

        // idempotence (nearest), bit-exact
        Tensor tq = Tensor::from({qn}, {1});
        CHECK(fake_quant(tq, st, nearest).item() == qn);

        // bounded error for in-range values
        if (x / step >= nearest.q_min() && x / step <= nearest.q_max()) {
            CHECK(std::fabs(qn - x) <= step / 2 + 1e-12);
            CHECK(std::fabs(qf - x) <= step + 1e-12);
        }

        // monotonicity
        const double y = x + rng.uniform(0.0, 5.0);
        Tensor ty = Tensor::from({y}, {1});
        CHECK(fake_quant(ty, st, nearest).item() >= qn);
        CHECK(fake_quant(ty, st, floor5).item() >= qf);

        // integer codes stay in range and dequantize exactly
        IntTensor codes = integer_codes(tx, st, nearest);
        CHECK(codes.values[0] >= -16);
        CHECK(codes.values[0] <= 15);
        CHECK(step * codes.values[0] == qn);
    }
}

TEST_CASE("integer codes example") {
    QuantState st = fixed_step(1.0);
    IntTensor c = integer_codes(Tensor::from({0.9}, {1}), st, act_spec(8));
    CHECK(c.values[0] == 1);
}

TEST_CASE("gradient routing through the clamp window") {
    QuantState st = fixed_step(1.0, false);
    // bits=4: range [-8, 7]
    Tensor x = Tensor::from({0.4, 6.8, 7.3, -8.5, -7.9}, {5}, true);
    backward(sum_all(fake_quant(x, st, act_spec(4))));
    CHECK(x.grad()[0] == 1.0);  // inside
    CHECK(x.grad()[1] == 1.0);  // inside
    CHECK(x.grad()[2] == 0.0);  // above q_max
    CHECK(x.grad()[3] == 0.0);  // below q_min
    CHECK(x.grad()[4] == 1.0);  // inside
}

TEST_CASE("step gradient is the clamped lattice value") {
    QuantState st = fixed_step(1.0);
    Tensor x = Tensor::from({2.3, 100.0, -100.0}, {3}, false);
    backward(sum_all(fake_quant(x, st, act_spec(4))));
    // inside: round(2.3) = 2 ; clamped ends: q_max then q_min
    CHECK(st.step.grad()[0] == doctest::Approx(2.0 + 7.0 + -8.0));
}

TEST_CASE("step gradient matches finite differences away from boundaries") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const QuantSpec spec = trial % 2 == 0 ? act_spec(6) : weight_spec(6);
        const double step = rng.uniform(0.05, 0.8);
        QuantState st = fixed_step(step);
        Tensor x = safe_values(rng, 12, step, spec, 0.05);

        auto build = [&]() {
            return mean_all(mul(fake_quant(x, st, spec), fake_quant(x, st, spec)));
        };
        Tensor loss = build();
        backward(loss);
        auto f = [&]() { return build().item(); };

        const double fd = fd_grad(f, st.step, 0, step * 1e-6);
        CHECK(rel_err(st.step.grad()[0], fd) < 1e-3);
    }
}

TEST_CASE("per-channel fake quant applies one step per channel") {
    QuantSpec pc = act_spec(8, Granularity::PerChannel, 1);
    QuantState st{Tensor::from({0.5, 2.0}, {2}, false)};
    Tensor x = Tensor::from({0.74, 3.1, -0.26, -2.9}, {2, 2});
    Tensor y = fake_quant(x, st, pc);
    CHECK(y.data()[0] == doctest::Approx(0.5 * std::nearbyint(0.74 / 0.5)));
    CHECK(y.data()[1] == doctest::Approx(2.0 * std::nearbyint(3.1 / 2.0)));
    CHECK(y.data()[2] == doctest::Approx(0.5 * std::nearbyint(-0.26 / 0.5)));
    CHECK(y.data()[3] == doctest::Approx(2.0 * std::nearbyint(-2.9 / 2.0)));
}
