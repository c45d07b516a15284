#include <cmath>

#include "cbq/tensor.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cbq;
using namespace cbqtest;

TEST_CASE("elementwise add and scalar annihilator") {
    Tensor a = Tensor::from({1, 2}, {2});
    Tensor b = Tensor::from({3, 4}, {2});
    Tensor c = add(a, b);
    CHECK(c.data()[0] == 4.0);
    CHECK(c.data()[1] == 6.0);

    Tensor d = scale(Tensor::from({2, 3}, {2}), 0.0);
    CHECK(d.data()[0] == 0.0);
    CHECK(d.data()[1] == 0.0);
}

TEST_CASE("add backward is the identity gradient") {
    Tensor a = Tensor::from({1, 2, 3}, {3}, true);
    Tensor b = Tensor::from({4, 5, 6}, {3}, true);
    backward(sum_all(add(a, b)));
    for (double g : a.grad()) CHECK(g == 1.0);
    for (double g : b.grad()) CHECK(g == 1.0);
}

TEST_CASE("shape mismatch reports both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2 x 3]"), ShapeError);
    try {
        add(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("[4 x 2]") != std::string::npos);
    }
}

TEST_CASE("matmul basics") {
    Tensor eye = Tensor::from({1, 0, 0, 1}, {2, 2});
    Tensor m = Tensor::from({5, 6, 7, 8}, {2, 2});
    Tensor r = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({3, 4}, {2, 1});
    CHECK(matmul(a, b).item() == 11.0);

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {4, 2});
    Tensor loss = sum_all(matmul(a, b));
    backward(loss);
    auto f = [&]() { return sum_all(matmul(a, b)).item(); };
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(rel_err(a.grad()[i], fd_grad(f, a, i)) < 1e-5);
    }
    for (std::size_t i = 0; i < b.numel(); ++i) {
        CHECK(rel_err(b.grad()[i], fd_grad(f, b, i)) < 1e-5);
    }
}

TEST_CASE("softmax properties") {
    Tensor s = softmax_rows(Tensor::from({0, 0}, {2}));
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));

    Tensor x = Tensor::from({1, 2, 3}, {3});
    Tensor shifted = softmax_rows(shift(x, 17.5));
    Tensor plain = softmax_rows(x);
    double sum = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(rel_err(shifted.data()[i], plain.data()[i]) < 1e-12);
        sum += plain.data()[i];
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("backward examples") {
    Tensor x = Tensor::from({1, 2, 3, 4}, {2, 2}, true);
    backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor y = Tensor::from({1, 2}, {2}, true);
    backward(sum_all(mul(y, y)));
    CHECK(y.grad()[0] == 2.0);
    CHECK(y.grad()[1] == 4.0);

    CHECK_THROWS_AS(backward(Tensor::from({1, 2}, {2}, true)), ShapeError);
}

TEST_CASE("composite loss gradient matches finite differences") {
    Rng rng(11);
    Tensor a = random_tensor(rng, {4, 3}, true, 0.5);
    Tensor b = random_tensor(rng, {3, 5}, true, 0.5);
    Tensor c = random_tensor(rng, {5}, true, 0.5);
    auto build = [&]() {
        Tensor h = gelu(add(matmul(a, b), c));
        return mean_all(mul(h, h));
    };
    Tensor loss = build();
    backward(loss);
    auto f = [&]() { return build().item(); };
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(rel_err(a.grad()[i], fd_grad(f, a, i)) < 1e-4);
    for (std::size_t i = 0; i < c.numel(); ++i) CHECK(rel_err(c.grad()[i], fd_grad(f, c, i)) < 1e-4);
}

TEST_CASE("unary op gradients match finite differences away from kinks") {
    Rng rng(13);
    struct Case {
        const char* name;
        std::function<Tensor(const Tensor&)> op;
    };
    const std::vector<Case> cases = {
        {"sigmoid", [](const Tensor& t) { return sigmoid(t); }},
        {"exp", [](const Tensor& t) { return exp_t(t); }},
        {"gelu", [](const Tensor& t) { return gelu(t); }},
        {"softmax", [](const Tensor& t) { return softmax_rows(t); }},
        {"abs", [](const Tensor& t) { return abs_t(t); }},
        {"pow2.5", [](const Tensor& t) { return pow_scalar(abs_t(t), 2.5); }},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        Tensor x = random_tensor(rng, {3, 4});
        // keep |x| away from zero so abs/pow stay smooth
        for (auto& v : x.data()) {
            if (std::fabs(v) < 0.2) v += v >= 0 ? 0.3 : -0.3;
        }
        Tensor loss = mean_all(c.op(x));
        backward(loss);
        auto f = [&]() { return mean_all(c.op(x)).item(); };
        for (std::size_t i = 0; i < x.numel(); ++i) {
            CHECK(rel_err(x.grad()[i], fd_grad(f, x, i)) < 1e-4);
        }
    }
}

TEST_CASE("layer norm gradient and statistics") {
    Rng rng(17);
    Tensor x = random_tensor(rng, {4, 16});
    Tensor g = random_tensor(rng, {16}, true, 0.3);
    Tensor b = random_tensor(rng, {16}, true, 0.3);
    Tensor loss = mean_all(mul(layer_norm_rows(x, g, b), layer_norm_rows(x, g, b)));
    backward(loss);
    auto f = [&]() {
        return mean_all(mul(layer_norm_rows(x, g, b), layer_norm_rows(x, g, b))).item();
    };
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(rel_err(x.grad()[i], fd_grad(f, x, i)) < 1e-4);
    for (std::size_t i = 0; i < 16; ++i) CHECK(rel_err(g.grad()[i], fd_grad(f, g, i)) < 1e-4);

    // pre-affine rows are standardized
    Tensor ones = Tensor::full({16}, 1.0);
    Tensor zeros = Tensor::zeros({16});
    Tensor norm = layer_norm_rows(x, ones, zeros);
    for (std::size_t r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < 16; ++j) mean += norm.data()[r * 16 + j];
        mean /= 16;
        for (std::size_t j = 0; j < 16; ++j) {
            const double d = norm.data()[r * 16 + j] - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::fabs(mean) < 1e-6);
        CHECK(std::fabs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("straight-through estimator") {
    Tensor x = Tensor::from({0.4, 1.6, -2.3}, {3}, true);
    std::vector<double> rounded;
    for (double v : x.data()) rounded.push_back(std::nearbyint(v));
    Tensor fv = Tensor::from(rounded, {3});

    Tensor st = straight_through(fv, x);
    CHECK(st.data()[0] == 0.0);
    CHECK(st.data()[1] == 2.0);
    CHECK(st.data()[2] == -2.0);

    backward(sum_all(st));
    for (double g : x.grad()) CHECK(g == 1.0);

    // gradient never reaches the forward-value path
    Tensor y = Tensor::from({1.0, 2.0}, {2}, true);
    Tensor fwd = scale(y, 3.0);
    Tensor carrier = Tensor::from({0.0, 0.0}, {2}, true);
    backward(sum_all(straight_through(fwd, carrier)));
    CHECK_FALSE(y.has_grad());
    for (double g : carrier.grad()) CHECK(g == 1.0);

    CHECK_THROWS_AS(straight_through(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("broadcasting matches scalar reference loop") {
    Rng rng(23);
    const std::vector<std::pair<Shape, Shape>> shapes = {
        {{3, 4}, {4}}, {{3, 4}, {1}}, {{4}, {4}},   {{1}, {5}},
        {{2, 5}, {2, 5}}, {{5}, {2, 5}}, {{2, 1}, {2, 4}}, {{1, 4}, {3, 4}},
    };
    const char ops[] = {'+', '-', '*', '/'};
    for (const auto& [sa, sb] : shapes) {
        for (char op : ops) {
            Tensor a = random_tensor(rng, sa, false);
            Tensor b = random_tensor(rng, sb, false);
            if (op == '/') {
                for (auto& v : b.data()) v = v >= 0 ? v + 1.0 : v - 1.0;
            }
            std::vector<double> av(a.data().begin(), a.data().end());
            std::vector<double> bv(b.data().begin(), b.data().end());
            Shape ref_shape;
            auto want = ref_broadcast_op(op, sa, av, sb, bv, ref_shape);
            Tensor got = op == '+'   ? add(a, b)
                         : op == '-' ? sub(a, b)
                         : op == '*' ? mul(a, b)
                                     : div(a, b);
            REQUIRE(got.shape() == ref_shape);
            for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.data()[i] == want[i]);
        }
    }
}

TEST_CASE("broadcast gradients reduce over expanded dimensions") {
    Rng rng(29);
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {4});
    Tensor loss = sum_all(mul(a, b));
    backward(loss);
    auto f = [&]() { return sum_all(mul(a, b)).item(); };
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(rel_err(b.grad()[i], fd_grad(f, b, i)) < 1e-6);
}

TEST_CASE("forward determinism") {
    Rng rng1(99), rng2(99);
    Tensor a1 = random_tensor(rng1, {8, 8}, false);
    Tensor a2 = random_tensor(rng2, {8, 8}, false);
    Tensor r1 = softmax_rows(matmul(a1, a1));
    Tensor r2 = softmax_rows(matmul(a2, a2));
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1.data()[i] == r2.data()[i]);
}

TEST_CASE("unreachable tensors hold no gradient") {
    Tensor a = Tensor::from({1, 2}, {2}, true);
    Tensor b = Tensor::from({3, 4}, {2}, true);
    backward(sum_all(mul(a, a)));
    CHECK(a.has_grad());
    CHECK_FALSE(b.has_grad());
}

TEST_CASE("slice and concat round trip gradients") {
    Rng rng(31);
    Tensor x = random_tensor(rng, {4, 6});
    Tensor left = slice_cols(x, 0, 3);
    Tensor right = slice_cols(x, 3, 6);
    Tensor back = concat_cols({left, right});
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
    backward(sum_all(mul(back, back)));
    auto f = [&]() {
        Tensor l2 = slice_cols(x, 0, 3);
        Tensor r2 = slice_cols(x, 3, 6);
        return sum_all(mul(concat_cols({l2, r2}), concat_cols({l2, r2}))).item();
    };
    for (std::size_t i = 0; i < 6; ++i) CHECK(rel_err(x.grad()[i], fd_grad(f, x, i)) < 1e-5);
}

TEST_CASE("clamp subgradient convention") {
    Tensor x = Tensor::from({-2.0, 0.0, 0.5, 1.0, 3.0}, {5}, true);
    backward(sum_all(clamp(x, 0.0, 1.0)));
    CHECK(x.grad()[0] == 0.0);  // below
    CHECK(x.grad()[1] == 0.0);  // exact boundary
    CHECK(x.grad()[2] == 1.0);  // strictly inside
    CHECK(x.grad()[3] == 0.0);  // exact boundary
    CHECK(x.grad()[4] == 0.0);  // above
}
