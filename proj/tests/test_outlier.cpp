#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "cbq/errors.hpp"
#include "cbq/outlier.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cbq;
using namespace cbqtest;

namespace {

// Independent exhaustive oracle: filter by T, enumerate every split,
// recompute both metric parts directly, lowest split index wins ties.
struct OracleResult {
    std::vector<double> ostar;
    std::optional<double> metric;
};

OracleResult oracle(std::vector<double> values, double lambda1, double lambda2) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    const double q1 = values[n / 4];
    const double q3 = values[3 * n / 4];
    const double t = q3 + lambda1 * (q3 - q1);
    std::vector<double> o;
    for (double x : values) {
        if (x > t) o.push_back(x);
    }
    if (o.size() <= 1) return {o, std::nullopt};
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = 1;
    for (std::size_t i = 1; i < o.size(); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < i; ++j) mean += o[j];
        mean /= static_cast<double>(i);
        double var = 0.0;
        for (std::size_t j = 0; j < i; ++j) var += (o[j] - mean) * (o[j] - mean);
        var /= static_cast<double>(i);
        double lo = o[i];
        double hi = o[i - 1];
        const double m = (lo - hi) * (lo - hi) - lambda2 * var;
        if (m > best) {
            best = m;
            best_i = i;
        }
    }
    return {{o.begin() + static_cast<std::ptrdiff_t>(best_i), o.end()}, best};
}

std::vector<double> heavy_tailed(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) {
        const double u = rng.uniform();
        if (u < 0.9) {
            x = std::fabs(rng.normal());
        } else if (u < 0.97) {
            x = std::fabs(rng.normal()) * 5.0;
        } else {
            x = rng.uniform(8.0, 60.0);
        }
    }
    return v;
}

}  // namespace

TEST_CASE("coarse detection examples") {
    OutlierConfig cfg;
    CoarseDetection c = detect_coarse({1, 2, 3, 4, 100}, cfg);
    CHECK(c.q1 == 2);
    CHECK(c.q3 == 4);
    CHECK(c.iqr == 2);
    CHECK(c.threshold == 7);
    REQUIRE(c.outliers.size() == 1);
    CHECK(c.outliers[0] == 100);

    CoarseDetection flat = detect_coarse({1, 1, 1, 1}, cfg);
    CHECK(flat.iqr == 0);
    CHECK(flat.threshold == 1);
    CHECK(flat.outliers.empty());

    CHECK_THROWS_AS(detect_coarse({1, 2, 3}, cfg), DataError);
}

TEST_CASE("fine detection hand example") {
    OutlierConfig cfg;  // lambda2 = 1
    FineDetection f = detect_fine({8, 9, 50, 60}, cfg);
    REQUIRE(f.outliers.size() == 2);
    CHECK(f.outliers[0] == 50);
    CHECK(f.outliers[1] == 60);
    CHECK(f.split_index == 2);
    CHECK(*f.metric == doctest::Approx(1680.75));

    FineDetection single = detect_fine({5}, cfg);
    REQUIRE(single.outliers.size() == 1);
    CHECK(single.outliers[0] == 5);
    CHECK_FALSE(single.metric.has_value());
}

TEST_CASE("coarse outliers equal a brute-force filter") {
    Rng rng(3);
    OutlierConfig cfg;
    for (int trial = 0; trial < 200; ++trial) {
        auto v = heavy_tailed(rng, 4 + rng.index(400));
        std::sort(v.begin(), v.end());
        CoarseDetection c = detect_coarse(v, cfg);
        std::vector<double> want;
        for (double x : v) {
            if (x > c.threshold) want.push_back(x);
        }
        CHECK(c.outliers == want);
    }
}

TEST_CASE("detection equals the exhaustive split oracle") {
    Rng rng(4);
    OutlierConfig cfg;
    for (int trial = 0; trial < 300; ++trial) {
        auto v = heavy_tailed(rng, 4 + rng.index(2000));
        OutlierReport rep = detect_outliers(v, cfg);
        OracleResult want = oracle(v, cfg.lambda1, cfg.lambda2);
        CHECK(rep.final_outliers == want.ostar);
        CHECK(rep.split_metric.has_value() == want.metric.has_value());
        if (want.metric) CHECK(*rep.split_metric == *want.metric);
        if (rep.has_outliers()) {
            CHECK(rep.final_outliers.front() > rep.reserved_max);
        }
    }
}

TEST_CASE("weight truncation") {
    OutlierReport rep;
    rep.final_outliers = {100.0};
    rep.reserved_max = 2.0;
    Tensor w = Tensor::from({1, 2, -100}, {3});
    Tensor t = truncate_weights(w, rep);
    CHECK(t.data()[0] == 1.0);
    CHECK(t.data()[1] == 2.0);
    CHECK(t.data()[2] == -2.0);

    OutlierReport none;
    Tensor same = truncate_weights(w, none);
    for (std::size_t i = 0; i < 3; ++i) CHECK(same.data()[i] == w.data()[i]);
}

TEST_CASE("truncation caps the maximum and preserves the rest") {
    Rng rng(8);
    OutlierConfig cfg;
    for (int trial = 0; trial < 100; ++trial) {
        auto v = heavy_tailed(rng, 64);
        std::vector<double> signed_w = v;
        for (auto& x : signed_w) {
            if (rng.uniform() < 0.5) x = -x;
        }
        OutlierReport rep = detect_outliers(v, cfg);
        Tensor w = Tensor::from(signed_w, {64});
        Tensor t = truncate_weights(w, rep);
        double mx = 0.0;
        for (std::size_t i = 0; i < 64; ++i) {
            mx = std::max(mx, std::fabs(t.data()[i]));
            if (!rep.has_outliers() || std::fabs(w.data()[i]) < rep.final_outliers.front()) {
                CHECK(t.data()[i] == w.data()[i]);
            }
        }
        if (rep.has_outliers()) CHECK(mx == doctest::Approx(rep.reserved_max));
        CHECK(mx <= std::fabs(*std::max_element(signed_w.begin(), signed_w.end(),
                                                [](double a, double b) {
                                                    return std::fabs(a) < std::fabs(b);
                                                })) +
                        1e-15);
    }
}

TEST_CASE("channel scales examples") {
    OutlierReport rep;
    rep.final_outliers = {8.0};
    rep.reserved_max = 2.0;
    ChannelScales sc = channel_scales({8.0, 1.0}, rep);
    CHECK(sc.s[0] == doctest::Approx(4.0));
    CHECK(sc.s[1] == 1.0);

    OutlierReport none;
    ChannelScales flat = channel_scales({3.0, 1.0}, none);
    CHECK(flat.s[0] == 1.0);
    CHECK(flat.s[1] == 1.0);

    OutlierReport degenerate;
    degenerate.final_outliers = {5.0};
    degenerate.reserved_max = 0.0;
    ChannelScales guard = channel_scales({5.0}, degenerate);
    CHECK(guard.s[0] == 1.0);
}

TEST_CASE("scale migration keeps the product unchanged") {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t c = 2 + rng.index(30);
        const std::size_t out = 1 + rng.index(20);
        const std::size_t rows = 1 + rng.index(8);
        Tensor x = random_tensor(rng, {rows, c}, false, 2.0);
        Tensor w = random_tensor(rng, {c, out}, false, 1.0);
        ChannelScales sc;
        sc.s.resize(c);
        for (auto& s : sc.s) s = rng.uniform() < 0.3 ? rng.uniform(1.0, 20.0) : 1.0;
        Tensor scale_t = Tensor::from(sc.s, {c});

        Tensor before = matmul(x, w);
        Tensor after = matmul(div(x, scale_t), scale_activations_into_weights(w, sc));
        for (std::size_t i = 0; i < before.numel(); ++i) {
            CHECK(rel_err(after.data()[i], before.data()[i]) < 1e-12);
        }
    }
}

TEST_CASE("scaled channels peak at the reserved maximum") {
    Rng rng(19);
    OutlierConfig cfg;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> maxima = heavy_tailed(rng, 64);
        OutlierReport rep = detect_outliers(maxima, cfg);
        ChannelScales sc = channel_scales(maxima, rep);
        for (std::size_t i = 0; i < maxima.size(); ++i) {
            CHECK(sc.s[i] >= 1.0 - 1e-12);
            CHECK(std::isfinite(sc.s[i]));
            if (sc.s[i] != 1.0) {
                CHECK(rel_err(maxima[i] / sc.s[i], rep.reserved_max) < 1e-9);
            }
        }
    }
}

TEST_CASE("config validation") {
    OutlierConfig bad1;
    bad1.lambda1 = 0.0;
    CHECK_THROWS_AS(bad1.validate(), ConfigError);
    OutlierConfig bad2;
    bad2.lambda2 = -1.0;
    CHECK_THROWS_AS(bad2.validate(), ConfigError);
}
