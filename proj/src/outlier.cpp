#include "cbq/outlier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cbq/errors.hpp"

namespace cbq {

namespace {

// Two-pass population variance, summed left to right.
double population_var(const double* x, std::size_t n) {
    if (n == 0) return 0.0;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    return var / static_cast<double>(n);
}

}  // namespace

void OutlierConfig::validate() const {
    if (!(lambda1 > 0.0)) throw ConfigError("lambda1 must be positive");
    if (lambda2 < 0.0) throw ConfigError("lambda2 must be non-negative");
}

CoarseDetection detect_coarse(const std::vector<double>& sorted_values,
                              const OutlierConfig& cfg) {
    cfg.validate();
    const std::size_t n = sorted_values.size();
    if (n < 4) throw DataError("coarse detection needs at least 4 values");
    CoarseDetection r;
    r.q1 = sorted_values[n / 4];
    r.q3 = sorted_values[3 * n / 4];
    r.iqr = r.q3 - r.q1;
    r.threshold = r.q3 + cfg.lambda1 * r.iqr;
    for (double x : sorted_values) {
        if (x > r.threshold) r.outliers.push_back(x);
    }
    return r;
}

FineDetection detect_fine(const std::vector<double>& sorted_outliers, const OutlierConfig& cfg) {
    cfg.validate();
    FineDetection r;
    const std::size_t m = sorted_outliers.size();
    if (m <= 1) {
        r.outliers = sorted_outliers;
        return r;
    }
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = 1;
    double best_intra = 0.0, best_inter = 0.0;
    for (std::size_t i = 1; i < m; ++i) {
        const double intra = population_var(sorted_outliers.data(), i);
        const double gap = sorted_outliers[i] - sorted_outliers[i - 1];
        const double inter = gap * gap;
        const double metric = inter - cfg.lambda2 * intra;
        if (metric > best) {
            best = metric;
            best_i = i;
            best_intra = intra;
            best_inter = inter;
        }
    }
    r.outliers.assign(sorted_outliers.begin() + static_cast<std::ptrdiff_t>(best_i),
                      sorted_outliers.end());
    r.split_index = best_i;
    r.m_intra = best_intra;
    r.m_inter = best_inter;
    r.metric = best;
    return r;
}

OutlierReport detect_outliers(std::vector<double> values, const OutlierConfig& cfg) {
    std::sort(values.begin(), values.end());
    const auto coarse = detect_coarse(values, cfg);
    const auto fine = detect_fine(coarse.outliers, cfg);

    OutlierReport rep;
    rep.q1 = coarse.q1;
    rep.q3 = coarse.q3;
    rep.iqr = coarse.iqr;
    rep.coarse_threshold = coarse.threshold;
    rep.coarse_set = coarse.outliers;
    rep.final_outliers = fine.outliers;
    rep.split_index = fine.split_index;
    rep.m_intra = fine.m_intra;
    rep.m_inter = fine.m_inter;
    rep.split_metric = fine.metric;
    const std::size_t reserved = values.size() - rep.final_outliers.size();
    rep.reserved_max = reserved > 0 ? values[reserved - 1] : 0.0;
    return rep;
}

Tensor truncate_weights(const Tensor& w, const OutlierReport& report) {
    std::vector<double> out(w.data().begin(), w.data().end());
    if (report.has_outliers()) {
        const double trigger = report.final_outliers.front();
        const double cap = report.reserved_max;
        for (double& x : out) {
            if (std::fabs(x) >= trigger) x = std::copysign(cap, x);
        }
    }
    return Tensor::from(std::move(out), w.shape(), false);
}

ChannelScales channel_scales(const std::vector<double>& channel_maxima,
                             const OutlierReport& report) {
    ChannelScales sc;
    sc.s.assign(channel_maxima.size(), 1.0);
    if (!report.has_outliers() || report.reserved_max <= 0.0) return sc;
    const double trigger = report.final_outliers.front();
    for (std::size_t i = 0; i < channel_maxima.size(); ++i) {
        if (channel_maxima[i] >= trigger) sc.s[i] = channel_maxima[i] / report.reserved_max;
    }
    return sc;
}

Tensor scale_activations_into_weights(const Tensor& w_next, const ChannelScales& scales) {
    if (w_next.shape().size() != 2 || w_next.shape()[0] != scales.s.size()) {
        throw ShapeError("weight rows do not match channel count");
    }
    const std::size_t c = w_next.shape()[0], k = w_next.shape()[1];
    std::vector<double> out(w_next.data().begin(), w_next.data().end());
    for (std::size_t i = 0; i < c; ++i) {
        const double s = scales.s[i];
        if (s == 1.0) continue;
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] *= s;
    }
    return Tensor::from(std::move(out), w_next.shape(), false);
}

}  // namespace cbq
