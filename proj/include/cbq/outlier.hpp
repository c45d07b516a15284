#pragma once

#include <optional>
#include <vector>

#include "cbq/tensor.hpp"

namespace cbq {

struct OutlierConfig {
    double lambda1 = 1.5;
    double lambda2 = 1.0;
    void validate() const;
};

/// Two-stage detection record. Detection runs on magnitudes: the whole
/// |W| distribution for weights, the per-channel absolute maxima for
/// activations.
struct OutlierReport {
    double q1 = 0.0;
    double q3 = 0.0;
    double iqr = 0.0;
    double coarse_threshold = 0.0;         // T = Q3 + lambda1 * IQR
    std::vector<double> coarse_set;        // O, ascending
    std::vector<double> final_outliers;    // O*, ascending
    std::size_t split_index = 0;           // chosen split inside O
    double m_intra = 0.0;
    double m_inter = 0.0;
    std::optional<double> split_metric;    // M*; empty when |O| <= 1
    double reserved_max = 0.0;             // max of values not in O*

    bool has_outliers() const { return !final_outliers.empty(); }
};

struct CoarseDetection {
    double q1 = 0.0, q3 = 0.0, iqr = 0.0, threshold = 0.0;
    std::vector<double> outliers;  // ascending
};

struct FineDetection {
    std::vector<double> outliers;  // ascending
    std::size_t split_index = 0;
    double m_intra = 0.0;
    double m_inter = 0.0;
    std::optional<double> metric;
};

/// Quartiles by direct integer indexing into the sorted data (Q1 = x[n/4],
/// Q3 = x[3n/4]); O = { x : x > Q3 + lambda1 * IQR }. Requires n >= 4.
CoarseDetection detect_coarse(const std::vector<double>& sorted_values, const OutlierConfig& cfg);

/// Scans split indices 1..|O|-1, maximizing
/// M = (min(O_outlier) - max(O_reserved))^2 - lambda2 * var(O_reserved)
/// with population variance; ties go to the lowest split index. A set of
/// size <= 1 is returned whole with no metric.
FineDetection detect_fine(const std::vector<double>& sorted_outliers, const OutlierConfig& cfg);

/// Full pipeline over raw (unsorted) magnitudes.
OutlierReport detect_outliers(std::vector<double> values, const OutlierConfig& cfg);

/// Elements whose magnitude falls in O* are replaced by
/// sign(w) * reserved_max; everything else is untouched.
Tensor truncate_weights(const Tensor& w, const OutlierReport& report);

struct ChannelScales {
    std::vector<double> s;  // one per channel, 1.0 where nothing was flagged
};

/// Scales for channels whose calibration maximum landed in O*:
/// s_i = max|x_i| / reserved_max, so the scaled channel peaks exactly at the
/// reserved range. Degenerate reserved_max <= 0 leaves the channel alone.
ChannelScales channel_scales(const std::vector<double>& channel_maxima,
                             const OutlierReport& report);

/// Exact migration: at inference channel i is divided by s_i, so row i of
/// the consuming weight matrix [C x out] is multiplied by s_i here. The
/// floating-point product is unchanged up to accumulation rounding.
Tensor scale_activations_into_weights(const Tensor& w_next, const ChannelScales& scales);

}  // namespace cbq
