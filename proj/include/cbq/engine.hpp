#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbq/model.hpp"
#include "cbq/outlier.hpp"
#include "cbq/rounding.hpp"
#include "cbq/tensor.hpp"

namespace cbq {

struct WindowSchedule {
    struct Range {
        std::size_t first = 1;  // 1-based inclusive
        std::size_t last = 1;
    };
    std::size_t window_size = 2;
    std::size_t overlap = 1;
    std::vector<Range> windows;
};

/// Windows advance by (window_size - overlap); the final window clips at K.
WindowSchedule build_schedule(std::size_t k, std::size_t window_size, std::size_t overlap);

/// Reconstruction distance between two block outputs: per-position L2 norm
/// averaged over positions, plus KL divergence of the feature softmax summed
/// over positions. Probabilities are floored at 1e-12 before the log.
Tensor distance(const Tensor& f1, const Tensor& f2, bool use_kld = true);

struct PipelineConfig {
    int bits_w = 8;
    int bits_a = 8;
    std::size_t window_size = 2;
    std::size_t overlap = 1;
    std::size_t epochs = 3;
    std::size_t batch = 1;
    std::size_t rank = 8;
    double lr_step = 1e-4;
    double lr_v = 0.1;
    std::uint64_t seed = 0;
    OutlierConfig outlier;
    double k_reg = 0.01;
    double beta_start = 20.0;
    double beta_end = 2.0;
    bool enable_cfp = true;
    bool enable_lora = true;
    bool enable_homologous = true;
    bool enable_kld = true;
    bool optimize = true;  // false: plain round-to-init baseline, no updates

    void validate() const;
};

/// Outlier pre-processing record for one linear site.
struct SitePrep {
    std::size_t block = 0;
    Site site = Site::Query;
    std::size_t weights_truncated = 0;
    double weight_trigger = 0.0;
    double weight_cap = 0.0;
    std::size_t channels_scaled = 0;
    ChannelScales scales;
    OutlierReport weight_report;
    OutlierReport act_report;
};

struct WindowStats {
    std::size_t first = 0, last = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

struct PipelineResult {
    ToyModel q_model;  // weights after pre-processing (truncated + folded)
    QuantBindings bindings;
    std::vector<SitePrep> prep;
    std::vector<WindowStats> window_stats;
    std::vector<std::string> metrics_log;
    double initial_recon_error = 0.0;
    double final_recon_error = 0.0;
};

/// The loss optimized inside one window: the average of the normal and
/// homologous reconstruction terms plus the rounding regularizer of every
/// compensation matrix in the window.
Tensor window_loss(const ToyModel& fp_model, const ToyModel& q_model,
                   const QuantBindings& bindings, WindowSchedule::Range w, const Tensor& fp_input,
                   const Tensor& q_input, const RegularizerSchedule& sched, std::size_t iter,
                   bool homologous = true, bool use_kld = true);

/// Cross-block sliding-window optimization: pre-processing, step/compensation
/// init, then window-by-window adaptive-moment updates of step sizes and
/// low-rank rounding factors.
PipelineResult run_pipeline(const ToyModel& fp_model, const std::vector<std::vector<int>>& calib,
                            const PipelineConfig& cfg);

/// Mean reconstruction distance between the floating-point and quantized
/// models at the final block output, over the given sequences.
double full_model_recon_error(const ToyModel& fp_model, const ToyModel& q_model,
                              const QuantBindings& bindings,
                              const std::vector<std::vector<int>>& data, bool use_kld = true);

std::string fmt_g(double v);

}  // namespace cbq
