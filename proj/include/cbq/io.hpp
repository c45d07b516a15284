#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cbq/engine.hpp"
#include "cbq/model.hpp"

namespace cbq {

// ---- token corpus ----------------------------------------------------------

struct TokenFile {
    std::uint32_t vocab = 0;
    std::vector<std::uint16_t> tokens;
};

void write_token_file(const std::string& path, const TokenFile& tf);
TokenFile read_token_file(const std::string& path);

/// Synthetic corpus: Zipf-weighted unigrams mixed with strong bigram
/// successor structure, so a briefly trained model has real signal to learn.
std::vector<std::uint16_t> generate_corpus(std::size_t count, std::size_t vocab,
                                           std::uint64_t seed);

struct CalibrationSet {
    std::vector<std::vector<int>> sequences;
    std::size_t seq_len = 0;
    std::uint64_t seed = 0;
    std::string source;
};

/// N segments of length S sampled at uniformly random offsets; deterministic
/// per seed.
CalibrationSet load_calibration(const std::string& path, std::size_t s, std::size_t n,
                                std::uint64_t seed);

/// Consecutive non-overlapping segments from the start of the stream
/// (deterministic evaluation split).
std::vector<std::vector<int>> eval_segments(const std::string& path, std::size_t s,
                                            std::size_t max_segments);

// ---- floating-point checkpoint ----------------------------------------------

void save_model(const std::string& path, const ToyModel& m);
ToyModel load_model(const std::string& path);

// ---- quantized checkpoint ----------------------------------------------------

struct QuantSiteRecord {
    std::uint32_t rows = 0, cols = 0;
    std::vector<double> w_steps;  // per-tensor: single entry
    std::vector<std::int32_t> codes;
    std::uint8_t x_granularity = 0;  // 0 per-tensor, 1 per-channel
    std::vector<double> x_steps;
    std::vector<double> act_scales;  // empty: no scaling
    std::uint64_t weights_truncated = 0;
    double weight_trigger = 0.0;
    double weight_cap = 0.0;
};

struct QuantBlockFp {
    std::vector<double> ln1_g, ln1_b, bq, bk, bv, bo, ln2_g, ln2_b, b_up, b_down;
};

struct QuantizedCheckpoint {
    ModelConfig config;
    std::int32_t bits_w = 8, bits_a = 8;
    std::vector<double> tok_emb, pos_emb, lnf_g, lnf_b, w_head, b_head;
    std::vector<QuantBlockFp> block_fp;
    std::vector<std::array<QuantSiteRecord, kSiteCount>> sites;
};

/// Write the pipeline artifacts. Compensation matrices are binarized
/// (snapped to the nearest of {0, 1}) and folded into the integer codes, so
/// inference needs only standard dequantization. Codes are bit-packed:
/// nibbles for <= 4 bits, bytes for <= 8, two bytes otherwise. The file ends
/// with a checksum over everything before it.
void save_quantized(const std::string& path, const PipelineResult& result, int bits_w, int bits_a);

QuantizedCheckpoint load_quantized(const std::string& path);

/// Model with dequantized weights plus activation-quantization bindings;
/// running it reproduces the deployed quantized network.
std::pair<ToyModel, QuantBindings> instantiate_checkpoint(const QuantizedCheckpoint& ck);

// ---- evaluation ---------------------------------------------------------------

/// Sum of next-token negative log-likelihoods over one sequence; increments
/// `predictions` by the number of scored positions.
double sequence_nll(const Tensor& logits, const std::vector<int>& tokens,
                    std::size_t& predictions);

/// exp(mean next-token NLL) over the given sequences.
double evaluate_perplexity(const ToyModel& m, const QuantBindings* bindings,
                           const std::vector<std::vector<int>>& sequences);

}  // namespace cbq
