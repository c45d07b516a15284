#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "cbq/quantizer.hpp"
#include "cbq/rng.hpp"
#include "cbq/rounding.hpp"
#include "cbq/tensor.hpp"

namespace cbq {

struct ModelConfig {
    std::size_t blocks = 6;    // K
    std::size_t hidden = 64;   // H
    std::size_t heads = 4;     // h
    std::size_t vocab = 512;   // V
    std::size_t max_seq = 64;  // S
    void validate() const;
    std::size_t head_dim() const { return hidden / heads; }
    std::size_t mlp_dim() const { return 4 * hidden; }
};

// Quantized linear layers inside a block. Layer norms, biases, attention
// softmax, embeddings and the vocabulary head stay floating-point.
enum class Site : std::size_t { Query = 0, Key, Value, AttnOut, MlpUp, MlpDown };
constexpr std::size_t kSiteCount = 6;
constexpr std::array<Site, kSiteCount> kAllSites = {Site::Query,   Site::Key,   Site::Value,
                                                    Site::AttnOut, Site::MlpUp, Site::MlpDown};
const char* site_name(Site s);

struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w_up, b_up, w_down, b_down;

    Tensor& weight(Site s);
    const Tensor& weight(Site s) const;
};

/// Pre-layer-norm decoder transformer: embedding + learned positions,
/// K blocks of causal attention and a GELU MLP, final norm, vocab head.
struct ToyModel {
    ModelConfig config;
    Tensor tok_emb;  // [V x H]
    Tensor pos_emb;  // [S x H]
    std::vector<BlockParams> blocks;
    Tensor lnf_g, lnf_b;
    Tensor w_head, b_head;

    std::vector<Tensor> all_params();
    void set_trainable(bool trainable);
};

/// Fresh model with seeded initialization. With `outlier_channels` a few
/// layer-norm gains start elevated so trained checkpoints exhibit the
/// channel-outlier structure typical of transformer language models.
ToyModel init_model(const ModelConfig& cfg, Rng& rng, bool outlier_channels = true);

/// Deep copy; the copy's parameters are fresh non-trainable leaves.
ToyModel clone_model(const ToyModel& m);

/// Quantization binding for one linear site: activation scaling divisors
/// (from outlier pre-processing), the activation quantizer, and the weight
/// quantizer with optional rounding compensation.
struct SiteQuant {
    QuantSpec w_spec;
    QuantState w_state;
    std::optional<RoundingCompensation> comp;
    QuantSpec x_spec;
    QuantState x_state;
    Tensor act_scale;  // [in-channels]; undefined when no scaling applies
};

struct QuantBindings {
    std::vector<std::array<SiteQuant, kSiteCount>> blocks;
};

/// Running per-channel absolute maxima of each site's input activations,
/// collected during calibration forwards.
using SiteChannelMax = std::array<std::vector<double>, kSiteCount>;

Tensor embed_tokens(const ToyModel& m, const std::vector<int>& tokens);

/// One transformer block; with a binding every linear runs on quantized
/// weights and quantized (scaled) input activations.
Tensor block_forward(const BlockParams& p, const Tensor& x, const ModelConfig& cfg,
                     const std::array<SiteQuant, kSiteCount>* quant = nullptr,
                     SiteChannelMax* stats = nullptr);

/// Blocks [from, to) applied in sequence (0-based indices).
Tensor run_blocks(const ToyModel& m, Tensor x, std::size_t from, std::size_t to,
                  const QuantBindings* quant = nullptr,
                  std::vector<SiteChannelMax>* stats = nullptr);

Tensor model_forward(const ToyModel& m, const std::vector<int>& tokens,
                     const QuantBindings* quant = nullptr,
                     std::vector<SiteChannelMax>* stats = nullptr);

/// Inputs feeding block l (1-based) on the floating-point path and on the
/// quantized path, recorded without gradient history. At l = 1 both streams
/// are the shared embedding output.
std::pair<Tensor, Tensor> capture_block_io(const ToyModel& fp_model, const ToyModel& q_model,
                                           const QuantBindings& quant,
                                           const std::vector<int>& tokens, std::size_t l);

struct TrainSettings {
    std::size_t steps = 600;
    std::size_t batch = 8;
    double lr = 3e-3;
    std::uint64_t seed = 0;
    bool verbose = false;
};

/// Brief next-token training on a token corpus so reconstruction targets
/// are non-degenerate. Returns final training loss.
double train_toy(ToyModel& m, const std::vector<std::vector<int>>& sequences,
                 const TrainSettings& settings);

}  // namespace cbq
