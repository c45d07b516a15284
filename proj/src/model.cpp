#include "cbq/model.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>

#include "cbq/errors.hpp"
#include "cbq/optim.hpp"

namespace cbq {

namespace {

constexpr double kMaskedScore = -1e30;

Tensor causal_mask(std::size_t t) {
    std::vector<double> m(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = kMaskedScore;
    }
    return Tensor::from(std::move(m), {t, t}, false);
}

void record_channel_max(const Tensor& x, std::vector<double>& maxima) {
    const std::size_t t = x.shape()[0], c = x.shape()[1];
    if (maxima.size() != c) maxima.assign(c, 0.0);
    const double* px = x.data().data();
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            maxima[j] = std::max(maxima[j], std::fabs(px[i * c + j]));
        }
    }
}

// A binding may be partial: scales alone (pre-processing calibration), or
// activation quantization alone (running a dequantized checkpoint).
Tensor quant_linear(const Tensor& x, const Tensor& w, const Tensor& b, const SiteQuant* sq,
                    std::vector<double>* stats) {
    Tensor xin = (sq && sq->act_scale.defined()) ? div(x, sq->act_scale) : x;
    if (stats) record_channel_max(xin, *stats);
    Tensor xq = (sq && sq->x_state.step.defined()) ? fake_quant(xin, sq->x_state, sq->x_spec) : xin;
    Tensor wq = w;
    if (sq && sq->w_state.step.defined()) {
        wq = sq->comp ? compensated_quant(w, sq->w_state, *sq->comp, sq->w_spec)
                      : fake_quant(w, sq->w_state, sq->w_spec);
    }
    return add(matmul(xq, wq), b);
}

Tensor leaf_like(const Tensor& t) {
    return Tensor::from(std::vector<double>(t.data().begin(), t.data().end()), t.shape(), false);
}

}  // namespace

void ModelConfig::validate() const {
    if (blocks < 1) throw ConfigError("model needs at least one block");
    if (heads == 0 || hidden % heads != 0) {
        throw ConfigError("hidden size must be divisible by head count");
    }
    if (vocab == 0 || max_seq == 0) throw ConfigError("vocab and sequence length must be positive");
}

const char* site_name(Site s) {
    switch (s) {
        case Site::Query: return "attn_q";
        case Site::Key: return "attn_k";
        case Site::Value: return "attn_v";
        case Site::AttnOut: return "attn_out";
        case Site::MlpUp: return "mlp_up";
        case Site::MlpDown: return "mlp_down";
    }
    return "?";
}

Tensor& BlockParams::weight(Site s) {
    switch (s) {
        case Site::Query: return wq;
        case Site::Key: return wk;
        case Site::Value: return wv;
        case Site::AttnOut: return wo;
        case Site::MlpUp: return w_up;
        case Site::MlpDown: return w_down;
    }
    throw std::logic_error("bad site");
}

const Tensor& BlockParams::weight(Site s) const {
    return const_cast<BlockParams*>(this)->weight(s);
}

std::vector<Tensor> ToyModel::all_params() {
    std::vector<Tensor> ps{tok_emb, pos_emb, lnf_g, lnf_b, w_head, b_head};
    for (auto& b : blocks) {
        for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                          &b.bo, &b.ln2_g, &b.ln2_b, &b.w_up, &b.b_up, &b.w_down, &b.b_down}) {
            ps.push_back(*t);
        }
    }
    return ps;
}

void ToyModel::set_trainable(bool trainable) {
    for (auto& p : all_params()) p.node()->requires_grad = trainable;
}

ToyModel init_model(const ModelConfig& cfg, Rng& rng, bool outlier_channels) {
    cfg.validate();
    const std::size_t h = cfg.hidden, v = cfg.vocab, s = cfg.max_seq, f = cfg.mlp_dim();

    auto randn = [&rng](Shape shape, double stdev) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        std::vector<double> data(n);
        for (double& x : data) x = rng.normal(0.0, stdev);
        return Tensor::from(std::move(data), std::move(shape), false);
    };

    ToyModel m;
    m.config = cfg;
    m.tok_emb = randn({v, h}, 0.05);
    m.pos_emb = randn({s, h}, 0.02);
    m.lnf_g = Tensor::full({h}, 1.0);
    m.lnf_b = Tensor::zeros({h});
    m.w_head = randn({h, v}, 0.05);
    m.b_head = Tensor::zeros({v});
    for (std::size_t bi = 0; bi < cfg.blocks; ++bi) {
        BlockParams b;
        b.ln1_g = Tensor::full({h}, 1.0);
        b.ln1_b = Tensor::zeros({h});
        b.wq = randn({h, h}, 0.05);
        b.bq = Tensor::zeros({h});
        b.wk = randn({h, h}, 0.05);
        b.bk = Tensor::zeros({h});
        b.wv = randn({h, h}, 0.05);
        b.bv = Tensor::zeros({h});
        b.wo = randn({h, h}, 0.05);
        b.bo = Tensor::zeros({h});
        b.ln2_g = Tensor::full({h}, 1.0);
        b.ln2_b = Tensor::zeros({h});
        b.w_up = randn({h, f}, 0.05);
        b.b_up = Tensor::zeros({f});
        b.w_down = randn({f, h}, 0.05);
        b.b_down = Tensor::zeros({h});
        if (outlier_channels) {
            // dominant activation channels and clustered extreme weights,
            // the structure large trained LMs exhibit
            const std::size_t c1 = (11 + 5 * bi) % h;
            const std::size_t c2 = (5 + 7 * bi) % h;
            const std::size_t c3 = (29 + 3 * bi) % h;
            b.ln1_g.data()[c1] = 12.0;
            b.ln2_g.data()[c2] = 16.0;
            b.ln2_g.data()[c3] = 6.0;
            for (Site s : kAllSites) {
                Tensor& w = b.weight(s);
                auto wd = w.data();
                const std::size_t cols = w.shape()[1];
                for (int j = 0; j < 6; ++j) {
                    std::size_t pos = rng.index(wd.size());
                    // keep planted weights out of the dominant-channel rows
                    while (pos / cols == c1 || pos / cols == c2 || pos / cols == c3) {
                        pos = rng.index(wd.size());
                    }
                    wd[pos] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.55, 0.75);
                }
            }
        }
        m.blocks.push_back(std::move(b));
    }
    return m;
}

ToyModel clone_model(const ToyModel& src) {
    ToyModel m;
    m.config = src.config;
    m.tok_emb = leaf_like(src.tok_emb);
    m.pos_emb = leaf_like(src.pos_emb);
    m.lnf_g = leaf_like(src.lnf_g);
    m.lnf_b = leaf_like(src.lnf_b);
    m.w_head = leaf_like(src.w_head);
    m.b_head = leaf_like(src.b_head);
    for (const auto& b : src.blocks) {
        BlockParams c;
        c.ln1_g = leaf_like(b.ln1_g);
        c.ln1_b = leaf_like(b.ln1_b);
        c.wq = leaf_like(b.wq);
        c.bq = leaf_like(b.bq);
        c.wk = leaf_like(b.wk);
        c.bk = leaf_like(b.bk);
        c.wv = leaf_like(b.wv);
        c.bv = leaf_like(b.bv);
        c.wo = leaf_like(b.wo);
        c.bo = leaf_like(b.bo);
        c.ln2_g = leaf_like(b.ln2_g);
        c.ln2_b = leaf_like(b.ln2_b);
        c.w_up = leaf_like(b.w_up);
        c.b_up = leaf_like(b.b_up);
        c.w_down = leaf_like(b.w_down);
        c.b_down = leaf_like(b.b_down);
        m.blocks.push_back(std::move(c));
    }
    return m;
}

Tensor embed_tokens(const ToyModel& m, const std::vector<int>& tokens) {
    if (tokens.empty()) throw DataError("cannot embed an empty token sequence");
    if (tokens.size() > m.config.max_seq) {
        throw DataError("sequence of length " + std::to_string(tokens.size()) +
                        " exceeds maximum " + std::to_string(m.config.max_seq));
    }
    Tensor tok = embedding(m.tok_emb, tokens);
    Tensor pos = slice_rows(m.pos_emb, 0, tokens.size());
    return add(tok, pos);
}

Tensor block_forward(const BlockParams& p, const Tensor& x, const ModelConfig& cfg,
                     const std::array<SiteQuant, kSiteCount>* quant, SiteChannelMax* stats) {
    if (x.shape().size() != 2 || x.shape()[1] != cfg.hidden) {
        throw ShapeError("block input must be [seq x hidden], got " + shape_str(x.shape()));
    }
    const std::size_t t = x.shape()[0];
    const std::size_t dh = cfg.head_dim();
    auto sq = [&](Site s) { return quant ? &(*quant)[static_cast<std::size_t>(s)] : nullptr; };
    auto st = [&](Site s) { return stats ? &(*stats)[static_cast<std::size_t>(s)] : nullptr; };

    Tensor h1 = layer_norm_rows(x, p.ln1_g, p.ln1_b);
    Tensor q = quant_linear(h1, p.wq, p.bq, sq(Site::Query), st(Site::Query));
    Tensor k = quant_linear(h1, p.wk, p.bk, sq(Site::Key), st(Site::Key));
    Tensor v = quant_linear(h1, p.wv, p.bv, sq(Site::Value), st(Site::Value));

    Tensor mask = causal_mask(t);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(cfg.heads);
    for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
        const std::size_t c0 = hh * dh, c1 = c0 + dh;
        Tensor qh = slice_cols(q, c0, c1);
        Tensor kh = slice_cols(k, c0, c1);
        Tensor vh = slice_cols(v, c0, c1);
        Tensor scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), mask);
        Tensor att = softmax_rows(scores);
        heads.push_back(matmul(att, vh));
    }
    Tensor mixed = concat_cols(heads);
    Tensor attn_out = quant_linear(mixed, p.wo, p.bo, sq(Site::AttnOut), st(Site::AttnOut));
    Tensor x1 = add(x, attn_out);

    Tensor h2 = layer_norm_rows(x1, p.ln2_g, p.ln2_b);
    Tensor up = gelu(quant_linear(h2, p.w_up, p.b_up, sq(Site::MlpUp), st(Site::MlpUp)));
    Tensor down = quant_linear(up, p.w_down, p.b_down, sq(Site::MlpDown), st(Site::MlpDown));
    return add(x1, down);
}

Tensor run_blocks(const ToyModel& m, Tensor x, std::size_t from, std::size_t to,
                  const QuantBindings* quant, std::vector<SiteChannelMax>* stats) {
    if (to > m.config.blocks || from > to) throw ConfigError("bad block range");
    if (quant && quant->blocks.size() != m.config.blocks) {
        throw ConfigError("bindings do not cover every block");
    }
    if (stats && stats->size() != m.config.blocks) stats->resize(m.config.blocks);
    for (std::size_t i = from; i < to; ++i) {
        x = block_forward(m.blocks[i], x, m.config, quant ? &quant->blocks[i] : nullptr,
                          stats ? &(*stats)[i] : nullptr);
    }
    return x;
}

Tensor model_forward(const ToyModel& m, const std::vector<int>& tokens,
                     const QuantBindings* quant, std::vector<SiteChannelMax>* stats) {
    Tensor x = embed_tokens(m, tokens);
    x = run_blocks(m, x, 0, m.config.blocks, quant, stats);
    x = layer_norm_rows(x, m.lnf_g, m.lnf_b);
    return add(matmul(x, m.w_head), m.b_head);
}

std::pair<Tensor, Tensor> capture_block_io(const ToyModel& fp_model, const ToyModel& q_model,
                                           const QuantBindings& quant,
                                           const std::vector<int>& tokens, std::size_t l) {
    if (l < 1 || l > fp_model.config.blocks) {
        throw ConfigError("block index " + std::to_string(l) + " outside [1, " +
                          std::to_string(fp_model.config.blocks) + "]");
    }
    Tensor fp_in = run_blocks(fp_model, embed_tokens(fp_model, tokens), 0, l - 1, nullptr);
    Tensor q_in = run_blocks(q_model, embed_tokens(q_model, tokens), 0, l - 1, &quant);
    return {detach(fp_in), detach(q_in)};
}

double train_toy(ToyModel& m, const std::vector<std::vector<int>>& sequences,
                 const TrainSettings& settings) {
    if (sequences.empty()) throw DataError("no training sequences");
    m.set_trainable(true);
    AdamOptimizer opt;
    for (auto& p : m.all_params()) opt.add_param(p, settings.lr);
    Rng rng(settings.seed);

    double last = 0.0;
    for (std::size_t step = 0; step < settings.steps; ++step) {
        opt.zero_grad();
        Tensor loss;
        for (std::size_t b = 0; b < settings.batch; ++b) {
            const auto& seq = sequences[rng.index(sequences.size())];
            if (seq.size() < 2) continue;
            Tensor logits = model_forward(m, seq);
            Tensor lg = slice_rows(logits, 0, seq.size() - 1);
            std::vector<int> targets(seq.begin() + 1, seq.end());
            Tensor nll = cross_entropy_rows(lg, targets);
            loss = loss.defined() ? add(loss, nll) : nll;
        }
        loss = scale(loss, 1.0 / static_cast<double>(settings.batch));
        last = loss.item();
        if (!std::isfinite(last)) throw DivergenceError("training loss became non-finite");
        backward(loss);
        opt.step();
        if (settings.verbose && (step % 50 == 0 || step + 1 == settings.steps)) {
            std::fprintf(stderr, "train step %zu loss %.4f\n", step, last);
        }
    }
    m.set_trainable(false);
    return last;
}

}  // namespace cbq
