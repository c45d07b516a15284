#include <cmath>

#include "cbq/errors.hpp"
#include "cbq/model.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cbq;
using namespace cbqtest;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.vocab = 32;
    cfg.max_seq = 12;
    return cfg;
}

std::vector<int> tokens_for(Rng& rng, const ModelConfig& cfg, std::size_t len) {
    std::vector<int> t(len);
    for (auto& x : t) x = static_cast<int>(rng.index(cfg.vocab));
    return t;
}

QuantBindings make_bindings(const ToyModel& m, int bits_w, int bits_a, std::size_t rank, Rng& rng,
                            const std::vector<std::vector<int>>& calib) {
    QuantBindings qb;
    qb.blocks.resize(m.config.blocks);
    // activation steps from a calibration forward
    std::vector<SiteChannelMax> stats(m.config.blocks);
    for (const auto& seq : calib) {
        run_blocks(m, embed_tokens(m, seq), 0, m.config.blocks, nullptr, &stats);
    }
    for (std::size_t b = 0; b < m.config.blocks; ++b) {
        for (Site s : kAllSites) {
            auto& sq = qb.blocks[b][static_cast<std::size_t>(s)];
            const Tensor& w = m.blocks[b].weight(s);
            sq.w_spec = weight_spec(bits_w);
            sq.w_state = init_step(w, sq.w_spec);
            sq.x_spec = act_spec(bits_a);
            sq.x_state = init_step_from_maxima(stats[b][static_cast<std::size_t>(s)], sq.x_spec);
            if (rank > 0) {
                sq.comp = init_compensation(w, sq.w_state, sq.w_spec, rank, rng);
            }
        }
    }
    return qb;
}

}  // namespace

TEST_CASE("zero weights reduce the block to the identity") {
    ModelConfig cfg = tiny_config();
    Rng rng(1);
    ToyModel m = init_model(cfg, rng, false);
    BlockParams& b = m.blocks[0];
    for (Site s : kAllSites) {
        for (auto& v : b.weight(s).data()) v = 0.0;
    }
    Tensor x = random_tensor(rng, {6, cfg.hidden}, false);
    Tensor y = block_forward(b, x, cfg);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("causal masking: future positions cannot affect the past") {
    ModelConfig cfg = tiny_config();
    Rng rng(2);
    ToyModel m = init_model(cfg, rng, true);
    Tensor x = random_tensor(rng, {8, cfg.hidden}, false);
    Tensor y1 = block_forward(m.blocks[0], x, cfg);

    std::vector<double> perturbed(x.data().begin(), x.data().end());
    for (std::size_t j = 5 * cfg.hidden; j < perturbed.size(); ++j) perturbed[j] += 3.7;
    Tensor y2 = block_forward(m.blocks[0], Tensor::from(perturbed, x.shape()), cfg);

    for (std::size_t i = 0; i < 5 * cfg.hidden; ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("model forward shape, vocabulary check, determinism") {
    ModelConfig cfg = tiny_config();
    Rng rng(3);
    ToyModel m = init_model(cfg, rng, true);
    std::vector<int> toks = tokens_for(rng, cfg, 10);
    Tensor logits = model_forward(m, toks);
    CHECK(logits.shape() == Shape{10, cfg.vocab});

    Tensor again = model_forward(m, toks);
    for (std::size_t i = 0; i < logits.numel(); ++i) CHECK(logits.data()[i] == again.data()[i]);

    std::vector<int> bad = toks;
    bad[0] = static_cast<int>(cfg.vocab);
    CHECK_THROWS(model_forward(m, bad));
    CHECK_THROWS_AS(model_forward(m, tokens_for(rng, cfg, cfg.max_seq + 1)), DataError);
}

TEST_CASE("high-precision quantization approaches the FP forward") {
    ModelConfig cfg = tiny_config();
    Rng rng(4);
    ToyModel m = init_model(cfg, rng, true);
    std::vector<int> toks = tokens_for(rng, cfg, 10);
    QuantBindings qb = make_bindings(m, 16, 16, 0, rng, {toks});

    Tensor fp = model_forward(m, toks);
    Tensor q = model_forward(m, toks, &qb);
    double worst = 0.0;
    for (std::size_t i = 0; i < fp.numel(); ++i) {
        worst = std::max(worst, std::fabs(q.data()[i] - fp.data()[i]) /
                                    std::max(1.0, std::fabs(fp.data()[i])));
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("FP forward unaffected by constructing (not applying) bindings") {
    ModelConfig cfg = tiny_config();
    Rng rng(5);
    ToyModel m = init_model(cfg, rng, true);
    std::vector<int> toks = tokens_for(rng, cfg, 8);
    Tensor before = model_forward(m, toks);
    QuantBindings qb = make_bindings(m, 4, 4, 2, rng, {toks});
    (void)qb;
    Tensor after = model_forward(m, toks);
    for (std::size_t i = 0; i < before.numel(); ++i) CHECK(before.data()[i] == after.data()[i]);
}

TEST_CASE("capture_block_io streams") {
    ModelConfig cfg = tiny_config();
    Rng rng(6);
    ToyModel fp = init_model(cfg, rng, true);
    ToyModel qm = clone_model(fp);
    std::vector<int> toks = tokens_for(rng, cfg, 9);
    QuantBindings qb = make_bindings(qm, 4, 4, 2, rng, {toks});

    auto [fp1, q1] = capture_block_io(fp, qm, qb, toks, 1);
    CHECK(fp1.shape() == Shape{9, cfg.hidden});
    CHECK(q1.shape() == Shape{9, cfg.hidden});
    for (std::size_t i = 0; i < fp1.numel(); ++i) CHECK(fp1.data()[i] == q1.data()[i]);
    CHECK_FALSE(fp1.requires_grad());

    auto [fp2, q2] = capture_block_io(fp, qm, qb, toks, 2);
    bool diverged = false;
    for (std::size_t i = 0; i < fp2.numel(); ++i) diverged |= fp2.data()[i] != q2.data()[i];
    CHECK(diverged);

    CHECK_THROWS_AS(capture_block_io(fp, qm, qb, toks, 3), ConfigError);
    CHECK_THROWS_AS(capture_block_io(fp, qm, qb, toks, 0), ConfigError);
}

TEST_CASE("brief training reduces the loss") {
    ModelConfig cfg = tiny_config();
    Rng rng(7);
    ToyModel m = init_model(cfg, rng, true);
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < 16; ++i) {
        // strongly structured sequences
        std::vector<int> s(cfg.max_seq);
        int t = static_cast<int>(rng.index(cfg.vocab));
        for (auto& x : s) {
            x = t;
            t = (3 * t + 1) % static_cast<int>(cfg.vocab);
        }
        seqs.push_back(std::move(s));
    }
    TrainSettings ts;
    ts.steps = 60;
    ts.batch = 4;
    ts.lr = 3e-3;
    const double initial = std::log(static_cast<double>(cfg.vocab));
    const double final_loss = train_toy(m, seqs, ts);
    CHECK(final_loss < initial);
    // parameters are frozen again afterwards
    CHECK_FALSE(m.tok_emb.requires_grad());
}
