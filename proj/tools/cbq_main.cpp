#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cbq/engine.hpp"
#include "cbq/errors.hpp"
#include "cbq/io.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;

// exit codes: 0 ok, 2 config, 3 data, 4 numerical divergence, 5 io
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitIo = 5;

struct RunConfig {
    std::string model_path;
    std::string calib_path;
    std::string eval_path;
    std::string out_path;
    std::string metrics_path;
    std::string loss_data_path;
    cbq::PipelineConfig pipe;
    std::size_t calib_count = 32;
    std::size_t calib_len = 32;
    bool rtn = false;
};

void add_pipeline_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--bits-weight", rc.pipe.bits_w, "Weight bit-width")->capture_default_str();
    cmd->add_option("--bits-act", rc.pipe.bits_a, "Activation bit-width")->capture_default_str();
    cmd->add_option("--window-size", rc.pipe.window_size, "Blocks per sliding window")
        ->capture_default_str();
    cmd->add_option("--overlap", rc.pipe.overlap, "Blocks shared by consecutive windows")
        ->capture_default_str();
    cmd->add_option("--epochs", rc.pipe.epochs, "Epochs per window")->capture_default_str();
    cmd->add_option("--batch", rc.pipe.batch, "Calibration minibatch size")->capture_default_str();
    cmd->add_option("--rank", rc.pipe.rank, "Rank of the rounding-compensation factors")
        ->capture_default_str();
    cmd->add_option("--lr-step", rc.pipe.lr_step, "Learning rate for step sizes")
        ->capture_default_str();
    cmd->add_option("--lr-v", rc.pipe.lr_v, "Learning rate for compensation factors")
        ->capture_default_str();
    cmd->add_option("--seed", rc.pipe.seed, "Seed for sampling and initialization")
        ->capture_default_str();
    cmd->add_option("--lambda1", rc.pipe.outlier.lambda1, "Coarse outlier threshold factor")
        ->capture_default_str();
    cmd->add_option("--lambda2", rc.pipe.outlier.lambda2, "Fine outlier variance weight")
        ->capture_default_str();
    cmd->add_option("--k-reg", rc.pipe.k_reg, "Rounding regularizer weight")
        ->capture_default_str();
    cmd->add_option("--calib-count", rc.calib_count, "Calibration segments")
        ->capture_default_str();
    cmd->add_option("--calib-len", rc.calib_len, "Calibration segment length")
        ->capture_default_str();
    cmd->add_flag(
        "--no-cfp", [&rc](std::int64_t) { rc.pipe.enable_cfp = false; },
        "Disable coarse-to-fine outlier pre-processing");
    cmd->add_flag(
        "--no-lora-rounding", [&rc](std::int64_t) { rc.pipe.enable_lora = false; },
        "Disable low-rank rounding compensation");
    cmd->add_flag(
        "--no-homologous", [&rc](std::int64_t) { rc.pipe.enable_homologous = false; },
        "Disable the homologous reconstruction term");
    cmd->add_flag(
        "--no-kld", [&rc](std::int64_t) { rc.pipe.enable_kld = false; },
        "Use the L2 reconstruction distance only");
    cmd->add_flag("--rtn", rc.rtn,
                  "Baseline: same quantizers, no optimization, no pre-processing, "
                  "no compensation");
}

void apply_rtn(RunConfig& rc) {
    if (!rc.rtn) return;
    rc.pipe.optimize = false;
    rc.pipe.enable_cfp = false;
    rc.pipe.enable_lora = false;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw cbq::IoError("cannot open " + path + " for writing");
    for (const auto& l : lines) f << l << "\n";
    if (!f) throw cbq::IoError("write failed for " + path);
}

std::vector<std::vector<int>> load_calib_or_throw(const RunConfig& rc) {
    if (rc.calib_path.empty()) throw cbq::ConfigError("--calib is required");
    cbq::CalibrationSet cs =
        cbq::load_calibration(rc.calib_path, rc.calib_len, rc.calib_count, rc.pipe.seed);
    if (cs.sequences.empty()) throw cbq::DataError("calibration set is empty (count = 0?)");
    return cs.sequences;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

int cmd_quantize(RunConfig& rc) {
    apply_rtn(rc);
    rc.pipe.validate();
    cbq::ToyModel model = cbq::load_model(rc.model_path);
    auto calib = load_calib_or_throw(rc);

    cbq::PipelineResult res = cbq::run_pipeline(model, calib, rc.pipe);
    cbq::save_quantized(rc.out_path, res, rc.pipe.bits_w, rc.pipe.bits_a);

    const std::string metrics =
        rc.metrics_path.empty() ? rc.out_path + ".metrics" : rc.metrics_path;
    write_lines(metrics, res.metrics_log);

    if (!rc.loss_data_path.empty()) {
        std::vector<std::string> rows{"window\titer\tloss\treg\tbeta"};
        for (const auto& line : res.metrics_log) {
            if (line.rfind("window=", 0) != 0 || line.find(" iter=") == std::string::npos) continue;
            std::string out;
            bool in_key = true;
            for (char c : line) {
                if (c == '=') {
                    in_key = false;
                } else if (c == ' ') {
                    in_key = true;
                    out += '\t';
                } else if (!in_key) {
                    out += c;
                }
            }
            rows.push_back(out);
        }
        write_lines(rc.loss_data_path, rows);
    }

    std::printf("recon_initial=%s\n", cbq::fmt_g(res.initial_recon_error).c_str());
    std::printf("recon_final=%s\n", cbq::fmt_g(res.final_recon_error).c_str());
    if (!rc.eval_path.empty()) {
        auto segs = cbq::eval_segments(rc.eval_path, rc.calib_len, 32);
        auto [qm, qb] = cbq::instantiate_checkpoint(cbq::load_quantized(rc.out_path));
        std::printf("perplexity=%s\n",
                    cbq::fmt_g(cbq::evaluate_perplexity(qm, &qb, segs)).c_str());
    }
    std::printf("checkpoint=%s\nmetrics=%s\n", rc.out_path.c_str(), metrics.c_str());
    return 0;
}

int cmd_eval(RunConfig& rc) {
    auto [qm, qb] = cbq::instantiate_checkpoint(cbq::load_quantized(rc.out_path));
    auto segs = cbq::eval_segments(rc.eval_path, rc.calib_len, 64);
    std::printf("perplexity=%s\n", cbq::fmt_g(cbq::evaluate_perplexity(qm, &qb, segs)).c_str());

    if (!rc.model_path.empty()) {
        cbq::ToyModel fp = cbq::load_model(rc.model_path);
        std::printf("fp_perplexity=%s\n",
                    cbq::fmt_g(cbq::evaluate_perplexity(fp, nullptr, segs)).c_str());
        // per-block reconstruction errors, each model on its own stream
        const std::size_t kblocks = fp.config.blocks;
        std::vector<double> block_err(kblocks, 0.0);
        for (const auto& seq : segs) {
            cbq::Tensor x_fp = cbq::embed_tokens(fp, seq);
            cbq::Tensor x_q = cbq::embed_tokens(qm, seq);
            for (std::size_t b = 0; b < kblocks; ++b) {
                x_fp = cbq::block_forward(fp.blocks[b], x_fp, fp.config);
                x_q = cbq::block_forward(qm.blocks[b], x_q, qm.config, &qb.blocks[b]);
                block_err[b] += cbq::distance(cbq::detach(x_fp), cbq::detach(x_q)).item();
            }
        }
        for (std::size_t b = 0; b < kblocks; ++b) {
            std::printf("block_recon_%zu=%s\n", b + 1,
                        cbq::fmt_g(block_err[b] / static_cast<double>(segs.size())).c_str());
        }
    }
    return 0;
}

int cmd_ablate(RunConfig& rc, const std::vector<std::uint64_t>& seeds,
               const std::vector<std::size_t>& windows, const std::vector<std::size_t>& overlaps,
               bool grid_loss, bool grid_cfp, bool grid_lora) {
    apply_rtn(rc);
    cbq::ToyModel model = cbq::load_model(rc.model_path);
    auto calib = load_calib_or_throw(rc);
    std::vector<std::vector<int>> segs;
    if (!rc.eval_path.empty()) segs = cbq::eval_segments(rc.eval_path, rc.calib_len, 32);

    struct Variant {
        std::string name;
        cbq::PipelineConfig cfg;
        bool valid = true;
        std::string note;
    };
    std::vector<Variant> variants;
    for (std::size_t w : windows) {
        for (std::size_t o : overlaps) {
            Variant v;
            v.cfg = rc.pipe;
            v.cfg.window_size = w;
            v.cfg.overlap = o;
            v.name = "window=" + std::to_string(w) + ",overlap=" + std::to_string(o);
            if (o >= w) {
                v.valid = false;
                v.note = "rejected: overlap must be smaller than window size";
            }
            variants.push_back(std::move(v));
        }
    }
    if (grid_loss) {
        Variant l2;
        l2.cfg = rc.pipe;
        l2.cfg.enable_kld = false;
        l2.name = "loss=l2-only";
        variants.push_back(std::move(l2));
        Variant nh;
        nh.cfg = rc.pipe;
        nh.cfg.enable_homologous = false;
        nh.name = "homologous=off";
        variants.push_back(std::move(nh));
    }
    if (grid_cfp) {
        Variant off;
        off.cfg = rc.pipe;
        off.cfg.enable_cfp = false;
        off.name = "cfp=off";
        variants.push_back(std::move(off));
    }
    if (grid_lora) {
        Variant off;
        off.cfg = rc.pipe;
        off.cfg.enable_lora = false;
        off.name = "lora-rounding=off";
        variants.push_back(std::move(off));
    }

    std::printf("config\tseeds\trecon_median\tppl_median\trecon_per_seed\n");
    for (auto& v : variants) {
        if (!v.valid) {
            std::printf("%s\t-\t-\t-\t%s\n", v.name.c_str(), v.note.c_str());
            continue;
        }
        std::vector<double> recon, ppl;
        std::string per_seed;
        for (std::uint64_t s : seeds) {
            cbq::PipelineConfig cfg = v.cfg;
            cfg.seed = s;
            cbq::PipelineResult r = cbq::run_pipeline(model, calib, cfg);
            recon.push_back(r.final_recon_error);
            if (!per_seed.empty()) per_seed += ",";
            per_seed += cbq::fmt_g(r.final_recon_error);
            if (!segs.empty()) {
                const std::string tmp = "/tmp/cbq_ablate_tmp.ckpt";
                cbq::save_quantized(tmp, r, cfg.bits_w, cfg.bits_a);
                auto [qm, qb] = cbq::instantiate_checkpoint(cbq::load_quantized(tmp));
                ppl.push_back(cbq::evaluate_perplexity(qm, &qb, segs));
            }
        }
        std::string seed_list;
        for (std::uint64_t s : seeds) {
            if (!seed_list.empty()) seed_list += ",";
            seed_list += std::to_string(s);
        }
        std::printf("%s\t%s\t%s\t%s\t%s\n", v.name.c_str(), seed_list.c_str(),
                    cbq::fmt_g(median(recon)).c_str(),
                    ppl.empty() ? "-" : cbq::fmt_g(median(ppl)).c_str(), per_seed.c_str());
    }
    return 0;
}

int cmd_inspect_outliers(RunConfig& rc) {
    cbq::ToyModel model = cbq::load_model(rc.model_path);
    json out = json::array();

    auto report_json = [](const cbq::OutlierReport& rep) {
        json j;
        j["q1"] = rep.q1;
        j["q3"] = rep.q3;
        j["iqr"] = rep.iqr;
        j["threshold"] = rep.coarse_threshold;
        j["coarse_count"] = rep.coarse_set.size();
        j["outlier_count"] = rep.final_outliers.size();
        j["split_index"] = rep.split_index;
        j["reserved_max"] = rep.reserved_max;
        if (rep.split_metric) j["split_metric"] = *rep.split_metric;
        return j;
    };

    for (std::size_t b = 0; b < model.config.blocks; ++b) {
        for (cbq::Site s : cbq::kAllSites) {
            const cbq::Tensor& w = model.blocks[b].weight(s);
            std::vector<double> mags(w.data().begin(), w.data().end());
            for (auto& m : mags) m = std::fabs(m);
            json j;
            j["block"] = b + 1;
            j["site"] = cbq::site_name(s);
            j["kind"] = "weight";
            j["report"] = report_json(cbq::detect_outliers(std::move(mags), rc.pipe.outlier));
            out.push_back(std::move(j));
        }
    }

    if (!rc.calib_path.empty()) {
        auto calib = load_calib_or_throw(rc);
        std::vector<cbq::SiteChannelMax> stats(model.config.blocks);
        for (const auto& seq : calib) {
            cbq::run_blocks(model, cbq::embed_tokens(model, seq), 0, model.config.blocks, nullptr,
                            &stats);
        }
        for (std::size_t b = 0; b < model.config.blocks; ++b) {
            for (cbq::Site s : cbq::kAllSites) {
                const auto& maxima = stats[b][static_cast<std::size_t>(s)];
                auto rep = cbq::detect_outliers(maxima, rc.pipe.outlier);
                json j;
                j["block"] = b + 1;
                j["site"] = cbq::site_name(s);
                j["kind"] = "activation";
                j["report"] = report_json(rep);
                auto scales = cbq::channel_scales(maxima, rep);
                json sj = json::array();
                for (std::size_t c = 0; c < scales.s.size(); ++c) {
                    if (scales.s[c] != 1.0) sj.push_back({{"channel", c}, {"scale", scales.s[c]}});
                }
                j["scaled_channels"] = std::move(sj);
                out.push_back(std::move(j));
            }
        }
    }

    std::printf("%s\n", out.dump(2).c_str());
    return 0;
}

int cmd_train_toy(RunConfig& rc, cbq::ModelConfig& mc, cbq::TrainSettings& ts,
                  bool no_outlier_channels) {
    cbq::TokenFile tf = cbq::read_token_file(rc.calib_path);
    if (tf.vocab != mc.vocab) {
        throw cbq::ConfigError("corpus vocabulary " + std::to_string(tf.vocab) +
                               " does not match model vocabulary " + std::to_string(mc.vocab));
    }
    std::vector<std::vector<int>> seqs;
    for (std::size_t off = 0; off + rc.calib_len <= tf.tokens.size(); off += rc.calib_len) {
        std::vector<int> s(rc.calib_len);
        for (std::size_t j = 0; j < rc.calib_len; ++j) s[j] = tf.tokens[off + j];
        seqs.push_back(std::move(s));
    }
    cbq::Rng rng(ts.seed);
    cbq::ToyModel m = cbq::init_model(mc, rng, !no_outlier_channels);
    const double loss = cbq::train_toy(m, seqs, ts);
    cbq::save_model(rc.out_path, m);
    std::printf("final_loss=%s\ncheckpoint=%s\n", cbq::fmt_g(loss).c_str(), rc.out_path.c_str());
    return 0;
}

int cmd_gen_corpus(const std::string& out, std::size_t tokens, std::size_t vocab,
                   std::uint64_t seed) {
    cbq::TokenFile tf;
    tf.vocab = static_cast<std::uint32_t>(vocab);
    tf.tokens = cbq::generate_corpus(tokens, vocab, seed);
    cbq::write_token_file(out, tf);
    std::printf("tokens=%zu\nvocab=%zu\npath=%s\n", tf.tokens.size(), vocab, out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CBQ: cross-block post-training quantization of a toy decoder transformer"};
    app.require_subcommand(1);

    RunConfig rc;

    auto* quantize = app.add_subcommand("quantize", "Run the full quantization pipeline");
    quantize->add_option("--model", rc.model_path, "Floating-point checkpoint")->required();
    quantize->add_option("--calib", rc.calib_path, "Calibration token file")->required();
    quantize->add_option("--out", rc.out_path, "Quantized checkpoint to write")->required();
    quantize->add_option("--metrics-out", rc.metrics_path, "Metrics log path");
    quantize->add_option("--loss-data", rc.loss_data_path, "Loss-trajectory TSV for plotting");
    quantize->add_option("--eval-data", rc.eval_path, "Optional eval token file");
    add_pipeline_flags(quantize, rc);

    auto* eval = app.add_subcommand("eval", "Evaluate a quantized checkpoint");
    eval->add_option("--checkpoint", rc.out_path, "Quantized checkpoint")->required();
    eval->add_option("--eval-data", rc.eval_path, "Eval token file")->required();
    eval->add_option("--model", rc.model_path, "FP checkpoint for reconstruction errors");
    eval->add_option("--calib-len", rc.calib_len, "Eval segment length")->capture_default_str();

    auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::vector<std::size_t> windows{1, 2};
    std::vector<std::size_t> overlaps{0, 1};
    bool grid_loss = false, grid_cfp = false, grid_lora = false;
    ablate->add_option("--model", rc.model_path, "Floating-point checkpoint")->required();
    ablate->add_option("--calib", rc.calib_path, "Calibration token file")->required();
    ablate->add_option("--eval-data", rc.eval_path, "Optional eval token file");
    ablate->add_option("--seeds", seeds, "Seeds to run")->capture_default_str();
    ablate->add_option("--windows", windows, "Window sizes")->capture_default_str();
    ablate->add_option("--overlaps", overlaps, "Overlaps")->capture_default_str();
    ablate->add_flag("--loss-variants", grid_loss, "Add L2-only and homologous-off rows");
    ablate->add_flag("--cfp-variants", grid_cfp, "Add a CFP-off row");
    ablate->add_flag("--lora-variants", grid_lora, "Add a rounding-compensation-off row");
    add_pipeline_flags(ablate, rc);

    auto* inspect = app.add_subcommand("inspect-outliers", "Report detected outliers as JSON");
    inspect->add_option("--model", rc.model_path, "Floating-point checkpoint")->required();
    inspect->add_option("--calib", rc.calib_path, "Token file for activation statistics");
    inspect->add_option("--lambda1", rc.pipe.outlier.lambda1, "Coarse threshold factor")
        ->capture_default_str();
    inspect->add_option("--lambda2", rc.pipe.outlier.lambda2, "Fine variance weight")
        ->capture_default_str();
    inspect->add_option("--calib-count", rc.calib_count, "Calibration segments")
        ->capture_default_str();
    inspect->add_option("--calib-len", rc.calib_len, "Calibration segment length")
        ->capture_default_str();

    auto* train = app.add_subcommand("train-toy", "Train the toy model on a token corpus");
    cbq::ModelConfig mc;
    cbq::TrainSettings ts;
    bool no_outlier_channels = false;
    train->add_option("--corpus", rc.calib_path, "Training token file")->required();
    train->add_option("--out", rc.out_path, "Model checkpoint to write")->required();
    train->add_option("--blocks", mc.blocks, "Transformer blocks")->capture_default_str();
    train->add_option("--hidden", mc.hidden, "Hidden size")->capture_default_str();
    train->add_option("--heads", mc.heads, "Attention heads")->capture_default_str();
    train->add_option("--vocab", mc.vocab, "Vocabulary size")->capture_default_str();
    train->add_option("--max-seq", mc.max_seq, "Maximum sequence length")->capture_default_str();
    train->add_option("--steps", ts.steps, "Training steps")->capture_default_str();
    train->add_option("--train-batch", ts.batch, "Training batch size")->capture_default_str();
    train->add_option("--lr", ts.lr, "Learning rate")->capture_default_str();
    train->add_option("--seed", ts.seed, "Seed")->capture_default_str();
    train->add_option("--seq-len", rc.calib_len, "Training segment length")->capture_default_str();
    train->add_flag("--verbose", ts.verbose, "Print progress");
    train->add_flag("--no-outlier-channels", no_outlier_channels,
                    "Initialize without elevated channel gains");

    auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic token corpus");
    std::string gen_out;
    std::size_t gen_tokens = 262144, gen_vocab = 512;
    std::uint64_t gen_seed = 42;
    gen->add_option("--out", gen_out, "Token file to write")->required();
    gen->add_option("--tokens", gen_tokens, "Token count")->capture_default_str();
    gen->add_option("--vocab", gen_vocab, "Vocabulary size")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (quantize->parsed()) return cmd_quantize(rc);
        if (eval->parsed()) return cmd_eval(rc);
        if (ablate->parsed()) {
            return cmd_ablate(rc, seeds, windows, overlaps, grid_loss, grid_cfp, grid_lora);
        }
        if (inspect->parsed()) return cmd_inspect_outliers(rc);
        if (train->parsed()) return cmd_train_toy(rc, mc, ts, no_outlier_channels);
        if (gen->parsed()) return cmd_gen_corpus(gen_out, gen_tokens, gen_vocab, gen_seed);
    } catch (const cbq::ConfigError& e) {
        std::fprintf(stderr, "error: category=config %s\n", e.what());
        return kExitConfig;
    } catch (const cbq::ShapeError& e) {
        std::fprintf(stderr, "error: category=config %s\n", e.what());
        return kExitConfig;
    } catch (const cbq::DataError& e) {
        std::fprintf(stderr, "error: category=data %s\n", e.what());
        return kExitData;
    } catch (const cbq::DivergenceError& e) {
        std::fprintf(stderr, "error: category=divergence %s\n", e.what());
        return kExitDivergence;
    } catch (const cbq::IoError& e) {
        std::fprintf(stderr, "error: category=io %s\n", e.what());
        return kExitIo;
    }
    return 0;
}
