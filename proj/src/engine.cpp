#include "cbq/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "cbq/errors.hpp"
#include "cbq/optim.hpp"
#include "cbq/quantizer.hpp"
#include "cbq/rng.hpp"

namespace cbq {

namespace {

Tensor as_matrix(const Tensor& t) {
    if (t.shape().size() == 2) return t;
    if (t.shape().size() == 1) return reshape(t, {1, t.shape()[0]});
    throw ShapeError("distance expects 1-D or 2-D inputs, got " + shape_str(t.shape()));
}

void project_steps_positive(QuantBindings& bindings, std::size_t first, std::size_t last) {
    for (std::size_t b = first - 1; b < last; ++b) {
        for (auto& sq : bindings.blocks[b]) {
            for (double& s : sq.w_state.step.data()) s = std::max(s, 1e-8);
            for (double& s : sq.x_state.step.data()) s = std::max(s, 1e-8);
        }
    }
}

}  // namespace

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

WindowSchedule build_schedule(std::size_t k, std::size_t window_size, std::size_t overlap) {
    if (window_size < 1 || window_size > k) {
        throw ConfigError("window size must lie in [1, " + std::to_string(k) + "]");
    }
    if (overlap >= window_size) {
        throw ConfigError("overlap " + std::to_string(overlap) +
                          " must be smaller than window size " + std::to_string(window_size));
    }
    WindowSchedule s;
    s.window_size = window_size;
    s.overlap = overlap;
    std::size_t l = 1;
    while (true) {
        const std::size_t last = std::min(l + window_size - 1, k);
        s.windows.push_back({l, last});
        if (last == k) break;
        l += window_size - overlap;
    }
    return s;
}

Tensor distance(const Tensor& f1, const Tensor& f2, bool use_kld) {
    if (f1.shape() != f2.shape()) {
        throw ShapeError("distance inputs differ: " + shape_str(f1.shape()) + " vs " +
                         shape_str(f2.shape()));
    }
    Tensor a = as_matrix(f1);
    Tensor b = as_matrix(f2);
    Tensor diff = sub(a, b);
    Tensor l2 = mean_all(sqrt_t(sum_rows(mul(diff, diff))));
    if (!use_kld) return l2;
    Tensor p = clamp_min(softmax_rows(a), 1e-12);
    Tensor q = clamp_min(softmax_rows(b), 1e-12);
    Tensor kl = sum_all(mul(p, sub(log_t(p), log_t(q))));
    return add(l2, kl);
}

void PipelineConfig::validate() const {
    weight_spec(bits_w).validate();
    act_spec(bits_a).validate();
    if (window_size < 1) throw ConfigError("window size must be at least 1");
    if (overlap >= window_size) {
        throw ConfigError("overlap " + std::to_string(overlap) +
                          " must be smaller than window size " + std::to_string(window_size));
    }
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch < 1) throw ConfigError("batch size must be at least 1");
    if (rank < 1) throw ConfigError("rank must be at least 1");
    if (!(lr_step >= 0.0) || !(lr_v >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (!(k_reg > 0.0)) throw ConfigError("k_reg must be positive");
    if (beta_end < 2.0 || beta_start < beta_end) {
        throw ConfigError("beta must anneal non-increasingly to an end value >= 2");
    }
    outlier.validate();
}

namespace {

struct WindowLossParts {
    Tensor recon;  // batched mean of (normal + homologous)/2
    Tensor reg;    // summed rounding regularizers (undefined when no comp)
};

Tensor recon_terms(const Tensor& normal_target, const Tensor& homolog_target, const Tensor& q_out,
                   bool homologous, bool use_kld) {
    Tensor normal = distance(normal_target, q_out, use_kld);
    if (!homologous) return normal;
    Tensor homo = distance(homolog_target, q_out, use_kld);
    return scale(add(normal, homo), 0.5);
}

// Blocks revisited by a later window keep beta at beta_start until their
// final window: compensation stays adaptable across the overlap and
// binarizes exactly once, during the block's last visit.
Tensor window_regularizer(const QuantBindings& bindings, WindowSchedule::Range w,
                          const RegularizerSchedule& sched, std::size_t iter,
                          const std::vector<bool>* final_visit = nullptr) {
    Tensor total;
    for (std::size_t b = w.first - 1; b < w.last; ++b) {
        const bool anneal = !final_visit || (*final_visit)[b];
        for (const auto& sq : bindings.blocks[b]) {
            if (!sq.comp) continue;
            Tensor reg = anneal
                             ? rounding_regularizer(compensation_matrix(*sq.comp), sched, iter)
                             : rounding_regularizer(compensation_matrix(*sq.comp), sched, 0);
            total = total.defined() ? add(total, reg) : reg;
        }
    }
    return total;
}

}  // namespace

Tensor window_loss(const ToyModel& fp_model, const ToyModel& q_model,
                   const QuantBindings& bindings, WindowSchedule::Range w, const Tensor& fp_input,
                   const Tensor& q_input, const RegularizerSchedule& sched, std::size_t iter,
                   bool homologous, bool use_kld) {
    Tensor normal_target = detach(run_blocks(fp_model, fp_input, w.first - 1, w.last));
    Tensor homolog_target =
        homologous ? detach(run_blocks(fp_model, q_input, w.first - 1, w.last)) : Tensor();
    Tensor q_out = run_blocks(q_model, q_input, w.first - 1, w.last, &bindings);
    Tensor loss = recon_terms(normal_target, homolog_target, q_out, homologous, use_kld);
    Tensor reg = window_regularizer(bindings, w, sched, iter);
    return reg.defined() ? add(loss, reg) : loss;
}

double full_model_recon_error(const ToyModel& fp_model, const ToyModel& q_model,
                              const QuantBindings& bindings,
                              const std::vector<std::vector<int>>& data, bool use_kld) {
    if (data.empty()) throw DataError("no sequences to measure reconstruction error on");
    double total = 0.0;
    for (const auto& seq : data) {
        Tensor fp_out = run_blocks(fp_model, embed_tokens(fp_model, seq), 0, fp_model.config.blocks);
        Tensor q_out =
            run_blocks(q_model, embed_tokens(q_model, seq), 0, q_model.config.blocks, &bindings);
        total += distance(detach(fp_out), detach(q_out), use_kld).item();
    }
    return total / static_cast<double>(data.size());
}

namespace {

// Outlier pre-processing: truncate weight outliers in place, then detect
// activation-channel outliers on calibration maxima and fold the scales into
// the consuming weights.
std::vector<SitePrep> apply_cfp(ToyModel& qm, QuantBindings& bindings,
                                const std::vector<std::vector<int>>& calib,
                                const OutlierConfig& ocfg) {
    std::vector<SitePrep> preps;
    const std::size_t kblocks = qm.config.blocks;

    for (std::size_t b = 0; b < kblocks; ++b) {
        for (Site s : kAllSites) {
            Tensor& w = qm.blocks[b].weight(s);
            std::vector<double> mags(w.data().begin(), w.data().end());
            for (double& m : mags) m = std::fabs(m);
            SitePrep prep;
            prep.block = b;
            prep.site = s;
            prep.weight_report = detect_outliers(std::move(mags), ocfg);
            if (prep.weight_report.has_outliers()) {
                Tensor truncated = truncate_weights(w, prep.weight_report);
                std::size_t changed = 0;
                auto wd = w.data();
                auto td = truncated.data();
                for (std::size_t i = 0; i < wd.size(); ++i) {
                    if (wd[i] != td[i]) ++changed;
                    wd[i] = td[i];
                }
                prep.weights_truncated = changed;
                prep.weight_trigger = prep.weight_report.final_outliers.front();
                prep.weight_cap = prep.weight_report.reserved_max;
            }
            preps.push_back(std::move(prep));
        }
    }

    // channel maxima under the truncated model
    std::vector<SiteChannelMax> stats(kblocks);
    for (const auto& seq : calib) {
        run_blocks(qm, embed_tokens(qm, seq), 0, kblocks, nullptr, &stats);
    }

    for (std::size_t b = 0; b < kblocks; ++b) {
        for (Site s : kAllSites) {
            auto& prep = preps[b * kSiteCount + static_cast<std::size_t>(s)];
            const auto& maxima = stats[b][static_cast<std::size_t>(s)];
            prep.act_report = detect_outliers(maxima, ocfg);
            ChannelScales scales = channel_scales(maxima, prep.act_report);
            std::size_t flagged = 0;
            for (double v : scales.s) flagged += v != 1.0 ? 1 : 0;
            if (flagged > 0) {
                Tensor& w = qm.blocks[b].weight(s);
                Tensor folded = scale_activations_into_weights(w, scales);
                std::copy(folded.data().begin(), folded.data().end(), w.data().begin());
                auto& sq = bindings.blocks[b][static_cast<std::size_t>(s)];
                sq.act_scale = Tensor::from(scales.s, {scales.s.size()}, false);
                prep.channels_scaled = flagged;
                prep.scales = std::move(scales);
            }
        }
    }
    return preps;
}

}  // namespace

PipelineResult run_pipeline(const ToyModel& fp_model_in,
                            const std::vector<std::vector<int>>& calib,
                            const PipelineConfig& cfg) {
    cfg.validate();
    if (calib.empty()) throw DataError("calibration set is empty");
    const std::size_t kblocks = fp_model_in.config.blocks;
    const WindowSchedule schedule = build_schedule(kblocks, cfg.window_size, cfg.overlap);

    PipelineResult res;
    ToyModel fp = clone_model(fp_model_in);
    res.q_model = clone_model(fp_model_in);
    ToyModel& qm = res.q_model;
    res.bindings.blocks.resize(kblocks);
    Rng rng(cfg.seed);

    auto log_line = [&res](std::string line) { res.metrics_log.push_back(std::move(line)); };

    if (cfg.enable_cfp) {
        res.prep = apply_cfp(qm, res.bindings, calib, cfg.outlier);
        std::size_t truncated = 0, scaled = 0;
        for (const auto& p : res.prep) {
            truncated += p.weights_truncated;
            scaled += p.channels_scaled;
        }
        log_line("cfp weights_truncated=" + std::to_string(truncated) +
                 " channels_scaled=" + std::to_string(scaled));
    }

    // quantizer state init (post-CFP weights, post-scale activations); the
    // stats pass runs with scale-only bindings, so nothing is quantized yet
    const Granularity act_gran = cfg.bits_a < 4 ? Granularity::PerChannel : Granularity::PerTensor;
    std::vector<SiteChannelMax> act_stats(kblocks);
    for (const auto& seq : calib) {
        run_blocks(qm, embed_tokens(qm, seq), 0, kblocks, &res.bindings, &act_stats);
    }

    for (std::size_t b = 0; b < kblocks; ++b) {
        for (Site s : kAllSites) {
            auto& sq = res.bindings.blocks[b][static_cast<std::size_t>(s)];
            const Tensor& w = qm.blocks[b].weight(s);
            sq.w_spec = weight_spec(cfg.bits_w);
            sq.w_state = init_step(w, sq.w_spec);
            sq.x_spec = act_spec(cfg.bits_a, act_gran, 1);
            sq.x_state = init_step_from_maxima(act_stats[b][static_cast<std::size_t>(s)], sq.x_spec);
            if (cfg.enable_lora) {
                const std::size_t cap =
                    std::max<std::size_t>(1, std::min(w.shape()[0], w.shape()[1]) / 4);
                sq.comp = init_compensation(w, sq.w_state, sq.w_spec, std::min(cfg.rank, cap), rng);
            }
        }
    }

    res.initial_recon_error = full_model_recon_error(fp, qm, res.bindings, calib, cfg.enable_kld);
    log_line("recon_initial=" + fmt_g(res.initial_recon_error));

    if (cfg.optimize) {
        const std::size_t n = calib.size();
        const std::size_t batches = (n + cfg.batch - 1) / cfg.batch;
        const std::size_t iters = cfg.epochs * batches;
        RegularizerSchedule sched{cfg.k_reg, cfg.beta_start, cfg.beta_end, iters};

        std::vector<std::size_t> last_window(kblocks, 0);
        for (std::size_t wi = 0; wi < schedule.windows.size(); ++wi) {
            for (std::size_t b = schedule.windows[wi].first - 1; b < schedule.windows[wi].last;
                 ++b) {
                last_window[b] = wi;
            }
        }

        for (std::size_t wi = 0; wi < schedule.windows.size(); ++wi) {
            const auto& w = schedule.windows[wi];
            std::vector<bool> final_visit(kblocks, false);
            for (std::size_t b = w.first - 1; b < w.last; ++b) {
                final_visit[b] = last_window[b] == wi;
            }
            // capture both input streams at the window start
            std::vector<Tensor> fp_in(n), q_in(n), normal_target(n), homolog_target(n);
            for (std::size_t i = 0; i < n; ++i) {
                auto [f, q] = capture_block_io(fp, qm, res.bindings, calib[i], w.first);
                fp_in[i] = f;
                q_in[i] = q;
                normal_target[i] = detach(run_blocks(fp, fp_in[i], w.first - 1, w.last));
                if (cfg.enable_homologous) {
                    homolog_target[i] = detach(run_blocks(fp, q_in[i], w.first - 1, w.last));
                }
            }

            AdamOptimizer opt;
            for (std::size_t b = w.first - 1; b < w.last; ++b) {
                for (auto& sq : res.bindings.blocks[b]) {
                    opt.add_param(sq.w_state.step, cfg.lr_step);
                    opt.add_param(sq.x_state.step, cfg.lr_step);
                    if (sq.comp) {
                        opt.add_param(sq.comp->v1, cfg.lr_v);
                        opt.add_param(sq.comp->v2, cfg.lr_v);
                    }
                }
            }

            WindowStats ws{w.first, w.last, 0.0, 0.0};
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            std::size_t iter = 0;
            for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
                // deterministic reshuffle per epoch
                for (std::size_t i = n; i > 1; --i) {
                    std::swap(order[i - 1], order[rng.index(i)]);
                }
                for (std::size_t bstart = 0; bstart < n; bstart += cfg.batch, ++iter) {
                    const std::size_t bend = std::min(bstart + cfg.batch, n);
                    opt.zero_grad();
                    Tensor loss;
                    for (std::size_t bi = bstart; bi < bend; ++bi) {
                        const std::size_t i = order[bi];
                        Tensor q_out =
                            run_blocks(qm, q_in[i], w.first - 1, w.last, &res.bindings);
                        Tensor term = recon_terms(normal_target[i], homolog_target[i], q_out,
                                                  cfg.enable_homologous, cfg.enable_kld);
                        loss = loss.defined() ? add(loss, term) : term;
                    }
                    loss = scale(loss, 1.0 / static_cast<double>(bend - bstart));
                    Tensor reg = window_regularizer(res.bindings, w, sched, iter, &final_visit);
                    double reg_value = 0.0;
                    if (reg.defined()) {
                        reg_value = reg.item();
                        loss = add(loss, reg);
                    }
                    const double loss_value = loss.item();
                    if (!std::isfinite(loss_value)) {
                        throw DivergenceError("loss diverged in window " +
                                              std::to_string(w.first) + "-" +
                                              std::to_string(w.last) + " at iteration " +
                                              std::to_string(iter));
                    }
                    if (iter == 0) ws.initial_loss = loss_value;
                    ws.final_loss = loss_value;
                    backward(loss);
                    opt.step();
                    project_steps_positive(res.bindings, w.first, w.last);
                    log_line("window=" + std::to_string(w.first) + "-" + std::to_string(w.last) +
                             " iter=" + std::to_string(iter) + " loss=" + fmt_g(loss_value) +
                             " reg=" + fmt_g(reg_value) + " beta=" + fmt_g(sched.beta_at(iter)));
                }
            }
            log_line("window=" + std::to_string(w.first) + "-" + std::to_string(w.last) +
                     " initial=" + fmt_g(ws.initial_loss) + " final=" + fmt_g(ws.final_loss));
            res.window_stats.push_back(ws);
        }
    }

    res.final_recon_error = full_model_recon_error(fp, qm, res.bindings, calib, cfg.enable_kld);
    log_line("recon_final=" + fmt_g(res.final_recon_error));
    return res;
}

}  // namespace cbq
