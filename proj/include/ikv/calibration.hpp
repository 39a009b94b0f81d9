#pragma once

#include <atomic>
#include <cmath>
#include <thread>
#include <vector>

#include "ikv/errors.hpp"
#include "ikv/intactkv.hpp"
#include "ikv/io.hpp"
#include "ikv/model.hpp"
#include "ikv/rng.hpp"

namespace ikv {

struct CalibConfig {
    double learning_rate = 2e-4;
    std::size_t epochs = 20;
    std::size_t batch = 1;        // sequences per micro-batch
    std::size_t grad_accum = 16;  // micro-batches averaged per optimizer update
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; a KV prefix is bias-like, so default 0
    std::uint64_t seed = 0;
    std::size_t threads = 0;          // 0 = hardware concurrency
    std::size_t grad_check_coords = 0;  // audit the gradient before training (0 = skip)
    double grad_check_h = 1e-5;

    void validate() const {
        if (learning_rate < 0.0) throw InputError("CalibConfig: negative learning rate");
        if (epochs < 1) throw InputError("CalibConfig: epochs must be >= 1");
        if (batch < 1 || grad_accum < 1)
            throw InputError("CalibConfig: batch and grad_accum must be >= 1");
    }
};

struct CalibReport {
    std::vector<double> step_losses;  // mean micro-batch loss at each update's pre-update point
    double initial_loss = 0.0;
    double final_loss = 0.0;
    Vector layer_initial;  // per-layer corpus loss before training
    Vector layer_final;    // after
    std::size_t updates = 0;
    bool reverted_to_initial = false;      // final theta regressed, returned theta0
    double grad_check_max_rel_error = -1;  // -1 until an audit runs
};

// Gradient (or Adam moment) with the same shape as an IntactKV prefix.
struct PrefixGrad {
    std::vector<std::vector<Matrix>> keys;
    std::vector<std::vector<Matrix>> values;

    static PrefixGrad zeros_like(const IntactKV& kv) {
        PrefixGrad g;
        g.keys.assign(kv.keys.size(), {});
        g.values.assign(kv.values.size(), {});
        for (std::size_t l = 0; l < kv.keys.size(); ++l) {
            g.keys[l].assign(kv.keys[l].size(), Matrix(kv.prefix_len, kv.keys[l][0].cols, 0.0));
            g.values[l].assign(kv.values[l].size(), Matrix(kv.prefix_len, kv.values[l][0].cols, 0.0));
        }
        return g;
    }

    void add(const PrefixGrad& o) {
        for (std::size_t l = 0; l < keys.size(); ++l)
            for (std::size_t h = 0; h < keys[l].size(); ++h) {
                for (std::size_t i = 0; i < keys[l][h].data.size(); ++i)
                    keys[l][h].data[i] += o.keys[l][h].data[i];
                for (std::size_t i = 0; i < values[l][h].data.size(); ++i)
                    values[l][h].data[i] += o.values[l][h].data[i];
            }
    }

    void scale(double a) {
        for (auto& layer : keys)
            for (auto& head : layer)
                for (double& x : head.data) x *= a;
        for (auto& layer : values)
            for (auto& head : layer)
                for (double& x : head.data) x *= a;
    }
};

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double silu_grad(double z) {
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
}

// dx = g .* u * inv - x * inv^3 * (sum_i u_i g_i x_i) / n, accumulated into dx.
inline void rmsnorm_backward_accum(std::span<const double> upstream, std::span<const double> x,
                                   std::span<const double> gain, double inv,
                                   std::span<double> dx) {
    const std::size_t n = x.size();
    double proj = 0.0;
    for (std::size_t i = 0; i < n; ++i) proj += upstream[i] * gain[i] * x[i];
    const double coef = inv * inv * inv * proj / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) dx[i] += upstream[i] * gain[i] * inv - x[i] * coef;
}

// out[k] += sum_j up[j] * w(k, j)  (adjoint of linear_accumulate)
inline void linear_backward_accum(std::span<const double> up, const Matrix& w,
                                  std::span<double> out) {
    for (std::size_t k = 0; k < w.rows; ++k) out[k] += dot(up, w.row_span(k));
}

struct SequenceTargets {
    // Per layer, fp hidden states at the continuation positions (c x d_model).
    std::vector<Matrix> layers;
};

inline SequenceTargets fp_targets(const Model& fp, std::span<const int> sequence,
                                  std::size_t prefix_len) {
    ForwardTrace t;
    KVCache cache = KVCache::empty(fp.config);
    EngineOptions opt;
    opt.want_logits = false;
    extend_cache(fp, cache, sequence, opt, &t);
    SequenceTargets out;
    const std::size_t c = sequence.size() - prefix_len;
    out.layers.assign(fp.config.n_layers, Matrix(c, fp.config.d_model));
    for (std::size_t l = 0; l < fp.config.n_layers; ++l)
        for (std::size_t i = 0; i < c; ++i)
            std::copy(t.layer_outputs[l].row(prefix_len + i),
                      t.layer_outputs[l].row(prefix_len + i) + fp.config.d_model,
                      out.layers[l].row(i));
    return out;
}

inline void check_sequence(const IntactKV& theta, std::span<const int> sequence) {
    if (sequence.size() <= theta.prefix_len)
        throw InputError("calibration: sequence must extend past the prefix");
    for (std::size_t i = 0; i < theta.prefix_len; ++i)
        if (sequence[i] != theta.prefix_tokens[i])
            throw InputError("calibration: sequence does not begin with the prefix tokens");
}

// 1/2 sum over layers and scored positions of the squared hidden-state
// difference, from an already-computed capture.
inline double loss_from_capture(const ForwardCapture& cap, const SequenceTargets& targets,
                                std::size_t first_scored_cont) {
    double loss = 0.0;
    for (std::size_t l = 0; l < cap.layers.size(); ++l) {
        const Matrix& got = cap.layers[l].x_out;
        const Matrix& want = targets.layers[l];
        for (std::size_t i = first_scored_cont; i < got.rows; ++i)
            for (std::size_t c = 0; c < got.cols; ++c) {
                const double d = want(i, c) - got(i, c);
                loss += d * d;
            }
    }
    return 0.5 * loss;
}

struct EvalResult {
    double loss = 0.0;
    Vector layer_losses;
    PrefixGrad grad;  // empty unless requested
};

// Quantized-branch forward from the prefix plus exact reverse-mode gradient
// of the layer-wise loss with respect to every prefix K and V entry. The
// quantized weights are constants; gradients flow through attention (softmax
// Jacobian diag(s) - s s^T on the key path, score-weighted accumulation on
// the value path), the residual stream, RMSNorm, and the gated FFN, across
// all layers. Continuation keys/queries un-rotate through the chain rule;
// prefix keys are the post-rotary parameters themselves.
inline EvalResult eval_sequence(const Model& q, const IntactKV& theta,
                                const SequenceTargets& targets, std::span<const int> sequence,
                                std::size_t loss_start, bool want_grad) {
    check_sequence(theta, sequence);
    const ModelConfig& cfg = q.config;
    const std::size_t m = theta.prefix_len;
    const std::size_t c = sequence.size() - m;
    const std::size_t dm = cfg.d_model, dh = cfg.head_dim(), H = cfg.n_heads, L = cfg.n_layers;
    const std::size_t first_scored = loss_start > m ? loss_start - m : 0;
    if (first_scored >= c) throw InputError("calibration: no scored positions past loss start");

    KVCache cache = cache_from_prefix(theta, cfg);
    ForwardCapture cap;
    EngineOptions opt;
    opt.want_logits = false;
    extend_cache(q, cache, sequence.subspan(m), opt, nullptr, &cap);

    EvalResult out;
    out.layer_losses.assign(L, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        const Matrix& got = cap.layers[l].x_out;
        const Matrix& want = targets.layers[l];
        double acc = 0.0;
        for (std::size_t i = first_scored; i < c; ++i)
            for (std::size_t k = 0; k < dm; ++k) {
                const double d = want(i, k) - got(i, k);
                acc += d * d;
            }
        out.layer_losses[l] = 0.5 * acc;
        out.loss += out.layer_losses[l];
    }
    if (!want_grad) return out;

    out.grad = PrefixGrad::zeros_like(theta);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dx(c, dm, 0.0);
    Vector dhff(cfg.d_ff), dzg(cfg.d_ff), dzu(cfg.d_ff), db(dm), dmid(dm);
    Vector dconcat(dm), dq_full(dm), dk_full(dm), dv_full(dm);

    for (std::size_t l = L; l-- > 0;) {
        const LayerCapture& lc = cap.layers[l];
        const LayerWeights& lw = q.weights.layers[l];

        // Loss gradient lands directly on this layer's output.
        for (std::size_t i = first_scored; i < c; ++i)
            for (std::size_t k = 0; k < dm; ++k)
                dx(i, k) += lc.x_out(i, k) - targets.layers[l](i, k);

        Matrix dx_mid(c, dm, 0.0);
        for (std::size_t i = 0; i < c; ++i) {
            std::span<const double> up(dx.row(i), dm);
            // FFN backward
            std::fill(dhff.begin(), dhff.end(), 0.0);
            for (std::size_t j = 0; j < cfg.d_ff; ++j) dhff[j] = dot(up, lw.w_down.row_span(j));
            for (std::size_t j = 0; j < cfg.d_ff; ++j) {
                const double zg = lc.z_gate(i, j), zu = lc.z_up(i, j);
                dzg[j] = dhff[j] * zu * silu_grad(zg);
                dzu[j] = dhff[j] * (zg * sigmoid(zg));
            }
            std::fill(db.begin(), db.end(), 0.0);
            for (std::size_t k = 0; k < dm; ++k)
                db[k] = dot(dzg, lw.w_gate.row_span(k)) + dot(dzu, lw.w_up.row_span(k));
            // Residual: upstream passes through, plus the normed branch.
            std::copy(up.begin(), up.end(), dx_mid.row(i));
            rmsnorm_backward_accum(db, lc.x_mid.row_span(i), lw.ffn_norm_gain,
                                   lc.inv_rms_ffn[i], dx_mid.row_span(i));
        }

        // Attention backward.
        Matrix da(c, dm, 0.0);
        std::vector<Matrix> dk_cont(H, Matrix(c, dh, 0.0));
        std::vector<Matrix> dv_cont(H, Matrix(c, dh, 0.0));
        for (std::size_t i = 0; i < c; ++i) {
            std::span<const double> dout(dx_mid.row(i), dm);
            std::fill(dconcat.begin(), dconcat.end(), 0.0);
            for (std::size_t k = 0; k < dm; ++k) dconcat[k] = dot(dout, lw.wo.row_span(k));

            std::fill(dq_full.begin(), dq_full.end(), 0.0);
            for (std::size_t h = 0; h < H; ++h) {
                const Matrix& Kc = cache.keys[l][h];
                const Matrix& Vc = cache.values[l][h];
                const Vector& s = lc.scores[h][i];
                const std::size_t support = s.size();
                std::span<const double> doh(dconcat.data() + h * dh, dh);
                std::span<const double> qh(lc.q_rot[h].row(i), dh);

                Vector ds(support);
                double mix = 0.0;
                for (std::size_t j = 0; j < support; ++j) {
                    ds[j] = dot(doh, Vc.row_span(j));
                    mix += s[j] * ds[j];
                }
                std::span<double> dqh(dq_full.data() + h * dh, dh);
                for (std::size_t j = 0; j < support; ++j) {
                    const double dz = s[j] * (ds[j] - mix);
                    const double dzs = dz * inv_sqrt_dh;
                    const double* krow = Kc.row(j);
                    for (std::size_t k = 0; k < dh; ++k) dqh[k] += dzs * krow[k];
                    double* dkrow = j < m ? out.grad.keys[l][h].row(j) : dk_cont[h].row(j - m);
                    for (std::size_t k = 0; k < dh; ++k) dkrow[k] += dzs * qh[k];
                    double* dvrow = j < m ? out.grad.values[l][h].row(j) : dv_cont[h].row(j - m);
                    for (std::size_t k = 0; k < dh; ++k) dvrow[k] += s[j] * doh[k];
                }
            }
            // Query path: un-rotate, then back through Wq into the normed input.
            if (cfg.use_rope)
                for (std::size_t h = 0; h < H; ++h)
                    rope_row_inverse_inplace({dq_full.data() + h * dh, dh}, m + i, cfg.rope_theta);
            linear_backward_accum(dq_full, lw.wq, da.row_span(i));
        }
        // Continuation key/value paths.
        for (std::size_t j = 0; j < c; ++j) {
            for (std::size_t h = 0; h < H; ++h) {
                std::copy(dk_cont[h].row(j), dk_cont[h].row(j) + dh, dk_full.begin() + h * dh);
                std::copy(dv_cont[h].row(j), dv_cont[h].row(j) + dh, dv_full.begin() + h * dh);
            }
            if (cfg.use_rope)
                for (std::size_t h = 0; h < H; ++h)
                    rope_row_inverse_inplace({dk_full.data() + h * dh, dh}, m + j, cfg.rope_theta);
            linear_backward_accum(dk_full, lw.wk, da.row_span(j));
            linear_backward_accum(dv_full, lw.wv, da.row_span(j));
        }
        // Attention norm + residual close the layer.
        for (std::size_t i = 0; i < c; ++i) {
            std::copy(dx_mid.row(i), dx_mid.row(i) + dm, dx.row(i));
            rmsnorm_backward_accum({da.row(i), dm}, lc.x_in.row_span(i), lw.attn_norm_gain,
                                   lc.inv_rms_attn[i], dx.row_span(i));
        }
    }
    return out;
}

}  // namespace detail

// L(theta) = 1/2 sum_l || f_l(w, x) - f_l(w_hat, x; theta) ||^2, computed on
// the positions past the prefix (optionally past a later loss-start offset).
// The quantized branch self-propagates from the prefix.
inline double layerwise_loss(const Model& fp, const Model& q, const IntactKV& theta,
                             std::span<const int> sequence, std::size_t loss_start = 0) {
    detail::check_sequence(theta, sequence);
    const auto targets = detail::fp_targets(fp, sequence, theta.prefix_len);
    return detail::eval_sequence(q, theta, targets, sequence, loss_start, false).loss;
}

// Exact reverse-mode gradient of layerwise_loss w.r.t. every prefix entry.
inline PrefixGrad grad_intactkv(const Model& fp, const Model& q, const IntactKV& theta,
                                std::span<const int> sequence, std::size_t loss_start = 0) {
    detail::check_sequence(theta, sequence);
    const auto targets = detail::fp_targets(fp, sequence, theta.prefix_len);
    return std::move(
        detail::eval_sequence(q, theta, targets, sequence, loss_start, true).grad);
}

namespace detail {

struct FlatCoord {
    std::size_t layer, head, row, col;
    bool is_value;
};

inline FlatCoord unflatten(const IntactKV& kv, std::size_t idx) {
    const std::size_t dh = kv.keys[0][0].cols;
    const std::size_t per_tensor = kv.prefix_len * dh;
    const std::size_t per_head = 2 * per_tensor;
    const std::size_t per_layer = kv.keys[0].size() * per_head;
    FlatCoord fc;
    fc.layer = idx / per_layer;
    idx %= per_layer;
    fc.head = idx / per_head;
    idx %= per_head;
    fc.is_value = idx >= per_tensor;
    idx %= per_tensor;
    fc.row = idx / dh;
    fc.col = idx % dh;
    return fc;
}

inline double& coord_ref(IntactKV& kv, const FlatCoord& fc) {
    Matrix& t = fc.is_value ? kv.values[fc.layer][fc.head] : kv.keys[fc.layer][fc.head];
    return t(fc.row, fc.col);
}

inline double coord_of(const PrefixGrad& g, const FlatCoord& fc) {
    const Matrix& t = fc.is_value ? g.values[fc.layer][fc.head] : g.keys[fc.layer][fc.head];
    return t(fc.row, fc.col);
}

}  // namespace detail

// Central-difference audit of the analytic gradient at n_coords
// pseudo-randomly chosen coordinates. Relative error per coordinate is
// |a - f| / max(|a|, |f|, 1e-10). Large h degrades the estimate but is
// permitted. Same seed, same coordinates, same report.
inline double grad_check(const Model& fp, const Model& q, const IntactKV& theta,
                         std::span<const int> sequence, std::size_t n_coords, double h,
                         std::uint64_t seed = 0, std::size_t loss_start = 0) {
    if (h <= 0.0) throw InputError("grad_check: h must be positive");
    if (n_coords < 1) throw InputError("grad_check: n_coords must be >= 1");
    detail::check_sequence(theta, sequence);
    const auto targets = detail::fp_targets(fp, sequence, theta.prefix_len);
    const PrefixGrad analytic =
        detail::eval_sequence(q, theta, targets, sequence, loss_start, true).grad;

    const std::size_t total = 2 * theta.keys.size() * theta.keys[0].size() * theta.prefix_len *
                              theta.keys[0][0].cols;
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t t = 0; t < n_coords; ++t) {
        const auto fc = detail::unflatten(theta, rng.index(total));
        IntactKV probe = theta;
        double& x = detail::coord_ref(probe, fc);
        const double x0 = x;
        x = x0 + h;
        const double lp = detail::eval_sequence(q, probe, targets, sequence, loss_start, false).loss;
        x = x0 - h;
        const double lm = detail::eval_sequence(q, probe, targets, sequence, loss_start, false).loss;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = detail::coord_of(analytic, fc);
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-10});
        worst = std::max(worst, rel);
    }
    return worst;
}

namespace detail {

inline double corpus_loss(const Model& q, const IntactKV& theta,
                          const std::vector<SequenceTargets>& targets,
                          const std::vector<CorpusSequence>& corpus, Vector* per_layer) {
    double total = 0.0;
    if (per_layer) per_layer->assign(q.config.n_layers, 0.0);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& seq = corpus[i];
        const auto res = eval_sequence(q, theta, targets[i], seq.tokens,
                                       std::max(seq.loss_start, theta.prefix_len), false);
        total += res.loss;
        if (per_layer)
            for (std::size_t l = 0; l < res.layer_losses.size(); ++l)
                (*per_layer)[l] += res.layer_losses[l];
    }
    const double inv = 1.0 / static_cast<double>(corpus.size());
    if (per_layer)
        for (double& v : *per_layer) v *= inv;
    return total * inv;
}

}  // namespace detail

// Adam loop over the corpus treating the prefix as the only trainable
// parameters. Gradients of one accumulation group are evaluated in worker
// threads but summed in sequence order, so results are run-to-run identical.
// Returns the calibrated prefix (or the initial one, if training regressed)
// and the loss trajectory.
inline std::pair<IntactKV, CalibReport> calibrate(const Model& fp, const Model& q,
                                                  const IntactKV& theta0,
                                                  const std::vector<CorpusSequence>& corpus,
                                                  const CalibConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) throw InputError("calibrate: empty corpus");
    if (theta0.provenance != Provenance::lossless)
        throw InputError("calibrate: theta0 must be a lossless prefix");
    for (const auto& seq : corpus) detail::check_sequence(theta0, seq.tokens);

    // FP targets are constant across training; compute them once.
    std::vector<detail::SequenceTargets> targets(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i)
        targets[i] = detail::fp_targets(fp, corpus[i].tokens, theta0.prefix_len);

    CalibReport report;
    IntactKV theta = theta0;
    report.initial_loss = detail::corpus_loss(q, theta, targets, corpus, &report.layer_initial);
    if (cfg.grad_check_coords > 0)
        report.grad_check_max_rel_error =
            grad_check(fp, q, theta0, corpus[0].tokens, cfg.grad_check_coords, cfg.grad_check_h,
                       cfg.seed, std::max(corpus[0].loss_start, theta0.prefix_len));

    PrefixGrad adam_m = PrefixGrad::zeros_like(theta0);
    PrefixGrad adam_v = PrefixGrad::zeros_like(theta0);
    const std::size_t group = cfg.batch * cfg.grad_accum;
    std::size_t n_threads = cfg.threads ? cfg.threads : std::thread::hardware_concurrency();
    if (n_threads < 1) n_threads = 1;

    std::size_t t_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t begin = 0; begin < corpus.size(); begin += group) {
            const std::size_t end = std::min(begin + group, corpus.size());
            const std::size_t count = end - begin;

            std::vector<PrefixGrad> grads(count);
            Vector losses(count, 0.0);
            std::vector<std::thread> workers;
            std::atomic<std::size_t> next{0};
            auto worker = [&]() {
                for (;;) {
                    const std::size_t k = next.fetch_add(1);
                    if (k >= count) return;
                    const auto& seq = corpus[begin + k];
                    auto res = detail::eval_sequence(
                        q, theta, targets[begin + k], seq.tokens,
                        std::max(seq.loss_start, theta.prefix_len), true);
                    losses[k] = res.loss;
                    grads[k] = std::move(res.grad);
                }
            };
            const std::size_t spawn = std::min(n_threads, count);
            for (std::size_t w = 1; w < spawn; ++w) workers.emplace_back(worker);
            worker();
            for (auto& w : workers) w.join();

            PrefixGrad gsum = std::move(grads[0]);
            for (std::size_t k = 1; k < count; ++k) gsum.add(grads[k]);  // fixed order
            gsum.scale(1.0 / static_cast<double>(count));
            double loss_mean = 0.0;
            for (double v : losses) loss_mean += v;
            loss_mean /= static_cast<double>(count);
            report.step_losses.push_back(loss_mean);

            ++t_step;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_step));
            auto update = [&](Matrix& param, Matrix& mm, Matrix& vv, const Matrix& g) {
                for (std::size_t i = 0; i < param.data.size(); ++i) {
                    mm.data[i] = cfg.beta1 * mm.data[i] + (1.0 - cfg.beta1) * g.data[i];
                    vv.data[i] = cfg.beta2 * vv.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
                    const double mhat = mm.data[i] / bc1;
                    const double vhat = vv.data[i] / bc2;
                    param.data[i] -= cfg.learning_rate *
                                     (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                                      cfg.weight_decay * param.data[i]);
                }
            };
            for (std::size_t l = 0; l < theta.keys.size(); ++l)
                for (std::size_t h = 0; h < theta.keys[l].size(); ++h) {
                    update(theta.keys[l][h], adam_m.keys[l][h], adam_v.keys[l][h],
                           gsum.keys[l][h]);
                    update(theta.values[l][h], adam_m.values[l][h], adam_v.values[l][h],
                           gsum.values[l][h]);
                }
        }
    }
    report.updates = t_step;

    Vector layer_final;
    const double final_loss = detail::corpus_loss(q, theta, targets, corpus, &layer_final);
    if (final_loss <= report.initial_loss) {
        report.final_loss = final_loss;
        report.layer_final = std::move(layer_final);
        theta.provenance = Provenance::calibrated;
        return {std::move(theta), std::move(report)};
    }
    // Training regressed past the starting point: keep the best-seen theta,
    // which is the initial one under a corpus-level comparison.
    report.final_loss = report.initial_loss;
    report.layer_final = report.layer_initial;
    report.reverted_to_initial = true;
    IntactKV best = theta0;
    best.provenance = Provenance::calibrated;
    return {std::move(best), std::move(report)};
}

}  // namespace ikv
