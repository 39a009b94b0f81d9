#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "ikv/bound.hpp"
#include "ikv/calibration.hpp"
#include "ikv/errors.hpp"
#include "ikv/intactkv.hpp"
#include "ikv/io.hpp"
#include "ikv/model.hpp"
#include "ikv/pivot.hpp"
#include "ikv/quant.hpp"
#include "ikv/rng.hpp"

namespace ikv {

// Round-trip-exact decimal rendering, so identical runs emit identical bytes.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---- demo recipes ----------------------------------------------------------

// The canonical desk-scale subject: seed-42 weights with a scaled-embedding
// attention sink on token 0.
inline Model make_sink_model(std::uint64_t seed = 42, std::size_t sink_token = 0,
                             std::size_t sink_channels = 4, double sink_scale = 1e3,
                             const ModelConfig& cfg = ModelConfig{}) {
    Model m = init_random(cfg, seed);
    if (sink_scale == 1.0 || sink_channels == 0) return m;
    std::vector<std::size_t> channels(sink_channels);
    for (std::size_t i = 0; i < sink_channels; ++i) channels[i] = i;
    return inject_attention_sink(m, sink_token, channels, sink_scale);
}

// Samples token sequences from a teacher model (temperature 1), sharing a
// common prefix so the sequences suit both the size sweep and calibration.
// Every sequence starts at start_token, the designated sink position.
inline std::vector<CorpusSequence> sample_corpus(const Model& teacher, std::size_t n_sequences,
                                                 std::size_t length, std::size_t common_prefix,
                                                 int start_token, std::uint64_t seed) {
    if (length < 2 || length > teacher.config.max_seq)
        throw InputError("sample_corpus: bad sequence length");
    if (common_prefix < 1 || common_prefix >= length)
        throw InputError("sample_corpus: common prefix must be in [1, length)");
    if (n_sequences < 1) throw InputError("sample_corpus: need at least one sequence");

    auto sample_next = [&](const Vector& logits, Rng& rng) {
        Vector p = logits;
        softmax_row_inplace(p);
        const double u = rng.uniform01();
        double acc = 0.0;
        for (std::size_t t = 0; t < p.size(); ++t) {
            acc += p[t];
            if (u < acc) return static_cast<int>(t);
        }
        return static_cast<int>(p.size() - 1);
    };

    // Shared prefix, sampled once.
    std::vector<int> prefix = {start_token};
    {
        Rng rng(Rng::substream(seed, 0));
        KVCache cache = KVCache::empty(teacher.config);
        Vector logits = decode_step(teacher, cache, start_token);
        while (prefix.size() < common_prefix) {
            const int next = sample_next(logits, rng);
            prefix.push_back(next);
            logits = decode_step(teacher, cache, next);
        }
    }

    std::vector<CorpusSequence> out(n_sequences);
    for (std::size_t s = 0; s < n_sequences; ++s) {
        Rng rng(Rng::substream(seed, s + 1));
        KVCache cache = KVCache::empty(teacher.config);
        std::vector<int>& toks = out[s].tokens;
        toks = prefix;
        Vector logits;
        for (int t : prefix) logits = decode_step(teacher, cache, t);
        while (toks.size() < length) {
            const int next = sample_next(logits, rng);
            toks.push_back(next);
            if (toks.size() < length) logits = decode_step(teacher, cache, next);
        }
    }
    return out;
}

// ---- analyze ----------------------------------------------------------------

struct AnalyzeResult {
    PivotReport report;
    std::vector<Vector> per_layer_mass;  // [layer][position]
};

inline AnalyzeResult analyze_sequence(const Model& model, std::span<const int> tokens,
                                      std::size_t layer, double act_ratio, double mass_ratio) {
    ForwardTrace trace = forward(model, tokens);
    AnalyzeResult out;
    out.report = pivot_report(trace, tokens, layer, act_ratio, mass_ratio);
    out.per_layer_mass.resize(model.config.n_layers);
    for (std::size_t l = 0; l < model.config.n_layers; ++l)
        out.per_layer_mass[l] = attention_mass(trace, l);
    return out;
}

inline std::string pivot_report_csv(const PivotReport& rep) {
    std::string csv = "position,token_id,max_abs_activation,attn_mass,is_pivot\n";
    for (const auto& r : rep.rows) {
        csv += std::to_string(r.position) + ',' + std::to_string(r.token_id) + ',' +
               fmt_double(r.max_abs_activation) + ',' + fmt_double(r.attn_mass) + ',' +
               (r.is_pivot ? "1" : "0") + '\n';
    }
    return csv;
}

inline std::string attention_mass_csv(const std::vector<Vector>& per_layer_mass) {
    std::string csv = "layer,position,attn_mass\n";
    for (std::size_t l = 0; l < per_layer_mass.size(); ++l)
        for (std::size_t p = 0; p < per_layer_mass[l].size(); ++p)
            csv += std::to_string(l) + ',' + std::to_string(p) + ',' +
                   fmt_double(per_layer_mass[l][p]) + '\n';
    return csv;
}

// ---- IntactKV size sweep -----------------------------------------------------

struct SweepRow {
    std::size_t m = 0;
    double last_layer_mse = 0.0;
    double attn_mse = 0.0;
};

struct SweepReport {
    std::vector<SweepRow> rows;
    int bits = 0;
    std::size_t group_size = 0;
    std::size_t sequences = 0;
    std::size_t eval_start = 0;  // first scored position (the common prefix length)
    std::uint64_t seed = 0;
};

namespace detail {

inline std::size_t common_prefix_length(const std::vector<CorpusSequence>& seqs,
                                        std::size_t count) {
    std::size_t p = seqs[0].tokens.size();
    for (std::size_t i = 1; i < count; ++i) {
        const auto& a = seqs[0].tokens;
        const auto& b = seqs[i].tokens;
        std::size_t k = 0;
        while (k < p && k < b.size() && a[k] == b[k]) ++k;
        p = k;
    }
    return p;
}

}  // namespace detail

// Quantization loss against the full-precision model as a function of the
// lossless prefix length. m = 0 is the no-prefix baseline (a plain quantized
// forward). The loss is scored on the positions after the sequences' common
// prefix, so every m is measured on identical positions.
inline SweepReport sweep_kv_size(const Model& fp, const std::vector<CorpusSequence>& corpus,
                                 int bits, std::size_t group_size, std::size_t m_max,
                                 std::size_t n_sequences, std::uint64_t seed = 0) {
    if (corpus.size() < n_sequences || n_sequences == 0)
        throw InputError("sweep_kv_size: not enough sequences");
    std::size_t shortest = corpus[0].tokens.size();
    for (std::size_t i = 0; i < n_sequences; ++i)
        shortest = std::min(shortest, corpus[i].tokens.size());
    if (m_max >= shortest) throw InputError("sweep_kv_size: m_max must be below sequence length");
    const std::size_t eval_start = detail::common_prefix_length(corpus, n_sequences);
    if (eval_start < m_max)
        throw InputError("sweep_kv_size: sequences share too short a common prefix");
    if (eval_start >= shortest)
        throw InputError("sweep_kv_size: no positions to score past the common prefix");

    QuantConfig qc;
    qc.bits = bits;
    qc.group_size = group_size;
    const Model q = quantize_model_weights(fp, qc);

    // Full-precision references, one per sequence.
    std::vector<ForwardTrace> refs(n_sequences);
    for (std::size_t i = 0; i < n_sequences; ++i) refs[i] = forward(fp, corpus[i].tokens);

    SweepReport rep;
    rep.bits = bits;
    rep.group_size = group_size;
    rep.sequences = n_sequences;
    rep.eval_start = eval_start;
    rep.seed = seed;

    const std::size_t L = fp.config.n_layers;
    for (std::size_t m = 0; m <= m_max; ++m) {
        IntactKV theta;
        if (m > 0)
            theta = generate(fp, std::span<const int>(corpus[0].tokens.data(), m));
        double last_sum = 0.0, attn_sum = 0.0;
        std::size_t last_count = 0, attn_count = 0;
        for (std::size_t i = 0; i < n_sequences; ++i) {
            const auto& tokens = corpus[i].tokens;
            ForwardTrace got;
            std::size_t start;  // absolute position of got's first row
            if (m == 0) {
                got = forward(q, tokens);
                start = 0;
            } else {
                auto res = attach_and_prefill(
                    q, theta, std::span<const int>(tokens.data() + m, tokens.size() - m), false);
                got = std::move(res.trace);
                start = m;
            }
            for (std::size_t pos = eval_start; pos < tokens.size(); ++pos) {
                for (std::size_t c = 0; c < fp.config.d_model; ++c) {
                    const double dl = refs[i].layer_outputs[L - 1](pos, c) -
                                      got.layer_outputs[L - 1](pos - start, c);
                    last_sum += dl * dl;
                    ++last_count;
                    for (std::size_t l = 0; l < L; ++l) {
                        const double da = refs[i].attn_outputs[l](pos, c) -
                                          got.attn_outputs[l](pos - start, c);
                        attn_sum += da * da;
                        ++attn_count;
                    }
                }
            }
        }
        rep.rows.push_back({m, last_sum / static_cast<double>(last_count),
                            attn_sum / static_cast<double>(attn_count)});
    }
    return rep;
}

inline std::string sweep_csv(const SweepReport& rep) {
    std::string csv = "m,last_layer_mse,attn_mse,bits,group_size,seed\n";
    for (const auto& r : rep.rows)
        csv += std::to_string(r.m) + ',' + fmt_double(r.last_layer_mse) + ',' +
               fmt_double(r.attn_mse) + ',' + std::to_string(rep.bits) + ',' +
               std::to_string(rep.group_size) + ',' + std::to_string(rep.seed) + '\n';
    return csv;
}

// ---- mixed-precision KV MSE --------------------------------------------------

// Mean layer-output MSE against the full-precision reference when decoding
// with a quantized KV cache. keep_prefix_fp keeps the attached prefix rows
// full precision; otherwise even those rows are quantized before decoding.
inline double mixed_kv_continuation_mse(const Model& fp, const Model& q, const IntactKV& theta,
                                        const std::vector<CorpusSequence>& corpus, int kv_bits,
                                        bool keep_prefix_fp) {
    if (corpus.empty()) throw InputError("mixed_kv_continuation_mse: empty corpus");
    const std::size_t m = theta.prefix_len;
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& seq : corpus) {
        detail::check_sequence(theta, seq.tokens);
        ForwardTrace ref = forward(fp, seq.tokens);
        KVCache cache = cache_from_prefix(theta, q.config);
        if (kv_bits > 0 && !keep_prefix_fp) {
            QuantConfig kq;
            kq.bits = kv_bits;
            kq.group_size = 1;
            cache = quantize_kv_dynamic(cache, kq, 0);
        }
        EngineOptions opt;
        opt.want_logits = false;
        if (kv_bits > 0) {
            opt.kv_quant.enabled = true;
            opt.kv_quant.bits = kv_bits;
            opt.kv_quant.keep_prefix_fp = keep_prefix_fp ? m : 0;
        }
        ForwardTrace got;
        extend_cache(q, cache, std::span<const int>(seq.tokens.data() + m, seq.tokens.size() - m),
                     opt, &got);
        for (std::size_t l = 0; l < q.config.n_layers; ++l)
            for (std::size_t i = 0; i < got.layer_outputs[l].rows; ++i)
                for (std::size_t c = 0; c < q.config.d_model; ++c) {
                    const double d =
                        ref.layer_outputs[l](m + i, c) - got.layer_outputs[l](i, c);
                    sum += d * d;
                    ++count;
                }
    }
    return sum / static_cast<double>(count);
}

// ---- perplexity ---------------------------------------------------------------

struct PplRow {
    std::size_t sequence = 0;
    std::size_t scored_tokens = 0;
    double nll = 0.0;
};

struct PplReport {
    std::string dataset;
    std::vector<PplRow> rows;
    std::size_t total_scored = 0;
    double total_nll = 0.0;
    double perplexity = 1.0;  // exp(mean token NLL)
};

struct PplOptions {
    const IntactKV* intactkv = nullptr;  // when set, sequences are forced to begin with its tokens
    KvQuantPolicy kv_quant;
    std::size_t score_start = 1;  // first target position scored
    std::string dataset = "corpus";
};

namespace detail {

inline double nll_of_target(std::span<const double> logits, int target) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    return mx + std::log(sum) - logits[static_cast<std::size_t>(target)];
}

}  // namespace detail

// exp(mean token NLL) of the model over the corpus. With an IntactKV prefix
// the first prefix_len tokens of every sequence are substituted by the
// prefix tokens and scoring starts after them.
inline PplReport eval_ppl(const Model& model, const std::vector<CorpusSequence>& corpus,
                          const PplOptions& opts) {
    if (corpus.empty()) throw InputError("eval_ppl: empty corpus");
    PplReport rep;
    rep.dataset = opts.dataset;
    const std::size_t m = opts.intactkv ? opts.intactkv->prefix_len : 0;
    const std::size_t score_start = std::max(opts.score_start, m + 1);

    for (std::size_t s = 0; s < corpus.size(); ++s) {
        std::vector<int> tokens = corpus[s].tokens;
        if (tokens.size() < score_start + 1)
            throw InputError("eval_ppl: sequence too short to score");
        if (opts.intactkv)
            for (std::size_t i = 0; i < m; ++i) tokens[i] = opts.intactkv->prefix_tokens[i];

        EngineOptions opt;
        opt.want_logits = true;
        opt.kv_quant = opts.kv_quant;

        Matrix logits;
        std::size_t logits_start = 0;
        KVCache cache;
        if (opts.intactkv) {
            cache = cache_from_prefix(*opts.intactkv, model.config);
            logits = extend_cache(model, cache,
                                  std::span<const int>(tokens.data() + m, tokens.size() - m), opt);
            logits_start = m;
        } else {
            cache = KVCache::empty(model.config);
            logits = extend_cache(model, cache, tokens, opt);
        }

        PplRow row;
        row.sequence = s;
        for (std::size_t t = score_start; t < tokens.size(); ++t) {
            row.nll += detail::nll_of_target(logits.row_span(t - 1 - logits_start), tokens[t]);
            ++row.scored_tokens;
        }
        rep.total_nll += row.nll;
        rep.total_scored += row.scored_tokens;
        rep.rows.push_back(row);
    }
    rep.perplexity = std::exp(rep.total_nll / static_cast<double>(rep.total_scored));
    return rep;
}

inline std::string ppl_csv(const PplReport& rep) {
    std::string csv = "dataset,sequence,scored_tokens,nll,ppl\n";
    for (const auto& r : rep.rows) {
        const double ppl = std::exp(r.nll / static_cast<double>(r.scored_tokens));
        csv += rep.dataset + ',' + std::to_string(r.sequence) + ',' +
               std::to_string(r.scored_tokens) + ',' + fmt_double(r.nll) + ',' + fmt_double(ppl) +
               '\n';
    }
    csv += rep.dataset + ",aggregate," + std::to_string(rep.total_scored) + ',' +
           fmt_double(rep.total_nll) + ',' + fmt_double(rep.perplexity) + '\n';
    return csv;
}

// ---- bound campaign ------------------------------------------------------------

struct BoundTrialRow {
    std::size_t trial = 0;
    std::size_t n = 0, d = 0;
    double delta = 0.0;
    BoundReport report;
    std::uint64_t seed = 0;
};

struct BoundCampaign {
    std::vector<BoundTrialRow> rows;
    std::size_t dominance_violations = 0;
    std::size_t gap_violations = 0;
};

inline BoundCampaign bound_campaign(std::size_t n, std::size_t d, double delta,
                                    std::size_t trials, std::size_t pivot_count,
                                    std::uint64_t seed) {
    if (n == 0 || d == 0) throw InputError("bound_campaign: invalid sizes");
    if (pivot_count > n) throw InputError("bound_campaign: pivot_count exceeds n");
    BoundCampaign out;
    for (std::size_t t = 0; t < trials; ++t) {
        BoundTrialRow row;
        row.trial = t;
        row.n = n;
        row.d = d;
        row.delta = delta;
        row.seed = Rng::substream(seed, t);
        BoundInstance inst = random_bound_instance(n, d, delta, pivot_count, row.seed);
        row.report = head_error_bound(inst);
        if (row.report.actual > row.report.bound) ++out.dominance_violations;
        if (pivot_count > 0) {
            BoundGap gap = intactkv_bound_gap(inst);
            if (gap.with_intactkv.bound > gap.without_intactkv.bound + 1e-12)
                ++out.gap_violations;
        }
        out.rows.push_back(row);
    }
    return out;
}

inline std::string bound_csv(const BoundCampaign& c) {
    std::string csv = "trial,n,d,delta,actual,bound,ratio,C1,C2,C3,seed\n";
    for (const auto& r : c.rows) {
        csv += std::to_string(r.trial) + ',' + std::to_string(r.n) + ',' + std::to_string(r.d) +
               ',' + fmt_double(r.delta) + ',' + fmt_double(r.report.actual) + ',' +
               fmt_double(r.report.bound) + ',' + fmt_double(r.report.ratio) + ',' +
               fmt_double(r.report.c1) + ',' + fmt_double(r.report.c2) + ',' +
               fmt_double(r.report.c3) + ',' + std::to_string(r.seed) + '\n';
    }
    return csv;
}

// ---- calibration CSV ------------------------------------------------------------

inline std::string calib_csv(const CalibReport& rep) {
    std::string csv = "step,loss\n";
    csv += "0," + fmt_double(rep.initial_loss) + '\n';
    for (std::size_t i = 0; i < rep.step_losses.size(); ++i)
        csv += std::to_string(i + 1) + ',' + fmt_double(rep.step_losses[i]) + '\n';
    return csv;
}

inline std::string calib_layer_csv(const CalibReport& rep) {
    std::string csv = "layer,initial_loss,final_loss\n";
    for (std::size_t l = 0; l < rep.layer_initial.size(); ++l)
        csv += std::to_string(l) + ',' + fmt_double(rep.layer_initial[l]) + ',' +
               fmt_double(rep.layer_final[l]) + '\n';
    return csv;
}

}  // namespace ikv
