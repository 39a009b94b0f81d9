#pragma once

#include <span>
#include <string>
#include <vector>

#include "ikv/errors.hpp"
#include "ikv/io.hpp"
#include "ikv/matrix.hpp"
#include "ikv/quant.hpp"
#include "ikv/rng.hpp"

namespace ikv {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 172;
    std::size_t vocab_size = 256;
    std::size_t max_seq = 128;
    double rope_theta = 10000.0;
    double rmsnorm_eps = 1e-6;
    bool use_rope = true;

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 ||
            max_seq == 0)
            throw InputError("ModelConfig: zero-sized dimension");
        if (d_model % n_heads != 0)
            throw InputError("ModelConfig: d_model must be divisible by n_heads");
        if (use_rope && head_dim() % 2 != 0)
            throw InputError("ModelConfig: head dim must be even with rotary positions");
    }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;   // d_model x d_model
    Matrix w_gate, w_up;     // d_model x d_ff
    Matrix w_down;           // d_ff x d_model
    Vector attn_norm_gain;   // d_model
    Vector ffn_norm_gain;    // d_model
};

struct ModelWeights {
    Matrix token_embedding;  // vocab_size x d_model
    std::vector<LayerWeights> layers;
    Vector final_norm_gain;  // d_model
    Matrix output_head;      // d_model x vocab_size
};

struct Model {
    ModelConfig config;
    ModelWeights weights;
};

// Per-layer, per-head key/value rows; keys are stored post-rotary, so a
// cached prefix row is bound to its absolute position.
struct KVCache {
    std::size_t seq_len = 0;
    std::vector<std::vector<Matrix>> keys;    // [layer][head] (seq_len x head_dim)
    std::vector<std::vector<Matrix>> values;  // [layer][head]

    static KVCache empty(const ModelConfig& cfg) {
        KVCache c;
        c.keys.assign(cfg.n_layers, std::vector<Matrix>(cfg.n_heads, Matrix(0, cfg.head_dim())));
        c.values.assign(cfg.n_layers, std::vector<Matrix>(cfg.n_heads, Matrix(0, cfg.head_dim())));
        return c;
    }
};

// Everything the analysis modules read back from a forward pass. Score
// matrices cover the processed positions as rows and the full attended
// support as columns (zeros where causality forbids attention).
struct ForwardTrace {
    std::size_t start_pos = 0;                     // absolute position of the first processed token
    std::vector<Matrix> layer_outputs;             // [layer] (n x d_model)
    std::vector<Matrix> attn_outputs;              // [layer] (n x d_model), pre-residual
    std::vector<std::vector<Matrix>> attn_scores;  // [layer][head] (n x (start_pos + n))
    KVCache cache;
    Matrix logits;                                 // n x vocab_size
};

// Intermediates recorded for reverse-mode passes.
struct LayerCapture {
    Matrix x_in, a, x_mid, b, x_out;       // n x d_model
    Vector inv_rms_attn, inv_rms_ffn;      // n
    std::vector<Matrix> q_rot;             // [head] (n x head_dim)
    std::vector<std::vector<Vector>> scores;  // [head][pos] length start+pos+1
    Matrix z_gate, z_up;                   // n x d_ff
};

struct ForwardCapture {
    std::size_t start_pos = 0;
    std::vector<LayerCapture> layers;
};

// Dynamic mixed-precision KV policy: rows appended at absolute positions
// >= keep_prefix_fp are immediately fake-quantized with per-(head, position)
// asymmetric parameters; earlier rows stay full precision.
struct KvQuantPolicy {
    bool enabled = false;
    int bits = 8;
    std::size_t keep_prefix_fp = 0;
};

struct EngineOptions {
    bool want_logits = true;
    KvQuantPolicy kv_quant;
};

namespace detail {

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

// y = gain .* x * inv, inv = 1/sqrt(mean(x^2) + eps); returns inv for reuse.
inline double rmsnorm_into(std::span<const double> x, std::span<const double> gain, double eps,
                           std::span<double> y) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * x[i] * inv;
    return inv;
}

// Asymmetric fake-quantization of one KV row in place (one group per row).
inline void fake_quant_row_inplace(std::span<double> row, int bits) {
    QuantConfig cfg;
    cfg.bits = bits;
    cfg.group_size = row.size();
    std::vector<std::uint8_t> codes(row.size());
    const auto p = quantize_group(row.data(), row.size(), cfg, codes.data());
    for (std::size_t i = 0; i < row.size(); ++i)
        row[i] = p.scale * (static_cast<double>(codes[i]) - p.zero_point);
}

}  // namespace detail

// Processes `tokens` at absolute positions starting at cache.seq_len,
// appending each position's keys/values to every layer of the cache.
// This single path backs whole-sequence prefill, stepwise decoding, and
// prefix-seeded continuation, so they agree bit for bit.
inline Matrix extend_cache(const Model& model, KVCache& cache, std::span<const int> tokens,
                           const EngineOptions& opt, ForwardTrace* trace = nullptr,
                           ForwardCapture* capture = nullptr) {
    const ModelConfig& cfg = model.config;
    const ModelWeights& w = model.weights;
    const std::size_t dm = cfg.d_model, dh = cfg.head_dim(), H = cfg.n_heads, L = cfg.n_layers;
    const std::size_t start = cache.seq_len;
    const std::size_t n = tokens.size();

    if (n == 0) throw InputError("extend_cache: empty token span");
    if (start + n > cfg.max_seq) throw CapacityError("extend_cache: cache capacity exceeded");
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw InputError("extend_cache: token id out of vocabulary");
    if (opt.kv_quant.enabled && (opt.kv_quant.bits < 2 || opt.kv_quant.bits > 8))
        throw InputError("extend_cache: KV quantization bits must be in [2, 8]");

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    if (trace) {
        trace->start_pos = start;
        trace->layer_outputs.assign(L, Matrix(n, dm));
        trace->attn_outputs.assign(L, Matrix(n, dm));
        trace->attn_scores.assign(L, std::vector<Matrix>(H, Matrix(n, start + n, 0.0)));
    }
    if (capture) {
        capture->start_pos = start;
        capture->layers.assign(L, LayerCapture{});
        for (auto& lc : capture->layers) {
            lc.x_in = Matrix(n, dm);
            lc.a = Matrix(n, dm);
            lc.x_mid = Matrix(n, dm);
            lc.b = Matrix(n, dm);
            lc.x_out = Matrix(n, dm);
            lc.inv_rms_attn.assign(n, 0.0);
            lc.inv_rms_ffn.assign(n, 0.0);
            lc.q_rot.assign(H, Matrix(n, dh));
            lc.scores.assign(H, std::vector<Vector>(n));
            lc.z_gate = Matrix(n, cfg.d_ff);
            lc.z_up = Matrix(n, cfg.d_ff);
        }
    }

    Matrix logits;
    if (opt.want_logits) logits = Matrix(n, cfg.vocab_size);

    Vector x(dm), a(dm), qrow(dm), krow(dm), vrow(dm), ocat(dm), attn(dm), xmid(dm), b(dm);
    Vector zg(cfg.d_ff), zu(cfg.d_ff), hff(cfg.d_ff), ffn(dm), fn(dm);

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pos = start + i;
        const double* emb = w.token_embedding.row(static_cast<std::size_t>(tokens[i]));
        std::copy(emb, emb + dm, x.begin());

        for (std::size_t l = 0; l < L; ++l) {
            const LayerWeights& lw = w.layers[l];
            const double inv_attn = detail::rmsnorm_into(x, lw.attn_norm_gain, cfg.rmsnorm_eps, a);

            std::fill(qrow.begin(), qrow.end(), 0.0);
            std::fill(krow.begin(), krow.end(), 0.0);
            std::fill(vrow.begin(), vrow.end(), 0.0);
            linear_accumulate(a, lw.wq, qrow);
            linear_accumulate(a, lw.wk, krow);
            linear_accumulate(a, lw.wv, vrow);

            for (std::size_t h = 0; h < H; ++h) {
                std::span<double> qh(qrow.data() + h * dh, dh);
                std::span<double> kh(krow.data() + h * dh, dh);
                std::span<double> vh(vrow.data() + h * dh, dh);
                if (cfg.use_rope) {
                    rope_row_inplace(qh, pos, cfg.rope_theta);
                    rope_row_inplace(kh, pos, cfg.rope_theta);
                }
                if (opt.kv_quant.enabled && pos >= opt.kv_quant.keep_prefix_fp) {
                    detail::fake_quant_row_inplace(kh, opt.kv_quant.bits);
                    detail::fake_quant_row_inplace(vh, opt.kv_quant.bits);
                }
                cache.keys[l][h].push_row(kh);
                cache.values[l][h].push_row(vh);
            }

            std::fill(ocat.begin(), ocat.end(), 0.0);
            for (std::size_t h = 0; h < H; ++h) {
                const Matrix& K = cache.keys[l][h];
                const Matrix& V = cache.values[l][h];
                std::span<const double> qh(qrow.data() + h * dh, dh);
                const std::size_t support = pos + 1;
                Vector s(support);
                for (std::size_t j = 0; j < support; ++j)
                    s[j] = dot(qh, K.row_span(j)) * inv_sqrt_dh;
                softmax_row_inplace(s);
                double* oh = ocat.data() + h * dh;
                for (std::size_t j = 0; j < support; ++j) {
                    const double* vr = V.row(j);
                    const double sj = s[j];
                    for (std::size_t k = 0; k < dh; ++k) oh[k] += sj * vr[k];
                }
                if (trace) {
                    double* dst = trace->attn_scores[l][h].row(i);
                    std::copy(s.begin(), s.end(), dst);
                }
                if (capture) {
                    std::copy(qh.begin(), qh.end(), capture->layers[l].q_rot[h].row(i));
                    capture->layers[l].scores[h][i] = std::move(s);
                }
            }

            std::fill(attn.begin(), attn.end(), 0.0);
            linear_accumulate(ocat, lw.wo, attn);
            for (std::size_t k = 0; k < dm; ++k) xmid[k] = x[k] + attn[k];

            const double inv_ffn = detail::rmsnorm_into(xmid, lw.ffn_norm_gain, cfg.rmsnorm_eps, b);
            std::fill(zg.begin(), zg.end(), 0.0);
            std::fill(zu.begin(), zu.end(), 0.0);
            linear_accumulate(b, lw.w_gate, zg);
            linear_accumulate(b, lw.w_up, zu);
            for (std::size_t k = 0; k < cfg.d_ff; ++k) hff[k] = detail::silu(zg[k]) * zu[k];
            std::fill(ffn.begin(), ffn.end(), 0.0);
            linear_accumulate(hff, lw.w_down, ffn);

            if (trace) {
                std::copy(attn.begin(), attn.end(), trace->attn_outputs[l].row(i));
            }
            if (capture) {
                LayerCapture& lc = capture->layers[l];
                std::copy(x.begin(), x.end(), lc.x_in.row(i));
                std::copy(a.begin(), a.end(), lc.a.row(i));
                std::copy(xmid.begin(), xmid.end(), lc.x_mid.row(i));
                std::copy(b.begin(), b.end(), lc.b.row(i));
                lc.inv_rms_attn[i] = inv_attn;
                lc.inv_rms_ffn[i] = inv_ffn;
                std::copy(zg.begin(), zg.end(), lc.z_gate.row(i));
                std::copy(zu.begin(), zu.end(), lc.z_up.row(i));
            }

            for (std::size_t k = 0; k < dm; ++k) x[k] = xmid[k] + ffn[k];

            if (trace) std::copy(x.begin(), x.end(), trace->layer_outputs[l].row(i));
            if (capture) std::copy(x.begin(), x.end(), capture->layers[l].x_out.row(i));
        }

        cache.seq_len = pos + 1;

        if (opt.want_logits) {
            detail::rmsnorm_into(x, w.final_norm_gain, cfg.rmsnorm_eps, fn);
            std::fill(logits.row(i), logits.row(i) + cfg.vocab_size, 0.0);
            linear_accumulate(fn, w.output_head, logits.row_span(i));
        }
    }
    return logits;
}

// Whole-sequence forward pass with a full trace.
inline ForwardTrace forward(const Model& model, std::span<const int> tokens) {
    ForwardTrace trace;
    KVCache cache = KVCache::empty(model.config);
    EngineOptions opt;
    trace.logits = extend_cache(model, cache, tokens, opt, &trace);
    trace.cache = std::move(cache);
    return trace;
}

// One autoregressive step: attends over the cache plus itself, appends its
// keys/values, returns the new position's logits.
inline Vector decode_step(const Model& model, KVCache& cache, int token) {
    if (cache.seq_len >= model.config.max_seq) throw CapacityError("decode_step: cache full");
    const int toks[1] = {token};
    EngineOptions opt;
    Matrix logits = extend_cache(model, cache, toks, opt);
    return Vector(logits.row(0), logits.row(0) + logits.cols);
}

// Reproducible pseudorandom initialization: mt19937_64 stream, weights
// uniform in [-sqrt(3/fan_in), sqrt(3/fan_in)] (std 1/sqrt(fan_in)), gains 1.
inline Model init_random(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng rng(seed);

    auto fill = [&rng](Matrix& mat, std::size_t fan_in) {
        const double lim = std::sqrt(3.0 / static_cast<double>(fan_in));
        for (double& v : mat.data) v = rng.uniform(-lim, lim);
    };

    m.weights.token_embedding = Matrix(cfg.vocab_size, cfg.d_model);
    fill(m.weights.token_embedding, cfg.d_model);
    m.weights.layers.resize(cfg.n_layers);
    for (auto& lw : m.weights.layers) {
        lw.wq = Matrix(cfg.d_model, cfg.d_model);
        lw.wk = Matrix(cfg.d_model, cfg.d_model);
        lw.wv = Matrix(cfg.d_model, cfg.d_model);
        lw.wo = Matrix(cfg.d_model, cfg.d_model);
        fill(lw.wq, cfg.d_model);
        fill(lw.wk, cfg.d_model);
        fill(lw.wv, cfg.d_model);
        fill(lw.wo, cfg.d_model);
        lw.w_gate = Matrix(cfg.d_model, cfg.d_ff);
        lw.w_up = Matrix(cfg.d_model, cfg.d_ff);
        lw.w_down = Matrix(cfg.d_ff, cfg.d_model);
        fill(lw.w_gate, cfg.d_model);
        fill(lw.w_up, cfg.d_model);
        fill(lw.w_down, cfg.d_ff);
        lw.attn_norm_gain.assign(cfg.d_model, 1.0);
        lw.ffn_norm_gain.assign(cfg.d_model, 1.0);
    }
    m.weights.final_norm_gain.assign(cfg.d_model, 1.0);
    m.weights.output_head = Matrix(cfg.d_model, cfg.vocab_size);
    fill(m.weights.output_head, cfg.d_model);
    return m;
}

// Scales the given embedding channels of one token, reproducing the
// outlier/attention-sink phenomenon synthetically when that token appears
// at position 0. All other weights are untouched.
inline Model inject_attention_sink(const Model& model, std::size_t token_id,
                                   std::span<const std::size_t> channels, double scale) {
    if (token_id >= model.config.vocab_size)
        throw IndexError("inject_attention_sink: token id out of range");
    for (std::size_t c : channels)
        if (c >= model.config.d_model) throw IndexError("inject_attention_sink: channel out of range");
    if (scale < 1.0) throw InputError("inject_attention_sink: scale must be >= 1");
    Model out = model;
    for (std::size_t c : channels) out.weights.token_embedding(token_id, c) *= scale;
    return out;
}

// Fake-quantizes every projection matrix; embeddings and norm gains stay
// full precision.
inline Model quantize_model_weights(const Model& model, const QuantConfig& cfg) {
    Model out = model;
    for (auto& lw : out.weights.layers) {
        lw.wq = fake_quant(lw.wq, cfg);
        lw.wk = fake_quant(lw.wk, cfg);
        lw.wv = fake_quant(lw.wv, cfg);
        lw.wo = fake_quant(lw.wo, cfg);
        lw.w_gate = fake_quant(lw.w_gate, cfg);
        lw.w_up = fake_quant(lw.w_up, cfg);
        lw.w_down = fake_quant(lw.w_down, cfg);
    }
    out.weights.output_head = fake_quant(out.weights.output_head, cfg);
    return out;
}

// Batch mixed-precision KV quantization: positions >= keep_prefix_fp are
// fake-quantized with per-(head, position-block) asymmetric parameters;
// earlier positions are returned bit-identical.
inline KVCache quantize_kv_dynamic(const KVCache& kv, const QuantConfig& cfg,
                                   std::size_t keep_prefix_fp, std::size_t block = 1) {
    cfg.validate();
    if (block < 1) throw InputError("quantize_kv_dynamic: block must be >= 1");
    if (keep_prefix_fp > kv.seq_len)
        throw IndexError("quantize_kv_dynamic: keep_prefix_fp exceeds cache length");
    KVCache out = kv;
    auto quantize_rows = [&](Matrix& mat) {
        const std::size_t dh = mat.cols;
        for (std::size_t p = keep_prefix_fp; p < mat.rows; p += block) {
            const std::size_t len = std::min(block, mat.rows - p);
            std::span<double> blk(mat.row(p), len * dh);
            QuantConfig rc = cfg;
            rc.group_size = blk.size();
            std::vector<std::uint8_t> codes(blk.size());
            const auto prm = detail::quantize_group(blk.data(), blk.size(), rc, codes.data());
            for (std::size_t k = 0; k < blk.size(); ++k)
                blk[k] = prm.scale * (static_cast<double>(codes[k]) - prm.zero_point);
        }
    };
    for (auto& layer : out.keys)
        for (auto& head : layer) quantize_rows(head);
    for (auto& layer : out.values)
        for (auto& head : layer) quantize_rows(head);
    return out;
}

inline std::size_t param_count(const ModelConfig& cfg) {
    const std::size_t per_layer = 4 * cfg.d_model * cfg.d_model + 2 * cfg.d_model * cfg.d_ff +
                                  cfg.d_ff * cfg.d_model + 2 * cfg.d_model;
    return cfg.vocab_size * cfg.d_model + cfg.n_layers * per_layer + cfg.d_model +
           cfg.d_model * cfg.vocab_size;
}

// ---- model file ("IKVM") -------------------------------------------------
//
// magic "IKVM", version u32=1, config as six u32 + two f64 fields, then all
// weight tensors in declaration order, each a u64 element count followed by
// row-major little-endian f64 payload. Bit-exact round trip.

inline void save_model(const Model& model, const std::string& path) {
    if (!model.config.use_rope)
        throw InputError("save_model: the model file format only represents rotary models");
    BinaryWriter wtr;
    wtr.bytes("IKVM", 4);
    wtr.u32(1);
    const ModelConfig& c = model.config;
    wtr.u32(static_cast<std::uint32_t>(c.n_layers));
    wtr.u32(static_cast<std::uint32_t>(c.d_model));
    wtr.u32(static_cast<std::uint32_t>(c.n_heads));
    wtr.u32(static_cast<std::uint32_t>(c.d_ff));
    wtr.u32(static_cast<std::uint32_t>(c.vocab_size));
    wtr.u32(static_cast<std::uint32_t>(c.max_seq));
    wtr.f64(c.rope_theta);
    wtr.f64(c.rmsnorm_eps);
    wtr.tensor(model.weights.token_embedding);
    for (const auto& lw : model.weights.layers) {
        wtr.tensor(lw.wq);
        wtr.tensor(lw.wk);
        wtr.tensor(lw.wv);
        wtr.tensor(lw.wo);
        wtr.tensor(lw.w_gate);
        wtr.tensor(lw.w_up);
        wtr.tensor(lw.w_down);
        wtr.tensor(lw.attn_norm_gain);
        wtr.tensor(lw.ffn_norm_gain);
    }
    wtr.tensor(model.weights.final_norm_gain);
    wtr.tensor(model.weights.output_head);
    atomic_write_file(path, wtr.buffer());
}

inline Model load_model(const std::string& path) {
    BinaryReader rdr(read_file_bytes(path));
    rdr.magic("IKVM");
    const std::uint64_t ver_at = rdr.offset();
    const std::uint32_t version = rdr.u32();
    if (version != 1) throw FormatError("unsupported model file version " + std::to_string(version), ver_at);

    Model m;
    ModelConfig& c = m.config;
    c.n_layers = rdr.u32();
    c.d_model = rdr.u32();
    c.n_heads = rdr.u32();
    c.d_ff = rdr.u32();
    c.vocab_size = rdr.u32();
    c.max_seq = rdr.u32();
    c.rope_theta = rdr.f64();
    c.rmsnorm_eps = rdr.f64();
    c.use_rope = true;
    try {
        c.validate();
    } catch (const InputError& e) {
        throw FormatError(std::string("invalid model config: ") + e.what(), rdr.offset());
    }

    auto mat = [&rdr](std::size_t r, std::size_t cc, const char* what) {
        Matrix out(r, cc);
        out.data = rdr.tensor(static_cast<std::uint64_t>(r) * cc, what);
        return out;
    };
    m.weights.token_embedding = mat(c.vocab_size, c.d_model, "token_embedding");
    m.weights.layers.resize(c.n_layers);
    for (auto& lw : m.weights.layers) {
        lw.wq = mat(c.d_model, c.d_model, "wq");
        lw.wk = mat(c.d_model, c.d_model, "wk");
        lw.wv = mat(c.d_model, c.d_model, "wv");
        lw.wo = mat(c.d_model, c.d_model, "wo");
        lw.w_gate = mat(c.d_model, c.d_ff, "w_gate");
        lw.w_up = mat(c.d_model, c.d_ff, "w_up");
        lw.w_down = mat(c.d_ff, c.d_model, "w_down");
        lw.attn_norm_gain = rdr.tensor(c.d_model, "attn_norm_gain");
        lw.ffn_norm_gain = rdr.tensor(c.d_model, "ffn_norm_gain");
    }
    m.weights.final_norm_gain = rdr.tensor(c.d_model, "final_norm_gain");
    m.weights.output_head = mat(c.d_model, c.vocab_size, "output_head");
    if (!rdr.exhausted()) throw FormatError("trailing bytes after model payload", rdr.offset());
    return m;
}

}  // namespace ikv
