#pragma once

#include <string>
#include <vector>

#include "ikv/errors.hpp"
#include "ikv/io.hpp"
#include "ikv/model.hpp"
#include "ikv/quant.hpp"

namespace ikv {

enum class Provenance : std::uint8_t { lossless = 0, calibrated = 1, quantized = 2 };

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::lossless: return "lossless";
        case Provenance::calibrated: return "calibrated";
        case Provenance::quantized: return "quantized";
    }
    return "?";
}

// The KV-cache prefix of the pivot tokens. Keys are stored post-rotary, so
// the prefix is bound to absolute positions 0..m-1: it must sit at the very
// start of a sequence and be consecutive, which is what makes it reusable
// across inputs once generated.
struct IntactKV {
    std::size_t prefix_len = 0;
    std::vector<int> prefix_tokens;
    Provenance provenance = Provenance::lossless;
    std::vector<std::vector<Matrix>> keys;    // [layer][head] (m x head_dim)
    std::vector<std::vector<Matrix>> values;  // [layer][head]
};

// Runs the given model over the prefix tokens and captures every layer's
// and head's KV rows. Generated from the full-precision model this is the
// lossless prefix; the generating model is not needed afterwards.
inline IntactKV generate(const Model& model, std::span<const int> prefix_tokens) {
    if (prefix_tokens.empty()) throw InputError("generate: empty prefix");
    ForwardTrace trace = forward(model, prefix_tokens);
    IntactKV kv;
    kv.prefix_len = prefix_tokens.size();
    kv.prefix_tokens.assign(prefix_tokens.begin(), prefix_tokens.end());
    kv.provenance = Provenance::lossless;
    kv.keys = std::move(trace.cache.keys);
    kv.values = std::move(trace.cache.values);
    return kv;
}

inline void validate_against(const IntactKV& kv, const ModelConfig& cfg) {
    if (kv.prefix_len == 0) throw InputError("IntactKV: prefix_len must be >= 1");
    if (kv.keys.size() != cfg.n_layers || kv.values.size() != cfg.n_layers)
        throw ShapeError("IntactKV: layer count mismatch");
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        if (kv.keys[l].size() != cfg.n_heads || kv.values[l].size() != cfg.n_heads)
            throw ShapeError("IntactKV: head count mismatch");
        for (std::size_t h = 0; h < cfg.n_heads; ++h)
            if (kv.keys[l][h].rows != kv.prefix_len || kv.keys[l][h].cols != cfg.head_dim() ||
                kv.values[l][h].rows != kv.prefix_len || kv.values[l][h].cols != cfg.head_dim())
                throw ShapeError("IntactKV: prefix tensor shape mismatch");
    }
}

// Seeds a fresh cache with the prefix rows, bit for bit.
inline KVCache cache_from_prefix(const IntactKV& kv, const ModelConfig& cfg) {
    validate_against(kv, cfg);
    KVCache cache = KVCache::empty(cfg);
    cache.seq_len = kv.prefix_len;
    cache.keys = kv.keys;
    cache.values = kv.values;
    return cache;
}

struct PrefillResult {
    KVCache cache;
    ForwardTrace trace;  // continuation positions only
};

// Loads the prefix as positions 0..m-1 and processes the continuation at
// absolute positions starting at m (rotary angles included). The prefix
// hidden states are never recomputed.
inline PrefillResult attach_and_prefill(const Model& model, const IntactKV& kv,
                                        std::span<const int> continuation,
                                        bool want_logits = true) {
    if (continuation.empty()) throw InputError("attach_and_prefill: empty continuation");
    PrefillResult out;
    out.cache = cache_from_prefix(kv, model.config);
    EngineOptions opt;
    opt.want_logits = want_logits;
    out.trace.logits = extend_cache(model, out.cache, continuation, opt, &out.trace);
    out.trace.cache = out.cache;
    return out;
}

// Asymmetric fake-quantization of the prefix, one parameter set per
// (layer, head, K/V) tensor; used in the weight-and-activation setting.
inline IntactKV quantize_intactkv(const IntactKV& kv, const QuantConfig& cfg) {
    cfg.validate();
    IntactKV out = kv;
    auto quantize_head = [&cfg](Matrix& m) {
        QuantConfig whole = cfg;
        whole.group_size = m.data.size();
        std::vector<std::uint8_t> codes(m.data.size());
        const auto p = detail::quantize_group(m.data.data(), m.data.size(), whole, codes.data());
        for (std::size_t i = 0; i < m.data.size(); ++i)
            m.data[i] = p.scale * (static_cast<double>(codes[i]) - p.zero_point);
    };
    for (auto& layer : out.keys)
        for (auto& head : layer) quantize_head(head);
    for (auto& layer : out.values)
        for (auto& head : layer) quantize_head(head);
    out.provenance = Provenance::quantized;
    return out;
}

// Mixed-precision assembly: positions < prefix_len bitwise from the prefix,
// the rest from the quantized cache.
inline KVCache assemble_mixed_kv(const KVCache& kv_q, const IntactKV& prefix) {
    if (prefix.prefix_len == 0) throw InputError("assemble_mixed_kv: prefix_len must be >= 1");
    if (prefix.prefix_len > kv_q.seq_len)
        throw IndexError("assemble_mixed_kv: prefix longer than cache");
    if (prefix.keys.size() != kv_q.keys.size())
        throw IndexError("assemble_mixed_kv: layer count mismatch");
    KVCache out = kv_q;
    for (std::size_t l = 0; l < out.keys.size(); ++l) {
        if (prefix.keys[l].size() != out.keys[l].size())
            throw IndexError("assemble_mixed_kv: head count mismatch");
        for (std::size_t h = 0; h < out.keys[l].size(); ++h) {
            for (std::size_t p = 0; p < prefix.prefix_len; ++p) {
                std::copy(prefix.keys[l][h].row(p), prefix.keys[l][h].row(p) + prefix.keys[l][h].cols,
                          out.keys[l][h].row(p));
                std::copy(prefix.values[l][h].row(p),
                          prefix.values[l][h].row(p) + prefix.values[l][h].cols,
                          out.values[l][h].row(p));
            }
        }
    }
    return out;
}

inline std::size_t kv_prefix_element_count(std::size_t n_layers, std::size_t d_model,
                                           std::size_t prefix_len) {
    return 2 * n_layers * prefix_len * d_model;  // K and V, all heads
}

inline double intactkv_storage_ratio(const ModelConfig& cfg, std::size_t prefix_len) {
    return static_cast<double>(kv_prefix_element_count(cfg.n_layers, cfg.d_model, prefix_len)) /
           static_cast<double>(param_count(cfg));
}

// ---- IntactKV file ("IKVP") ------------------------------------------------
//
// magic "IKVP", version u32=1, prefix token ids (u64 count + u32 ids), one
// provenance byte, then per layer, per head, the K then V matrices in the
// model-file tensor encoding. Bit-exact round trip.

inline void save_intactkv(const IntactKV& kv, const std::string& path) {
    BinaryWriter wtr;
    wtr.bytes("IKVP", 4);
    wtr.u32(1);
    wtr.u64(kv.prefix_tokens.size());
    for (int t : kv.prefix_tokens) wtr.u32(static_cast<std::uint32_t>(t));
    const char prov = static_cast<char>(kv.provenance);
    wtr.bytes(&prov, 1);
    for (std::size_t l = 0; l < kv.keys.size(); ++l)
        for (std::size_t h = 0; h < kv.keys[l].size(); ++h) {
            wtr.tensor(kv.keys[l][h]);
            wtr.tensor(kv.values[l][h]);
        }
    atomic_write_file(path, wtr.buffer());
}

inline IntactKV load_intactkv(const std::string& path, const ModelConfig& cfg) {
    BinaryReader rdr(read_file_bytes(path));
    rdr.magic("IKVP");
    const std::uint64_t ver_at = rdr.offset();
    const std::uint32_t version = rdr.u32();
    if (version != 1)
        throw FormatError("unsupported IntactKV file version " + std::to_string(version), ver_at);
    IntactKV kv;
    const std::uint64_t m = rdr.u64();
    if (m == 0) throw FormatError("IntactKV file with empty prefix", rdr.offset());
    kv.prefix_len = m;
    kv.prefix_tokens.resize(m);
    for (auto& t : kv.prefix_tokens) t = static_cast<int>(rdr.u32());
    const std::uint64_t prov_at = rdr.offset();
    const std::uint8_t prov = rdr.u8();
    kv.keys.assign(cfg.n_layers, std::vector<Matrix>(cfg.n_heads));
    kv.values.assign(cfg.n_layers, std::vector<Matrix>(cfg.n_heads));
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            Matrix k(m, cfg.head_dim());
            k.data = rdr.tensor(m * cfg.head_dim(), "K_prefix");
            Matrix v(m, cfg.head_dim());
            v.data = rdr.tensor(m * cfg.head_dim(), "V_prefix");
            kv.keys[l][h] = std::move(k);
            kv.values[l][h] = std::move(v);
        }
    if (!rdr.exhausted()) throw FormatError("trailing bytes after IntactKV payload", rdr.offset());
    if (prov > 2) throw FormatError("invalid provenance byte", prov_at);
    kv.provenance = static_cast<Provenance>(prov);
    validate_against(kv, cfg);
    return kv;
}

}  // namespace ikv
