#pragma once

#include <algorithm>
#include <vector>

#include "ikv/errors.hpp"
#include "ikv/model.hpp"

namespace ikv {

// Per-position pivot statistics at one layer.
struct PivotRow {
    std::size_t position = 0;
    int token_id = 0;
    double max_abs_activation = 0.0;
    double attn_mass = 0.0;
    bool is_pivot = false;
};

struct PivotReport {
    std::size_t layer = 0;
    double act_ratio = 0.0;
    double mass_ratio = 0.0;
    std::vector<PivotRow> rows;
};

// value_t = max over channels of |hidden[layer][t][.]|
inline Vector token_activation_stats(const ForwardTrace& trace, std::size_t layer) {
    if (layer >= trace.layer_outputs.size())
        throw IndexError("token_activation_stats: layer out of range");
    const Matrix& h = trace.layer_outputs[layer];
    Vector out(h.rows, 0.0);
    for (std::size_t t = 0; t < h.rows; ++t)
        for (std::size_t c = 0; c < h.cols; ++c)
            out[t] = std::max(out[t], std::abs(h(t, c)));
    return out;
}

// Received attention mass, mean pooled over heads and query positions:
// mass_t = (1/(H*n)) sum_heads sum_queries attn[query][t]. Because every
// query row is stochastic, the masses sum to 1.
inline Vector attention_mass(const ForwardTrace& trace, std::size_t layer) {
    if (layer >= trace.attn_scores.size()) throw IndexError("attention_mass: layer out of range");
    const auto& heads = trace.attn_scores[layer];
    const std::size_t n = heads.front().rows;
    const std::size_t support = heads.front().cols;
    Vector out(support, 0.0);
    for (const Matrix& s : heads)
        for (std::size_t q = 0; q < n; ++q)
            for (std::size_t t = 0; t < support; ++t) out[t] += s(q, t);
    const double denom = static_cast<double>(heads.size()) * static_cast<double>(n);
    for (double& v : out) v /= denom;
    return out;
}

namespace detail {

inline double median(Vector v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Flags position t iff its max-abs activation is at least act_ratio times
// the median, or its received mass is at least mass_ratio times the uniform
// 1/n baseline; evaluated at the final layer, where outliers are largest.
// There is no canonical decision rule, so both thresholds are explicit knobs.
inline std::vector<std::size_t> detect_pivots(const ForwardTrace& trace, double act_ratio,
                                              double mass_ratio) {
    if (act_ratio <= 1.0 || mass_ratio <= 1.0)
        throw InputError("detect_pivots: ratios must exceed 1");
    const std::size_t last = trace.layer_outputs.size() - 1;
    const Vector act = token_activation_stats(trace, last);
    const Vector mass = attention_mass(trace, last);
    const double act_med = detail::median(act);
    const double n = static_cast<double>(mass.size());
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < act.size(); ++t) {
        const bool act_hit = act[t] >= act_ratio * act_med;
        const bool mass_hit = mass[t] >= mass_ratio / n;
        if (act_hit || mass_hit) out.push_back(t);
    }
    return out;
}

inline PivotReport pivot_report(const ForwardTrace& trace, std::span<const int> tokens,
                                std::size_t layer, double act_ratio, double mass_ratio) {
    PivotReport rep;
    rep.layer = layer;
    rep.act_ratio = act_ratio;
    rep.mass_ratio = mass_ratio;
    const Vector act = token_activation_stats(trace, layer);
    const Vector mass = attention_mass(trace, layer);
    const auto pivots = detect_pivots(trace, act_ratio, mass_ratio);
    rep.rows.resize(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        rep.rows[t].position = t;
        rep.rows[t].token_id = tokens[t];
        rep.rows[t].max_abs_activation = act[t];
        rep.rows[t].attn_mass = mass[t];
        rep.rows[t].is_pivot = std::find(pivots.begin(), pivots.end(), t) != pivots.end();
    }
    return rep;
}

}  // namespace ikv
