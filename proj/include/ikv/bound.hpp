#pragma once

#include <cmath>
#include <vector>

#include "ikv/errors.hpp"
#include "ikv/matrix.hpp"
#include "ikv/rng.hpp"

namespace ikv {

// One attention-head perturbation experiment: cached K/V, their quantization
// errors dK/dV, the query, the output projection, and which rows are pivots.
struct BoundInstance {
    Vector q;          // d
    Matrix K, V;       // n x d
    Matrix dK, dV;     // n x d
    Matrix w_o;        // d x d
    std::vector<std::size_t> pivot_set;
    std::uint64_t seed = 0;

    std::size_t n() const { return K.rows; }
    std::size_t d() const { return K.cols; }

    void validate() const {
        if (q.size() != K.cols || V.rows != K.rows || V.cols != K.cols || dK.rows != K.rows ||
            dK.cols != K.cols || dV.rows != K.rows || dV.cols != K.cols || w_o.rows != K.cols ||
            w_o.cols != K.cols)
            throw ShapeError("BoundInstance: inconsistent shapes");
        for (std::size_t p : pivot_set)
            if (p >= K.rows) throw IndexError("BoundInstance: pivot index out of range");
    }
};

struct BoundReport {
    double actual = 0.0;  // ||delta h||_2
    double bound = 0.0;
    double c1 = 0.0, c2 = 0.0, c3 = 0.0;
    double dk_two_inf = 0.0;
    double dv_fro = 0.0;
    double v_spectral = 0.0;
    double q_norm = 0.0;
    double ratio = 0.0;  // actual / bound (0 when bound is 0)
};

struct AttentionHeadResult {
    Vector output;  // d
    Vector scores;  // n, for diagnostics
};

// h = sm(q K^T / sqrt(d)) V W^O for a single decoding query.
inline AttentionHeadResult attention_head(const Vector& q, const Matrix& K, const Matrix& V,
                                          const Matrix& w_o) {
    if (q.size() != K.cols || V.rows != K.rows || V.cols != w_o.rows || w_o.rows != w_o.cols ||
        K.cols != V.cols)
        throw ShapeError("attention_head: inconsistent shapes");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(K.cols));
    AttentionHeadResult res;
    res.scores.resize(K.rows);
    for (std::size_t j = 0; j < K.rows; ++j) res.scores[j] = dot(q, K.row_span(j)) * inv_sqrt_d;
    softmax_row_inplace(res.scores);
    Vector sv(V.cols, 0.0);
    for (std::size_t j = 0; j < V.rows; ++j) {
        const double* vr = V.row(j);
        for (std::size_t k = 0; k < V.cols; ++k) sv[k] += res.scores[j] * vr[k];
    }
    res.output = linear(sv, w_o);
    return res;
}

namespace detail {

inline Matrix add(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

}  // namespace detail

// Evaluates both sides of the head-error inequality
//   ||dh||_2 <= C1 ||dK||_{2,inf} ||dV||_F + C2 ||dK||_{2,inf} + C3 ||dV||_F
// with C3 = ||W^O||_2, C1 = (n^{3/2}/sqrt(d)) C3 ||q||_2, C2 = C1 ||V||_2.
inline BoundReport head_error_bound(const BoundInstance& inst) {
    inst.validate();
    BoundReport rep;
    const auto base = attention_head(inst.q, inst.K, inst.V, inst.w_o);
    const auto moved =
        attention_head(inst.q, detail::add(inst.K, inst.dK), detail::add(inst.V, inst.dV), inst.w_o);
    Vector dh(base.output.size());
    for (std::size_t k = 0; k < dh.size(); ++k) dh[k] = moved.output[k] - base.output[k];
    rep.actual = norm2(dh);

    const double n = static_cast<double>(inst.n());
    const double d = static_cast<double>(inst.d());
    rep.q_norm = norm2(inst.q);
    rep.v_spectral = matrix_norm(inst.V, NormKind::spectral);
    rep.dk_two_inf = matrix_norm(inst.dK, NormKind::two_inf);
    rep.dv_fro = matrix_norm(inst.dV, NormKind::frobenius);
    rep.c3 = matrix_norm(inst.w_o, NormKind::spectral);
    rep.c1 = std::pow(n, 1.5) / std::sqrt(d) * rep.c3 * rep.q_norm;
    rep.c2 = rep.c1 * rep.v_spectral;
    rep.bound = rep.c1 * rep.dk_two_inf * rep.dv_fro + rep.c2 * rep.dk_two_inf +
                rep.c3 * rep.dv_fro;
    rep.ratio = rep.bound > 0.0 ? rep.actual / rep.bound : 0.0;
    return rep;
}

struct PivotSplitNorms {
    double dk_pivot = 0.0;      // ||dK_p||_{2,inf}
    double dk_rest = 0.0;       // ||dK_{\p}||_{2,inf}
    double dv_pivot = 0.0;      // ||dV_p||_F
    double dv_rest = 0.0;       // ||dV_{\p}||_F
};

// Row-partition norms. The wholes reconstruct as
// ||dK||_{2,inf} = max(pivot, rest) and ||dV||_F = sqrt(pivot^2 + rest^2).
inline PivotSplitNorms pivot_split_norms(const Matrix& dK, const Matrix& dV,
                                         std::span<const std::size_t> pivot_set) {
    if (dK.rows != dV.rows) throw ShapeError("pivot_split_norms: row count mismatch");
    std::vector<bool> is_pivot(dK.rows, false);
    for (std::size_t p : pivot_set) {
        if (p >= dK.rows) throw IndexError("pivot_split_norms: pivot index out of range");
        is_pivot[p] = true;
    }
    PivotSplitNorms out;
    double sq_pivot = 0.0, sq_rest = 0.0;
    for (std::size_t i = 0; i < dK.rows; ++i) {
        const double row_k = norm2(dK.row_span(i));
        double row_v_sq = 0.0;
        for (std::size_t k = 0; k < dV.cols; ++k) row_v_sq += dV(i, k) * dV(i, k);
        if (is_pivot[i]) {
            out.dk_pivot = std::max(out.dk_pivot, row_k);
            sq_pivot += row_v_sq;
        } else {
            out.dk_rest = std::max(out.dk_rest, row_k);
            sq_rest += row_v_sq;
        }
    }
    out.dv_pivot = std::sqrt(sq_pivot);
    out.dv_rest = std::sqrt(sq_rest);
    return out;
}

struct BoundGap {
    BoundReport with_intactkv;     // pivot rows of dK, dV zeroed
    BoundReport without_intactkv;  // as given
};

// A lossless prefix zeroes the pivot rows of both error matrices, which can
// only shrink the norms entering the bound.
inline BoundGap intactkv_bound_gap(const BoundInstance& inst) {
    inst.validate();
    if (inst.pivot_set.empty()) throw InputError("intactkv_bound_gap: empty pivot set");
    BoundGap gap;
    gap.without_intactkv = head_error_bound(inst);
    BoundInstance relieved = inst;
    for (std::size_t p : inst.pivot_set)
        for (std::size_t k = 0; k < relieved.dK.cols; ++k) {
            relieved.dK(p, k) = 0.0;
            relieved.dV(p, k) = 0.0;
        }
    gap.with_intactkv = head_error_bound(relieved);
    return gap;
}

// Entries i.i.d. uniform in [-1, 1]; perturbations scaled by delta; pivots
// are the first pivot_count rows. The seed is recorded for replay.
inline BoundInstance random_bound_instance(std::size_t n, std::size_t d, double delta,
                                           std::size_t pivot_count, std::uint64_t seed) {
    if (n == 0 || d == 0) throw InputError("random_bound_instance: empty dimensions");
    if (pivot_count > n) throw InputError("random_bound_instance: pivot_count exceeds n");
    Rng rng(seed);
    BoundInstance inst;
    inst.seed = seed;
    auto fill = [&rng](Matrix& m, double scale) {
        for (double& v : m.data) v = scale * rng.uniform(-1.0, 1.0);
    };
    inst.q.resize(d);
    for (double& v : inst.q) v = rng.uniform(-1.0, 1.0);
    inst.K = Matrix(n, d);
    inst.V = Matrix(n, d);
    inst.dK = Matrix(n, d);
    inst.dV = Matrix(n, d);
    inst.w_o = Matrix(d, d);
    fill(inst.K, 1.0);
    fill(inst.V, 1.0);
    fill(inst.dK, delta);
    fill(inst.dV, delta);
    fill(inst.w_o, 1.0);
    for (std::size_t p = 0; p < pivot_count; ++p) inst.pivot_set.push_back(p);
    return inst;
}

}  // namespace ikv
