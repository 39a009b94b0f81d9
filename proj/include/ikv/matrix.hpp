#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ikv/errors.hpp"

namespace ikv {

using Vector = std::vector<double>;

// Dense row-major matrix of 64-bit reals; the universal numeric carrier.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    std::span<double> row_span(std::size_t i) { return {row(i), cols}; }
    std::span<const double> row_span(std::size_t i) const { return {row(i), cols}; }

    // Appends one row; used by caches that grow a position at a time.
    void push_row(std::span<const double> r) {
        if (cols == 0) cols = r.size();
        if (r.size() != cols) throw ShapeError("push_row: row width mismatch");
        data.insert(data.end(), r.begin(), r.end());
        ++rows;
    }

    bool empty() const { return rows == 0 || cols == 0; }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
    }
};

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const Matrix& m) { return all_finite(std::span<const double>(m.data)); }

// out[j] += sum_i x[i] * w(i, j); deterministic accumulation (ascending i).
inline void linear_accumulate(std::span<const double> x, const Matrix& w, std::span<double> out) {
    if (x.size() != w.rows || out.size() != w.cols)
        throw ShapeError("linear_accumulate: dimension mismatch");
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        const double* wr = w.row(i);
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += xi * wr[j];
    }
}

// Row-vector times matrix: (1 x r) * (r x c) -> (1 x c).
inline Vector linear(std::span<const double> x, const Matrix& w) {
    Vector out(w.cols, 0.0);
    linear_accumulate(x, w, out);
    return out;
}

// Standard product with a fixed accumulation order (ascending k per output
// element), so repeated invocations are bit-identical.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i)
        linear_accumulate(a.row_span(i), b, out.row_span(i));
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

// In-place stable softmax of one row: subtracts the row max before
// exponentiation, so entries of magnitude 1e4 (pivot-scale logits) are safe.
inline void softmax_row_inplace(std::span<double> x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : x) v /= sum;
}

inline Matrix softmax_rows(const Matrix& m) {
    if (!all_finite(m)) throw DomainError("softmax_rows: non-finite input");
    Matrix out = m;
    for (std::size_t i = 0; i < out.rows; ++i) softmax_row_inplace(out.row_span(i));
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

enum class NormKind { frobenius, spectral, two_inf };

namespace detail {

// Largest singular value by power iteration on m^T m: deterministic all-ones
// start, relative tolerance 1e-12 on the Rayleigh quotient, 10000-iteration cap.
inline double spectral_norm(const Matrix& m) {
    const std::size_t n = m.cols;
    Vector v(n, 1.0);
    double vn = norm2(v);
    for (double& x : v) x /= vn;
    double lambda = 0.0;
    for (int iter = 0; iter < 10000; ++iter) {
        // w = m^T (m v)
        Vector mv(m.rows, 0.0);
        for (std::size_t i = 0; i < m.rows; ++i) mv[i] = dot(m.row_span(i), v);
        Vector w(n, 0.0);
        for (std::size_t i = 0; i < m.rows; ++i) {
            const double* r = m.row(i);
            for (std::size_t j = 0; j < n; ++j) w[j] += mv[i] * r[j];
        }
        const double wn = norm2(w);
        if (wn == 0.0) return 0.0;  // v in the null space; matrix may be zero
        const double next = wn;     // ||m^T m v|| with unit v
        for (std::size_t j = 0; j < n; ++j) v[j] = w[j] / wn;
        if (std::abs(next - lambda) <= 1e-12 * std::max(next, 1e-300)) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    return std::sqrt(lambda);
}

}  // namespace detail

// frobenius: sqrt of the sum of squares.
// two_inf:   max over rows of the row Euclidean norm (the 2->inf operator norm).
// spectral:  largest singular value (power iteration; zero matrix -> 0).
inline double matrix_norm(const Matrix& m, NormKind kind) {
    if (m.empty()) throw ShapeError("matrix_norm: empty matrix");
    switch (kind) {
        case NormKind::frobenius: {
            double s = 0.0;
            for (double x : m.data) s += x * x;
            return std::sqrt(s);
        }
        case NormKind::two_inf: {
            double mx = 0.0;
            for (std::size_t i = 0; i < m.rows; ++i) mx = std::max(mx, norm2(m.row_span(i)));
            return mx;
        }
        case NormKind::spectral:
            return detail::spectral_norm(m);
    }
    throw DomainError("matrix_norm: unknown kind");
}

// y_i = gain_i * x_i / sqrt(mean(x^2) + eps)
inline Vector rmsnorm(const Vector& x, const Vector& gain, double eps) {
    if (x.size() != gain.size()) throw ShapeError("rmsnorm: length mismatch");
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + eps);
    Vector y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * x[i] * inv;
    return y;
}

// Rotary rotation of one position's row in place. Channel pair (2i, 2i+1)
// rotates by angle position * theta_base^(-2i/d).
inline void rope_row_inplace(std::span<double> x, std::size_t position, double theta_base) {
    if (x.size() % 2 != 0) throw ShapeError("rope: odd channel count");
    const double d = static_cast<double>(x.size());
    for (std::size_t i = 0; 2 * i < x.size(); ++i) {
        const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) / d);
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = x[2 * i], b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

// Inverse rotation; also the adjoint, used by reverse-mode passes.
inline void rope_row_inverse_inplace(std::span<double> x, std::size_t position, double theta_base) {
    if (x.size() % 2 != 0) throw ShapeError("rope: odd channel count");
    const double d = static_cast<double>(x.size());
    for (std::size_t i = 0; 2 * i < x.size(); ++i) {
        const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) / d);
        const double angle = static_cast<double>(position) * freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = x[2 * i], b = x[2 * i + 1];
        x[2 * i] = a * c + b * s;
        x[2 * i + 1] = -a * s + b * c;
    }
}

// Rows are per-position vectors starting at absolute position start_position.
inline Matrix rope_apply(const Matrix& x, std::size_t start_position, double theta_base) {
    if (x.cols % 2 != 0) throw ShapeError("rope_apply: cols must be even");
    Matrix out = x;
    for (std::size_t i = 0; i < out.rows; ++i)
        rope_row_inplace(out.row_span(i), start_position + i, theta_base);
    return out;
}

}  // namespace ikv
