#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ikv/errors.hpp"
#include "ikv/matrix.hpp"

namespace ikv {

// Uniform quantization settings. Groups are contiguous runs of group_size
// elements within each row; the last group of a row may be short.
struct QuantConfig {
    int bits = 4;
    std::size_t group_size = 128;
    bool symmetric = false;

    int qmax() const { return (1 << bits) - 1; }

    void validate() const {
        if (bits < 2 || bits > 8) throw InputError("QuantConfig: bits must be in [2, 8]");
        if (group_size < 1) throw InputError("QuantConfig: group_size must be >= 1");
    }
};

namespace detail {

// Round half away from zero; the fixed tie rule for every rounding step.
inline double round_away(double x) { return std::round(x); }

// Rounds a scale's significand up to 40 bits. Grid values s*(code - z) with
// |code - z| <= 255 are then exactly representable, so re-quantizing a
// quantized tensor reproduces the same scale, zero point, and codes bitwise.
inline double snap_scale_up(double s) {
    int e = 0;
    const double m = std::frexp(s, &e);        // s = m * 2^e, m in [0.5, 1)
    const double snapped = std::ceil(m * 0x1.0p40) * 0x1.0p-40;
    return std::ldexp(snapped, e);
}

struct GroupParams {
    double scale = 1.0;
    double zero_point = 0.0;  // integral except in the degenerate constant case
};

// Derives (scale, zero point) for one group and writes its codes.
inline GroupParams quantize_group(const double* w, std::size_t n, const QuantConfig& cfg,
                                  std::uint8_t* codes) {
    const double qmax = static_cast<double>(cfg.qmax());
    double mn = w[0], mx = w[0];
    for (std::size_t i = 1; i < n; ++i) {
        mn = std::min(mn, w[i]);
        mx = std::max(mx, w[i]);
    }

    GroupParams p;
    if (cfg.symmetric) {
        double amax = std::max(std::abs(mn), std::abs(mx));
        const double half = static_cast<double>(1 << (cfg.bits - 1));
        p.zero_point = half;
        if (amax == 0.0) {
            // Degenerate all-zero group: unit scale, every code at the zero point.
            p.scale = 1.0;
            for (std::size_t i = 0; i < n; ++i) codes[i] = static_cast<std::uint8_t>(half);
            return p;
        }
        p.scale = snap_scale_up(amax / (half - 1.0));
    } else {
        if (mx == mn) {
            // Degenerate constant group: unit scale, codes at zero, and a
            // real-valued zero point so the constant reconstructs exactly.
            p.scale = 1.0;
            p.zero_point = (mn == 0.0) ? 0.0 : -mn;
            for (std::size_t i = 0; i < n; ++i) codes[i] = 0;
            return p;
        }
        p.scale = snap_scale_up((mx - mn) / qmax);
        p.zero_point = round_away(-mn / p.scale);
    }

    for (std::size_t i = 0; i < n; ++i) {
        double c = round_away(w[i] / p.scale) + p.zero_point;
        c = std::min(std::max(c, 0.0), qmax);
        codes[i] = static_cast<std::uint8_t>(c);
    }
    return p;
}

}  // namespace detail

// Integer codes with per-group scale and zero point.
struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    QuantConfig config;
    std::vector<std::uint8_t> codes;   // rows * cols, row-major
    std::vector<double> scales;        // rows * groups_per_row
    std::vector<double> zero_points;   // rows * groups_per_row

    std::size_t groups_per_row() const {
        return (cols + config.group_size - 1) / config.group_size;
    }
};

inline QuantizedTensor quantize_tensor(const Matrix& w, const QuantConfig& cfg) {
    cfg.validate();
    if (w.empty()) throw ShapeError("quantize_tensor: empty matrix");
    if (!all_finite(w)) throw DomainError("quantize_tensor: non-finite input");

    QuantizedTensor q;
    q.rows = w.rows;
    q.cols = w.cols;
    q.config = cfg;
    q.codes.resize(w.rows * w.cols);
    const std::size_t gpr = q.groups_per_row();
    q.scales.resize(w.rows * gpr);
    q.zero_points.resize(w.rows * gpr);

    for (std::size_t i = 0; i < w.rows; ++i) {
        for (std::size_t g = 0; g < gpr; ++g) {
            const std::size_t begin = g * cfg.group_size;
            const std::size_t len = std::min(cfg.group_size, w.cols - begin);
            const auto p = detail::quantize_group(w.row(i) + begin, len, cfg,
                                                  q.codes.data() + i * w.cols + begin);
            q.scales[i * gpr + g] = p.scale;
            q.zero_points[i * gpr + g] = p.zero_point;
        }
    }
    return q;
}

// w_hat = s * (code - z) per group.
inline Matrix dequantize(const QuantizedTensor& q) {
    Matrix out(q.rows, q.cols);
    const std::size_t gpr = q.groups_per_row();
    for (std::size_t i = 0; i < q.rows; ++i) {
        for (std::size_t g = 0; g < gpr; ++g) {
            const std::size_t begin = g * q.config.group_size;
            const std::size_t len = std::min(q.config.group_size, q.cols - begin);
            const double s = q.scales[i * gpr + g];
            const double z = q.zero_points[i * gpr + g];
            const std::uint8_t* c = q.codes.data() + i * q.cols + begin;
            double* o = out.row(i) + begin;
            for (std::size_t k = 0; k < len; ++k)
                o[k] = s * (static_cast<double>(c[k]) - z);
        }
    }
    return out;
}

// Quantize-then-dequantize; simulates integer inference in real arithmetic.
inline Matrix fake_quant(const Matrix& w, const QuantConfig& cfg) {
    return dequantize(quantize_tensor(w, cfg));
}

}  // namespace ikv
