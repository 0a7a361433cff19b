#pragma once

#include <bit>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ugsep/tensor.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// W8A16 weight-only quantization: 8-bit weight codes with one f32 scale
// per stored row, dequantized at use. Activations entering a quantized
// GEMM are rounded to bfloat16 precision; accumulation stays at f32.
// ---------------------------------------------------------------------------

enum class QuantFormat : std::uint8_t { Int8Symmetric = 1, Fp8E4M3 = 2 };

inline const char* quant_format_name(QuantFormat f) {
    return f == QuantFormat::Int8Symmetric ? "int8" : "fp8_e4m3";
}

struct QuantScheme {
    QuantFormat format = QuantFormat::Int8Symmetric;
};

// --- 16-bit activation emulation --------------------------------------------

/// bfloat16 truncation: keep the top 16 bits of the f32 representation.
inline float bf16_round(float x) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    bits &= 0xFFFF0000u;
    return std::bit_cast<float>(bits);
}

inline float bf16_round(double x) { return bf16_round(static_cast<float>(x)); }

// --- fp8 E4M3 emulation -------------------------------------------------------

namespace detail {
constexpr float kE4M3Max = 448.0f;      // exponent 8, mantissa 6/8
constexpr float kE4M3MinSub = 0x1p-9f;  // smallest subnormal

inline std::uint8_t e4m3_encode(float v) {
    const std::uint8_t sign = std::signbit(v) ? 0x80 : 0x00;
    float a = std::fabs(v);
    if (a == 0.0f || std::isnan(a)) return sign;  // zeros; NaN never produced upstream
    if (a >= kE4M3Max) return sign | 0x7E;        // saturate to 448
    if (a < 0x1p-6f) {
        // Subnormal: value = m/8 * 2^-6, m in [0,7].
        const float m = std::nearbyintf(a / kE4M3MinSub);
        const auto mi = static_cast<std::uint8_t>(m);
        if (mi == 0) return sign;
        if (mi >= 8) return sign | 0x08;  // rounds up into the first normal
        return sign | mi;
    }
    int exp = 0;
    (void)std::frexp(a, &exp);  // a = f * 2^exp, f in [0.5, 1)
    exp -= 1;                   // now a = (1 + frac) * 2^exp
    // Round to 3 mantissa bits: q = round(a / 2^(exp-3)) in [8, 16].
    float ulp = std::ldexp(1.0f, exp - 3);
    float q = std::nearbyintf(a / ulp);
    if (q >= 16.0f) {
        exp += 1;
        q = 8.0f;
    }
    if (exp > 8) return sign | 0x7E;  // saturate
    const auto mant = static_cast<std::uint8_t>(static_cast<int>(q) - 8);
    const auto field = static_cast<std::uint8_t>(exp + 7);
    std::uint8_t code = sign | static_cast<std::uint8_t>(field << 3) | mant;
    if ((code & 0x7F) == 0x7F) code = sign | 0x7E;  // 0x7F is NaN in E4M3
    return code;
}

inline float e4m3_decode(std::uint8_t code) {
    const float sign = (code & 0x80) ? -1.0f : 1.0f;
    const int field = (code >> 3) & 0xF;
    const int mant = code & 0x7;
    if (field == 0) {
        return sign * (static_cast<float>(mant) / 8.0f) * 0x1p-6f;
    }
    return sign * (1.0f + static_cast<float>(mant) / 8.0f) *
           std::ldexp(1.0f, field - 7);
}
}  // namespace detail

// --- quantized matrix ----------------------------------------------------------

struct QuantizedMatrix {
    std::vector<std::int8_t> codes;  // row-major r x c; fp8 codes stored as raw bytes
    std::vector<float> scales;       // one per row
    std::size_t n_rows = 0;
    std::size_t n_cols = 0;
    QuantScheme scheme;

    std::size_t rows() const { return n_rows; }
    std::size_t cols() const { return n_cols; }
    float scale(std::size_t i) const { return scales[i]; }

    float value(std::size_t i, std::size_t j) const {
        if (scheme.format == QuantFormat::Int8Symmetric) {
            return static_cast<float>(codes[i * n_cols + j]) * scales[i];
        }
        return detail::e4m3_decode(static_cast<std::uint8_t>(codes[i * n_cols + j])) * scales[i];
    }
};

/// Per-row symmetric quantization; round-to-nearest-even, deterministic.
template <std::floating_point S>
inline QuantizedMatrix quantize(const Tensor<S>& w, QuantScheme scheme = {}) {
    if (w.rank() != 2) {
        throw std::invalid_argument("quantize: expected a 2-D tensor, got " + w.shape_str());
    }
    if (!all_finite(w)) {
        throw std::invalid_argument("quantize: non-finite entries in input");
    }
    QuantizedMatrix q;
    q.n_rows = w.rows();
    q.n_cols = w.cols();
    q.scheme = scheme;
    q.codes.resize(q.n_rows * q.n_cols);
    q.scales.resize(q.n_rows);
    const float top = scheme.format == QuantFormat::Int8Symmetric ? 127.0f : detail::kE4M3Max;
    for (std::size_t i = 0; i < q.n_rows; ++i) {
        float row_max = 0.0f;
        for (std::size_t j = 0; j < q.n_cols; ++j) {
            const float a = std::fabs(static_cast<float>(w.at(i, j)));
            if (a > row_max) row_max = a;
        }
        const float scale = row_max == 0.0f ? 0.0f : row_max / top;
        q.scales[i] = scale;
        for (std::size_t j = 0; j < q.n_cols; ++j) {
            if (scale == 0.0f) {
                q.codes[i * q.n_cols + j] = 0;
                continue;
            }
            const float t = static_cast<float>(w.at(i, j)) / scale;
            if (scheme.format == QuantFormat::Int8Symmetric) {
                float r = std::nearbyintf(t);
                if (r > 127.0f) r = 127.0f;
                if (r < -127.0f) r = -127.0f;
                q.codes[i * q.n_cols + j] = static_cast<std::int8_t>(r);
            } else {
                q.codes[i * q.n_cols + j] =
                    static_cast<std::int8_t>(detail::e4m3_encode(t));
            }
        }
    }
    return q;
}

inline TensorF dequantize(const QuantizedMatrix& q) {
    TensorF out({q.n_rows, q.n_cols});
    for (std::size_t i = 0; i < q.n_rows; ++i) {
        for (std::size_t j = 0; j < q.n_cols; ++j) {
            out.at(i, j) = q.value(i, j);
        }
    }
    return out;
}

// --- quantized GEMM -------------------------------------------------------------

/// out = bf16(x) . dequantize(QW); f32 accumulation, ascending inner index.
template <std::floating_point S>
inline Tensor<S> qmatmul(const Tensor<S>& x, const QuantizedMatrix& qw) {
    if (x.rank() != 2 || x.cols() != qw.rows()) {
        throw std::invalid_argument("qmatmul: incompatible shapes " + x.shape_str() + " and [" +
                                    std::to_string(qw.rows()) + "x" + std::to_string(qw.cols()) +
                                    "]");
    }
    const std::size_t r = x.rows(), k = x.cols(), c = qw.cols();
    Tensor<S> out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            float acc = 0.0f;
            for (std::size_t t = 0; t < k; ++t) {
                acc += bf16_round(x.at(i, t)) * qw.value(t, j);
            }
            out.at(i, j) = static_cast<S>(acc);
        }
    }
    return out;
}

// matmul overload so templated forward paths accept quantized weights.
template <std::floating_point S>
inline Tensor<S> matmul(const Tensor<S>& x, const QuantizedMatrix& qw) {
    return qmatmul(x, qw);
}

/// Row form used inside the per-token FFN paths: out = bf16(x) . QW + bias.
template <std::floating_point S>
inline void linear_row(std::span<const S> x, const QuantizedMatrix& qw, std::span<const S> bias,
                       std::span<S> out) {
    const std::size_t k = qw.rows(), c = qw.cols();
    if (x.size() != k || out.size() != c || (!bias.empty() && bias.size() != c)) {
        throw std::invalid_argument("linear_row(q): incompatible shapes, x has " +
                                    std::to_string(x.size()) + " entries, qw is [" +
                                    std::to_string(k) + "x" + std::to_string(c) + "]");
    }
    std::vector<float> acc(c, 0.0f);
    for (std::size_t i = 0; i < k; ++i) {
        const float xi = bf16_round(x[i]);
        for (std::size_t j = 0; j < c; ++j) {
            acc[j] += xi * qw.value(i, j);
        }
    }
    for (std::size_t j = 0; j < c; ++j) {
        out[j] = static_cast<S>(acc[j]);
        if (!bias.empty()) out[j] += bias[j];
    }
}

// --- footprint accounting --------------------------------------------------------

struct FootprintReport {
    std::uint64_t bytes_16bit = 0;  // 2 bytes per weight
    std::uint64_t bytes_w8a16 = 0;  // 1 byte per weight + 4 per row of scales
    double ratio = 0.0;             // 16-bit over W8A16
};

inline FootprintReport footprint_matrix(std::size_t rows, std::size_t cols) {
    FootprintReport r;
    r.bytes_16bit = static_cast<std::uint64_t>(2) * rows * cols;
    r.bytes_w8a16 = static_cast<std::uint64_t>(rows) * cols + 4ull * rows;
    r.ratio = r.bytes_w8a16 == 0
                  ? 0.0
                  : static_cast<double>(r.bytes_16bit) / static_cast<double>(r.bytes_w8a16);
    return r;
}

inline FootprintReport footprint_accumulate(const std::vector<std::pair<std::size_t, std::size_t>>& mats) {
    FootprintReport total;
    for (const auto& [r, c] : mats) {
        const FootprintReport f = footprint_matrix(r, c);
        total.bytes_16bit += f.bytes_16bit;
        total.bytes_w8a16 += f.bytes_w8a16;
    }
    total.ratio = total.bytes_w8a16 == 0 ? 0.0
                                         : static_cast<double>(total.bytes_16bit) /
                                               static_cast<double>(total.bytes_w8a16);
    return total;
}

}  // namespace ugsep
