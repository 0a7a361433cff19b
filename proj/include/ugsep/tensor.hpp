#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ugsep {

enum class Dtype { F32, F64 };

enum class Activation { Gelu, Relu };

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

// ---------------------------------------------------------------------------
// Tensor: dense row-major array with fixed iteration orders everywhere.
//
// Every kernel below accumulates in ascending index order and never
// re-associates, so two evaluations on identical inputs are bitwise
// identical on the same platform/build.
// ---------------------------------------------------------------------------

template <std::floating_point S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), S(0)) {}

    Tensor(std::vector<std::size_t> shape, std::vector<S> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size()) {
            throw std::invalid_argument("tensor: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }

    // 2-D accessors; most of the model works on matrices.
    std::size_t rows() const { return shape_.size() >= 1 ? shape_[0] : 0; }
    std::size_t cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }

    static constexpr Dtype dtype() {
        return std::is_same_v<S, float> ? Dtype::F32 : Dtype::F64;
    }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
    const S& at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

    std::span<S> row(std::size_t i) { return {data_.data() + i * cols(), cols()}; }
    std::span<const S> row(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }

    std::span<S> flat() { return {data_.data(), data_.size()}; }
    std::span<const S> flat() const { return {data_.data(), data_.size()}; }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << 'x';
            os << s[i];
        }
        os << ']';
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape_); }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e < 1) {
                throw std::invalid_argument("tensor: all extents must be >= 1, got " +
                                            shape_str(shape));
            }
            n *= e;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Bitwise comparison, sign of zero and NaN payloads included.
template <std::floating_point S>
inline bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), a.numel() * sizeof(S)) == 0;
}

template <std::floating_point S>
inline bool bitwise_equal(std::span<const S> a, std::span<const S> b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(S)) == 0;
}

// ---------------------------------------------------------------------------
// Deterministic random source.
//
// mt19937_64 output is specified by the standard; the uniform/gaussian
// mappings are hand-rolled because std distributions are
// implementation-defined.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller; one fresh pair per call, second value discarded to keep
    // the stream position independent of call parity.
    double gaussian() {
        double u1 = next_unit();
        double u2 = next_unit();
        while (u1 <= 0.0) u1 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

    template <std::floating_point S>
    void fill_gaussian(Tensor<S>& t, double stddev = 1.0) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t[i] = static_cast<S>(gaussian() * stddev);
        }
    }

    template <std::floating_point S>
    void fill_uniform(Tensor<S>& t, double lo, double hi) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t[i] = static_cast<S>(uniform(lo, hi));
        }
    }

private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// C[i][j] = sum_t A[i][t] * B[t][j], accumulation in ascending t.
template <std::floating_point S>
inline Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " and " +
                                    b.shape_str());
    }
    const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
    Tensor<S> out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            S acc = S(0);
            for (std::size_t t = 0; t < k; ++t) {
                acc += a.at(i, t) * b.at(t, j);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

/// out[j] = sum_i x[i] * w[i][j]; bias added after the full accumulation.
template <std::floating_point S>
inline void linear_row(std::span<const S> x, const Tensor<S>& w, std::span<const S> bias,
                       std::span<S> out) {
    const std::size_t k = w.rows(), c = w.cols();
    if (x.size() != k || out.size() != c || (!bias.empty() && bias.size() != c)) {
        throw std::invalid_argument("linear_row: incompatible shapes, x has " +
                                    std::to_string(x.size()) + " entries, w is " + w.shape_str());
    }
    for (std::size_t j = 0; j < c; ++j) out[j] = S(0);
    for (std::size_t i = 0; i < k; ++i) {
        const S xi = x[i];
        const S* wrow = w.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) {
            out[j] += xi * wrow[j];
        }
    }
    if (!bias.empty()) {
        for (std::size_t j = 0; j < c; ++j) out[j] += bias[j];
    }
}

/// Accumulates x ⊗ g into dw and w · g into dx (both optional); the shared
/// backward of linear_row.
template <std::floating_point S>
inline void linear_row_backward(std::span<const S> x, const Tensor<S>& w, std::span<const S> g,
                                Tensor<S>* dw, std::span<S> db, std::span<S> dx) {
    const std::size_t k = w.rows(), c = w.cols();
    if (dw) {
        for (std::size_t i = 0; i < k; ++i) {
            const S xi = x[i];
            S* drow = dw->data() + i * c;
            for (std::size_t j = 0; j < c; ++j) drow[j] += xi * g[j];
        }
    }
    if (!db.empty()) {
        for (std::size_t j = 0; j < c; ++j) db[j] += g[j];
    }
    if (!dx.empty()) {
        for (std::size_t i = 0; i < k; ++i) {
            const S* wrow = w.data() + i * c;
            S acc = S(0);
            for (std::size_t j = 0; j < c; ++j) acc += wrow[j] * g[j];
            dx[i] += acc;
        }
    }
}

// --- layer norm -------------------------------------------------------------

template <std::floating_point S>
struct LayerNormCache {
    S mean = S(0);
    S inv_std = S(0);  // 1 / sqrt(var + eps)
};

/// y = gamma ⊙ (x - mean) * inv_std + beta, population variance.
template <std::floating_point S>
inline void layer_norm_span(std::span<const S> x, std::span<const S> gamma,
                            std::span<const S> beta, S eps, std::span<S> out,
                            LayerNormCache<S>* cache = nullptr) {
    const std::size_t n = x.size();
    if (n == 0 || gamma.size() != n || beta.size() != n || out.size() != n) {
        throw std::invalid_argument("layer_norm: gamma/beta/out must match x length " +
                                    std::to_string(n));
    }
    if (!(eps > S(0))) {
        throw std::invalid_argument("layer_norm: eps must be positive");
    }
    S sum = S(0);
    for (std::size_t i = 0; i < n; ++i) sum += x[i];
    const S mean = sum / static_cast<S>(n);
    S var = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        const S d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<S>(n);
    const S inv_std = S(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = gamma[i] * ((x[i] - mean) * inv_std) + beta[i];
    }
    if (cache) {
        cache->mean = mean;
        cache->inv_std = inv_std;
    }
}

template <std::floating_point S>
inline Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                            S eps) {
    Tensor<S> out(x.shape());
    layer_norm_span<S>(x.flat(), gamma.flat(), beta.flat(), eps, out.flat());
    return out;
}

/// dx, dgamma, dbeta from the upstream gradient g; dgamma/dbeta accumulate.
template <std::floating_point S>
inline void layer_norm_backward_span(std::span<const S> x, std::span<const S> gamma,
                                     const LayerNormCache<S>& cache, std::span<const S> g,
                                     std::span<S> dx, std::span<S> dgamma, std::span<S> dbeta) {
    const std::size_t n = x.size();
    const S inv_n = S(1) / static_cast<S>(n);
    // xhat_i = (x_i - mean) * inv_std
    S sum_gg = S(0);       // sum of g_i * gamma_i
    S sum_gg_xhat = S(0);  // sum of g_i * gamma_i * xhat_i
    for (std::size_t i = 0; i < n; ++i) {
        const S xhat = (x[i] - cache.mean) * cache.inv_std;
        const S gg = g[i] * gamma[i];
        sum_gg += gg;
        sum_gg_xhat += gg * xhat;
        if (!dgamma.empty()) dgamma[i] += g[i] * xhat;
        if (!dbeta.empty()) dbeta[i] += g[i];
    }
    if (!dx.empty()) {
        for (std::size_t i = 0; i < n; ++i) {
            const S xhat = (x[i] - cache.mean) * cache.inv_std;
            const S gg = g[i] * gamma[i];
            dx[i] += cache.inv_std * (gg - inv_n * sum_gg - xhat * inv_n * sum_gg_xhat);
        }
    }
}

// --- activations -------------------------------------------------------------

namespace detail {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace detail

template <std::floating_point S>
inline S gelu(S x) {
    const S u = static_cast<S>(detail::kGeluScale) *
                (x + static_cast<S>(detail::kGeluCubic) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
}

template <std::floating_point S>
inline S gelu_grad(S x) {
    const S u = static_cast<S>(detail::kGeluScale) *
                (x + static_cast<S>(detail::kGeluCubic) * x * x * x);
    const S t = std::tanh(u);
    const S du = static_cast<S>(detail::kGeluScale) *
                 (S(1) + S(3) * static_cast<S>(detail::kGeluCubic) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

template <std::floating_point S>
inline S apply_activation(Activation act, S x) {
    return act == Activation::Gelu ? gelu(x) : (x > S(0) ? x : S(0));
}

template <std::floating_point S>
inline S activation_grad(Activation act, S x) {
    return act == Activation::Gelu ? gelu_grad(x) : (x > S(0) ? S(1) : S(0));
}

template <std::floating_point S>
inline Tensor<S> activation(Activation act, const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = apply_activation(act, x[i]);
    return out;
}

// --- softmax ------------------------------------------------------------------

/// Numerically stable row softmax; max subtracted, ascending-order sums.
template <std::floating_point S>
inline void softmax_span(std::span<const S> x, std::span<S> out) {
    const std::size_t n = x.size();
    S m = x[0];
    for (std::size_t i = 1; i < n; ++i) {
        if (x[i] > m) m = x[i];
    }
    S z = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(x[i] - m);
        z += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= z;
}

/// ds_j = p_j * (g_j - sum_k g_k p_k); accumulates into ds.
template <std::floating_point S>
inline void softmax_backward_span(std::span<const S> p, std::span<const S> g, std::span<S> ds) {
    S dot = S(0);
    for (std::size_t i = 0; i < p.size(); ++i) dot += g[i] * p[i];
    for (std::size_t i = 0; i < p.size(); ++i) ds[i] += p[i] * (g[i] - dot);
}

template <std::floating_point S>
inline S sigmoid(S z) {
    return S(1) / (S(1) + std::exp(-z));
}

// --- misc elementwise ----------------------------------------------------------

template <std::floating_point S>
inline void add_inplace(Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("add: shape mismatch " + a.shape_str() + " vs " +
                                    b.shape_str());
    }
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

template <std::floating_point S>
inline void scale_inplace(Tensor<S>& a, S s) {
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] *= s;
}

template <std::floating_point S>
inline bool all_finite(const Tensor<S>& a) {
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (!std::isfinite(a[i])) return false;
    }
    return true;
}

}  // namespace ugsep
