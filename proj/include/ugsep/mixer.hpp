#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ugsep/tensor.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// Baseline token-mixing block: multi-head mixup, per-token FFN, residual,
// two layer norms. The separated variant reduces to this bitwise when no
// rows are reserved for the user side.
// ---------------------------------------------------------------------------

struct MixerConfig {
    std::size_t tokens = 0;      // T
    std::size_t dim = 0;         // D
    std::size_t heads = 0;       // H
    std::size_t ffn_hidden = 0;  // d_hidden
    Activation act = Activation::Gelu;
    double ln_eps = 1e-5;

    MixerConfig() = default;
    MixerConfig(std::size_t t, std::size_t d, std::size_t h, std::size_t hidden,
                Activation a = Activation::Gelu)
        : tokens(t), dim(d), heads(h), ffn_hidden(hidden), act(a) {
        validate();
    }

    void validate() const {
        if (tokens < 1 || dim < 1 || heads < 1 || ffn_hidden < 1) {
            throw std::invalid_argument("mixer config: all extents must be >= 1");
        }
        if (dim % heads != 0) {
            throw std::invalid_argument("mixer config: heads (" + std::to_string(heads) +
                                        ") must divide dim (" + std::to_string(dim) + ")");
        }
    }

    std::size_t head_dim() const { return dim / heads; }        // D'
    std::size_t mixed_dim() const { return tokens * head_dim(); }  // T * D'
};

template <std::floating_point S>
struct LayerNormParams {
    Tensor<S> gamma;
    Tensor<S> beta;

    static LayerNormParams identity(std::size_t n) {
        LayerNormParams p{Tensor<S>({n}), Tensor<S>({n})};
        for (std::size_t i = 0; i < n; ++i) p.gamma[i] = S(1);
        return p;
    }

    static LayerNormParams zeros(std::size_t n) {
        return {Tensor<S>({n}), Tensor<S>({n})};
    }
};

// One per-token FFN weight set: row -> w2^T act(w1^T row + b1) + b2.
template <std::floating_point S>
struct FfnWeights {
    Tensor<S> w1;  // in_dim x hidden
    Tensor<S> b1;  // hidden
    Tensor<S> w2;  // hidden x out_dim
    Tensor<S> b2;  // out_dim

    static FfnWeights zeros(std::size_t in_dim, std::size_t hidden, std::size_t out_dim) {
        return {Tensor<S>({in_dim, hidden}), Tensor<S>({hidden}), Tensor<S>({hidden, out_dim}),
                Tensor<S>({out_dim})};
    }

    static FfnWeights init(std::size_t in_dim, std::size_t hidden, std::size_t out_dim,
                           Rng& rng) {
        FfnWeights w = zeros(in_dim, hidden, out_dim);
        const double a1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
        const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        rng.fill_uniform(w.w1, -a1, a1);
        rng.fill_uniform(w.w2, -a2, a2);
        return w;  // biases stay zero
    }
};

template <std::floating_point S>
struct MixerBlockParams {
    std::vector<FfnWeights<S>> ffn;  // one weight set per output token row
    LayerNormParams<S> ln_mix;       // post-mixup LN, length T*D'
    LayerNormParams<S> ln_out;       // post-residual LN, length D

    static MixerBlockParams init(const MixerConfig& cfg, Rng& rng) {
        MixerBlockParams p;
        p.ffn.reserve(cfg.heads);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            p.ffn.push_back(FfnWeights<S>::init(cfg.mixed_dim(), cfg.ffn_hidden, cfg.dim, rng));
        }
        p.ln_mix = LayerNormParams<S>::identity(cfg.mixed_dim());
        p.ln_out = LayerNormParams<S>::identity(cfg.dim);
        return p;
    }

    static MixerBlockParams zeros_like(const MixerBlockParams& o) {
        MixerBlockParams g;
        g.ffn.reserve(o.ffn.size());
        for (const auto& f : o.ffn) {
            g.ffn.push_back(FfnWeights<S>::zeros(f.w1.rows(), f.w1.cols(), f.w2.cols()));
        }
        g.ln_mix = LayerNormParams<S>::zeros(o.ln_mix.gamma.numel());
        g.ln_out = LayerNormParams<S>::zeros(o.ln_out.gamma.numel());
        return g;
    }
};

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

/// T x D -> T x H x D', contiguous head slices.
template <std::floating_point S>
inline Tensor<S> split_heads(const Tensor<S>& x, const MixerConfig& cfg) {
    if (x.rank() != 2 || x.rows() != cfg.tokens || x.cols() != cfg.dim) {
        throw std::invalid_argument("split_heads: expected [" + std::to_string(cfg.tokens) + "x" +
                                    std::to_string(cfg.dim) + "], got " + x.shape_str());
    }
    // Row-major T x H x D' shares the layout of T x D; only the shape changes.
    Tensor<S> out({cfg.tokens, cfg.heads, cfg.head_dim()});
    std::copy(x.flat().begin(), x.flat().end(), out.flat().begin());
    return out;
}

/// Row h of the result concatenates head h of every token (Eq-5 layout):
/// out[h][t*D' + d] = x[t][h*D' + d].
template <std::floating_point S>
inline Tensor<S> mixup(const Tensor<S>& x, const MixerConfig& cfg) {
    if (x.rank() != 2 || x.rows() != cfg.tokens || x.cols() != cfg.dim) {
        throw std::invalid_argument("mixup: expected [" + std::to_string(cfg.tokens) + "x" +
                                    std::to_string(cfg.dim) + "], got " + x.shape_str());
    }
    const std::size_t dp = cfg.head_dim();
    Tensor<S> out({cfg.heads, cfg.mixed_dim()});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        for (std::size_t t = 0; t < cfg.tokens; ++t) {
            for (std::size_t d = 0; d < dp; ++d) {
                out.at(h, t * dp + d) = x.at(t, h * dp + d);
            }
        }
    }
    return out;
}

/// Exact inverse permutation of mixup.
template <std::floating_point S>
inline Tensor<S> mixup_inverse(const Tensor<S>& y, const MixerConfig& cfg) {
    if (y.rank() != 2 || y.rows() != cfg.heads || y.cols() != cfg.mixed_dim()) {
        throw std::invalid_argument("mixup_inverse: expected [" + std::to_string(cfg.heads) +
                                    "x" + std::to_string(cfg.mixed_dim()) + "], got " +
                                    y.shape_str());
    }
    const std::size_t dp = cfg.head_dim();
    Tensor<S> out({cfg.tokens, cfg.dim});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        for (std::size_t t = 0; t < cfg.tokens; ++t) {
            for (std::size_t d = 0; d < dp; ++d) {
                out.at(t, h * dp + d) = y.at(h, t * dp + d);
            }
        }
    }
    return out;
}

// --- per-token FFN ----------------------------------------------------------

template <std::floating_point S>
struct FfnRowCache {
    Tensor<S> pre;  // pre-activation, hidden
    Tensor<S> act;  // post-activation, hidden
};

// WSet is any weight set exposing w1/b1/w2/b2; the quantized variant routes
// through the dequantizing linear overload.
template <std::floating_point S, class WSet = FfnWeights<S>>
inline void ffn_row_forward(std::span<const S> x, const WSet& w, Activation act,
                            std::span<S> out, FfnRowCache<S>* cache) {
    const std::size_t hidden = w.b1.numel();
    Tensor<S> pre({hidden});
    linear_row<S>(x, w.w1, w.b1.flat(), pre.flat());
    Tensor<S> a({hidden});
    for (std::size_t i = 0; i < hidden; ++i) a[i] = apply_activation(act, pre[i]);
    linear_row<S>(a.flat(), w.w2, w.b2.flat(), out);
    if (cache) {
        cache->pre = std::move(pre);
        cache->act = std::move(a);
    }
}

template <std::floating_point S>
inline void ffn_row_backward(std::span<const S> x, const FfnWeights<S>& w, Activation act,
                             const FfnRowCache<S>& cache, std::span<const S> g,
                             FfnWeights<S>& grad, std::span<S> dx) {
    const std::size_t hidden = w.b1.numel();
    Tensor<S> da({hidden});
    linear_row_backward<S>(cache.act.flat(), w.w2, g, &grad.w2, grad.b2.flat(), da.flat());
    Tensor<S> dz({hidden});
    for (std::size_t i = 0; i < hidden; ++i) {
        dz[i] = da[i] * activation_grad(act, cache.pre[i]);
    }
    linear_row_backward<S>(x, w.w1, dz.flat(), &grad.w1, grad.b1.flat(), dx);
}

/// Per-token FFN over the mixed rows: row t goes through weight set t.
template <std::floating_point S>
inline Tensor<S> pffn(const Tensor<S>& p, const MixerBlockParams<S>& params,
                      const MixerConfig& cfg) {
    if (p.rank() != 2 || p.rows() != params.ffn.size()) {
        throw std::invalid_argument("pffn: row count " + std::to_string(p.rows()) +
                                    " != weight set count " + std::to_string(params.ffn.size()));
    }
    if (p.cols() != params.ffn.front().w1.rows()) {
        throw std::invalid_argument("pffn: row length " + std::to_string(p.cols()) +
                                    " != ffn input dim " +
                                    std::to_string(params.ffn.front().w1.rows()));
    }
    Tensor<S> out({p.rows(), params.ffn.front().w2.cols()});
    for (std::size_t t = 0; t < p.rows(); ++t) {
        ffn_row_forward<S>(p.row(t), params.ffn[t], cfg.act, out.row(t), nullptr);
    }
    return out;
}

// --- full block ---------------------------------------------------------------

template <std::floating_point S>
struct MixerBlockGrads {
    MixerBlockParams<S> params;
    Tensor<S> input;  // d loss / d X
};

/// Forward pass with everything the backward needs retained.
template <std::floating_point S>
class MixerBlockForward {
public:
    MixerBlockForward(const Tensor<S>& x, const MixerBlockParams<S>& params,
                      const MixerConfig& cfg)
        : params_(&params), cfg_(cfg), x_(x) {
        if (cfg.heads != cfg.tokens) {
            throw std::invalid_argument(
                "mixer block: plain residual requires heads == tokens, got H=" +
                std::to_string(cfg.heads) + " T=" + std::to_string(cfg.tokens));
        }
        if (x.rank() != 2 || x.rows() != cfg.tokens || x.cols() != cfg.dim) {
            throw std::invalid_argument("mixer block: input shape " + x.shape_str() +
                                        " does not match config");
        }
        const std::size_t h = cfg.heads;
        mixed_ = mixup(x, cfg);
        normed_ = Tensor<S>({h, cfg.mixed_dim()});
        ln_mix_cache_.resize(h);
        for (std::size_t r = 0; r < h; ++r) {
            layer_norm_span<S>(mixed_.row(r), params.ln_mix.gamma.flat(),
                               params.ln_mix.beta.flat(), static_cast<S>(cfg.ln_eps),
                               normed_.row(r), &ln_mix_cache_[r]);
        }
        ffn_out_ = Tensor<S>({h, cfg.dim});
        ffn_cache_.resize(h);
        for (std::size_t r = 0; r < h; ++r) {
            ffn_row_forward<S>(normed_.row(r), params.ffn[r], cfg.act, ffn_out_.row(r),
                               &ffn_cache_[r]);
        }
        resid_ = Tensor<S>({h, cfg.dim});
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t j = 0; j < cfg.dim; ++j) {
                resid_.at(r, j) = ffn_out_.at(r, j) + x.at(r, j);
            }
        }
        output_ = Tensor<S>({h, cfg.dim});
        ln_out_cache_.resize(h);
        for (std::size_t r = 0; r < h; ++r) {
            layer_norm_span<S>(resid_.row(r), params.ln_out.gamma.flat(),
                               params.ln_out.beta.flat(), static_cast<S>(cfg.ln_eps),
                               output_.row(r), &ln_out_cache_[r]);
        }
    }

    const Tensor<S>& output() const { return output_; }

    MixerBlockGrads<S> backward(const Tensor<S>& d_out) const {
        if (!d_out.same_shape(output_)) {
            throw std::invalid_argument("mixer backward: gradient shape " + d_out.shape_str() +
                                        " != output shape " + output_.shape_str());
        }
        const std::size_t h = cfg_.heads;
        MixerBlockGrads<S> g{MixerBlockParams<S>::zeros_like(*params_), Tensor<S>::zeros_like(x_)};

        Tensor<S> d_resid({h, cfg_.dim});
        for (std::size_t r = 0; r < h; ++r) {
            layer_norm_backward_span<S>(resid_.row(r), params_->ln_out.gamma.flat(),
                                        ln_out_cache_[r], d_out.row(r), d_resid.row(r),
                                        g.params.ln_out.gamma.flat(),
                                        g.params.ln_out.beta.flat());
        }
        // Residual splits into the FFN branch and the skip path.
        Tensor<S> d_normed({h, cfg_.mixed_dim()});
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t j = 0; j < cfg_.dim; ++j) {
                g.input.at(r, j) += d_resid.at(r, j);
            }
            ffn_row_backward<S>(normed_.row(r), params_->ffn[r], cfg_.act, ffn_cache_[r],
                                d_resid.row(r), g.params.ffn[r], d_normed.row(r));
        }
        Tensor<S> d_mixed({h, cfg_.mixed_dim()});
        for (std::size_t r = 0; r < h; ++r) {
            layer_norm_backward_span<S>(mixed_.row(r), params_->ln_mix.gamma.flat(),
                                        ln_mix_cache_[r], d_normed.row(r), d_mixed.row(r),
                                        g.params.ln_mix.gamma.flat(),
                                        g.params.ln_mix.beta.flat());
        }
        add_inplace(g.input, mixup_inverse(d_mixed, cfg_));
        return g;
    }

private:
    const MixerBlockParams<S>* params_;
    MixerConfig cfg_;
    Tensor<S> x_;
    Tensor<S> mixed_, normed_, ffn_out_, resid_, output_;
    std::vector<LayerNormCache<S>> ln_mix_cache_, ln_out_cache_;
    std::vector<FfnRowCache<S>> ffn_cache_;
};

template <std::floating_point S>
inline Tensor<S> mixer_block_forward(const Tensor<S>& x, const MixerBlockParams<S>& params,
                                     const MixerConfig& cfg) {
    return MixerBlockForward<S>(x, params, cfg).output();
}

// --- named parameter traversal (checkpoints, SGD, gradient checks) -----------

template <std::floating_point S>
inline void collect_params(FfnWeights<S>& w, const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor<S>*>>& out) {
    out.emplace_back(prefix + ".w1", &w.w1);
    out.emplace_back(prefix + ".b1", &w.b1);
    out.emplace_back(prefix + ".w2", &w.w2);
    out.emplace_back(prefix + ".b2", &w.b2);
}

template <std::floating_point S>
inline void collect_params(LayerNormParams<S>& p, const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor<S>*>>& out) {
    out.emplace_back(prefix + ".gamma", &p.gamma);
    out.emplace_back(prefix + ".beta", &p.beta);
}

template <std::floating_point S>
inline void collect_params(MixerBlockParams<S>& p, const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor<S>*>>& out) {
    for (std::size_t i = 0; i < p.ffn.size(); ++i) {
        collect_params(p.ffn[i], prefix + ".ffn" + std::to_string(i), out);
    }
    collect_params(p.ln_mix, prefix + ".ln_mix", out);
    collect_params(p.ln_out, prefix + ".ln_out", out);
}

}  // namespace ugsep
