#pragma once

#include <string>
#include <vector>

#include "ugsep/tensor.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// Single-head scaled dot-product attention with a user/group mask.
//
// Multiplicative mode keeps the post-softmax masking signature (user rows
// are left un-normalized, summing to less than one) but masked logits are
// written as constant zeros rather than computed from group keys — the
// only reading under which user-row outputs stay bitwise independent of
// group tokens. Additive mode is the conventional pre-softmax exclusion:
// every row re-normalizes over its unmasked keys.
// ---------------------------------------------------------------------------

enum class AttnMaskMode { Multiplicative, Additive };

template <std::floating_point S>
struct AttentionParams {
    Tensor<S> wq;  // D x d_a
    Tensor<S> wk;
    Tensor<S> wv;

    static AttentionParams init(std::size_t dim, std::size_t attn_dim, Rng& rng) {
        AttentionParams p{Tensor<S>({dim, attn_dim}), Tensor<S>({dim, attn_dim}),
                          Tensor<S>({dim, attn_dim})};
        const double a = 1.0 / std::sqrt(static_cast<double>(dim));
        rng.fill_uniform(p.wq, -a, a);
        rng.fill_uniform(p.wk, -a, a);
        rng.fill_uniform(p.wv, -a, a);
        return p;
    }

    static AttentionParams zeros(std::size_t dim, std::size_t attn_dim) {
        return {Tensor<S>({dim, attn_dim}), Tensor<S>({dim, attn_dim}),
                Tensor<S>({dim, attn_dim})};
    }
};

/// Token-level T x T mask: entry (i,j) is zero iff i < n and j >= n.
struct AttnUGMask {
    std::size_t tokens = 0;
    std::vector<std::uint8_t> keep;

    bool on(std::size_t i, std::size_t j) const { return keep[i * tokens + j] != 0; }

    static AttnUGMask all_ones(std::size_t tokens) {
        AttnUGMask m;
        m.tokens = tokens;
        m.keep.assign(tokens * tokens, 1);
        return m;
    }

    static AttnUGMask for_partition(std::size_t n, std::size_t tokens) {
        if (n > tokens) {
            throw std::invalid_argument("attention mask: n exceeds token count");
        }
        AttnUGMask m = all_ones(tokens);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = n; j < tokens; ++j) m.keep[i * tokens + j] = 0;
        }
        return m;
    }
};

template <std::floating_point S>
class MaskedAttention {
public:
    MaskedAttention(const Tensor<S>& x, const AttentionParams<S>& params, const AttnUGMask& mask,
                    AttnMaskMode mode)
        : params_(&params), mask_(&mask), mode_(mode), x_(x) {
        const std::size_t t = x.rows(), d_a = params.wq.cols();
        if (mask.tokens != t) {
            throw std::invalid_argument("masked_attention: mask covers " +
                                        std::to_string(mask.tokens) + " tokens, input has " +
                                        std::to_string(t));
        }
        q_ = matmul(x, params.wq);
        k_ = matmul(x, params.wk);
        v_ = matmul(x, params.wv);
        const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(d_a));
        scores_ = Tensor<S>({t, t});
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 0; j < t; ++j) {
                if (!mask.on(i, j)) {
                    scores_.at(i, j) = S(0);  // constant; never computed from keys
                    continue;
                }
                S acc = S(0);
                for (std::size_t a = 0; a < d_a; ++a) acc += q_.at(i, a) * k_.at(j, a);
                scores_.at(i, j) = acc * inv_sqrt;
            }
        }
        prob_ = Tensor<S>({t, t});
        if (mode == AttnMaskMode::Multiplicative) {
            for (std::size_t i = 0; i < t; ++i) {
                softmax_span<S>(scores_.row(i), prob_.row(i));
                for (std::size_t j = 0; j < t; ++j) {
                    if (!mask.on(i, j)) prob_.at(i, j) = S(0);
                }
            }
        } else {
            for (std::size_t i = 0; i < t; ++i) {
                S mx = S(0);
                bool seen = false;
                for (std::size_t j = 0; j < t; ++j) {
                    if (!mask.on(i, j)) continue;
                    if (!seen || scores_.at(i, j) > mx) mx = scores_.at(i, j);
                    seen = true;
                }
                if (!seen) {
                    throw std::invalid_argument("masked_attention: row " + std::to_string(i) +
                                                " has no unmasked keys");
                }
                S z = S(0);
                for (std::size_t j = 0; j < t; ++j) {
                    if (mask.on(i, j)) {
                        prob_.at(i, j) = std::exp(scores_.at(i, j) - mx);
                        z += prob_.at(i, j);
                    } else {
                        prob_.at(i, j) = S(0);
                    }
                }
                for (std::size_t j = 0; j < t; ++j) {
                    if (mask.on(i, j)) prob_.at(i, j) /= z;
                }
            }
        }
        out_ = Tensor<S>({t, d_a});
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t a = 0; a < d_a; ++a) out_.at(i, a) = S(0);
            for (std::size_t j = 0; j < t; ++j) {
                if (!mask.on(i, j)) continue;
                const S p = prob_.at(i, j);
                for (std::size_t a = 0; a < d_a; ++a) {
                    out_.at(i, a) += p * v_.at(j, a);
                }
            }
        }
    }

    const Tensor<S>& output() const { return out_; }
    /// Post-mask attention weights (rows of the value combination).
    const Tensor<S>& weights() const { return prob_; }

    struct Grads {
        AttentionParams<S> params;
        Tensor<S> input;
    };

    Grads backward(const Tensor<S>& d_out) const {
        const std::size_t t = x_.rows(), d_a = params_->wq.cols();
        Grads g{AttentionParams<S>::zeros(x_.cols(), d_a), Tensor<S>::zeros_like(x_)};
        Tensor<S> d_q({t, d_a});
        Tensor<S> d_k({t, d_a});
        Tensor<S> d_v({t, d_a});
        Tensor<S> d_prob({t, t});
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 0; j < t; ++j) {
                if (!mask_->on(i, j)) {
                    d_prob.at(i, j) = S(0);
                    continue;
                }
                S acc = S(0);
                for (std::size_t a = 0; a < d_a; ++a) acc += d_out.at(i, a) * v_.at(j, a);
                d_prob.at(i, j) = acc;
                const S p = prob_.at(i, j);
                for (std::size_t a = 0; a < d_a; ++a) d_v.at(j, a) += p * d_out.at(i, a);
            }
            // Multiplicative mode: masked entries of the softmax carry mass but
            // their logits are constants, so their score gradients are dropped.
            // Additive mode: masked probabilities are zero, so the same formula
            // already yields zero there.
            Tensor<S> d_scores({t});
            if (mode_ == AttnMaskMode::Multiplicative) {
                Tensor<S> full_prob({t});
                softmax_span<S>(scores_.row(i), full_prob.flat());
                softmax_backward_span<S>(full_prob.flat(), d_prob.row(i), d_scores.flat());
            } else {
                softmax_backward_span<S>(prob_.row(i), d_prob.row(i), d_scores.flat());
            }
            const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(d_a));
            for (std::size_t j = 0; j < t; ++j) {
                if (!mask_->on(i, j)) continue;
                const S ds = d_scores[j] * inv_sqrt;
                for (std::size_t a = 0; a < d_a; ++a) {
                    d_q.at(i, a) += ds * k_.at(j, a);
                    d_k.at(j, a) += ds * q_.at(i, a);
                }
            }
        }
        for (std::size_t i = 0; i < t; ++i) {
            linear_row_backward<S>(x_.row(i), params_->wq, d_q.row(i), &g.params.wq, {},
                                   g.input.row(i));
            linear_row_backward<S>(x_.row(i), params_->wk, d_k.row(i), &g.params.wk, {},
                                   g.input.row(i));
            linear_row_backward<S>(x_.row(i), params_->wv, d_v.row(i), &g.params.wv, {},
                                   g.input.row(i));
        }
        return g;
    }

private:
    const AttentionParams<S>* params_;
    const AttnUGMask* mask_;
    AttnMaskMode mode_;
    Tensor<S> x_;
    Tensor<S> q_, k_, v_, scores_, prob_, out_;
};

/// Standard scaled dot-product attention (the all-ones-mask special case).
template <std::floating_point S>
inline Tensor<S> attention(const Tensor<S>& x, const AttentionParams<S>& params) {
    return MaskedAttention<S>(x, params, AttnUGMask::all_ones(x.rows()),
                              AttnMaskMode::Multiplicative)
        .output();
}

template <std::floating_point S>
inline Tensor<S> masked_attention(const Tensor<S>& x, const AttentionParams<S>& params,
                                  const AttnUGMask& mask, AttnMaskMode mode) {
    return MaskedAttention<S>(x, params, mask, mode).output();
}

}  // namespace ugsep
