#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ugsep/mixer.hpp"
#include "ugsep/tensor.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// User/group token separation.
//
// Input token matrices carry n user tokens followed by m group tokens;
// after mixup the first c_u rows are reserved for the user side. The mask
// guarantees those rows never read a group-derived entry, which is what
// makes the per-user computation reusable across candidates.
// ---------------------------------------------------------------------------

struct UGPartition {
    std::size_t n = 0;    // U tokens at block input
    std::size_t m = 0;    // G tokens at block input
    std::size_t c_u = 0;  // U rows after mixup
    std::size_t c_g = 0;  // G rows after mixup

    UGPartition() = default;
    UGPartition(std::size_t n_, std::size_t m_, std::size_t cu, std::size_t cg)
        : n(n_), m(m_), c_u(cu), c_g(cg) {
        if (m < 1) {
            throw std::invalid_argument("partition: at least one G token required (m >= 1)");
        }
        if (c_g < 1) {
            throw std::invalid_argument("partition: at least one G row required (c_g >= 1)");
        }
    }

    std::size_t tokens() const { return n + m; }
    std::size_t rows() const { return c_u + c_g; }
    bool preserves_counts() const { return n == c_u && m == c_g; }

    void check_against(const MixerConfig& cfg) const {
        if (tokens() != cfg.tokens) {
            throw std::invalid_argument("partition: n+m = " + std::to_string(tokens()) +
                                        " != T = " + std::to_string(cfg.tokens));
        }
        if (rows() != cfg.heads) {
            throw std::invalid_argument("partition: c_u+c_g = " + std::to_string(rows()) +
                                        " != H = " + std::to_string(cfg.heads));
        }
    }
};

/// Proportional default: c_u/c_g follow n/m (rounded), keeping c_g >= 1.
inline UGPartition default_row_split(std::size_t n, std::size_t m, std::size_t heads) {
    const std::size_t t = n + m;
    std::size_t cu = (n * heads + t / 2) / t;
    if (cu >= heads) cu = heads - 1;
    return UGPartition(n, m, cu, heads - cu);
}

// --- mask ---------------------------------------------------------------------

/// Binary H x (T*D') matrix; entry (i,j) is zero iff i < c_u and j >= n*D'.
struct UgMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> keep;

    bool on(std::size_t i, std::size_t j) const { return keep[i * cols + j] != 0; }

    std::size_t zero_count() const {
        std::size_t z = 0;
        for (std::uint8_t k : keep) z += (k == 0);
        return z;
    }
};

inline UgMask build_ug_mask(const UGPartition& part, std::size_t head_dim, std::size_t tokens) {
    if (part.tokens() != tokens) {
        throw std::invalid_argument("build_ug_mask: partition covers " +
                                    std::to_string(part.tokens()) + " tokens, expected " +
                                    std::to_string(tokens));
    }
    UgMask mask;
    mask.rows = part.rows();
    mask.cols = tokens * head_dim;
    mask.keep.assign(mask.rows * mask.cols, 1);
    const std::size_t cut = part.n * head_dim;
    for (std::size_t i = 0; i < part.c_u; ++i) {
        for (std::size_t j = cut; j < mask.cols; ++j) {
            mask.keep[i * mask.cols + j] = 0;
        }
    }
    return mask;
}

/// Mixup with masked entries written as literal +0.0 so user rows are
/// bitwise independent of group values (a multiply would leak the sign).
template <std::floating_point S>
inline Tensor<S> masked_mixup(const Tensor<S>& x, const UgMask& mask, const MixerConfig& cfg) {
    if (mask.rows != cfg.heads || mask.cols != cfg.mixed_dim()) {
        throw std::invalid_argument("masked_mixup: mask is " + std::to_string(mask.rows) + "x" +
                                    std::to_string(mask.cols) + ", expected " +
                                    std::to_string(cfg.heads) + "x" +
                                    std::to_string(cfg.mixed_dim()));
    }
    if (x.rank() != 2 || x.rows() != cfg.tokens || x.cols() != cfg.dim) {
        throw std::invalid_argument("masked_mixup: input shape " + x.shape_str() +
                                    " does not match config");
    }
    const std::size_t dp = cfg.head_dim();
    Tensor<S> out({cfg.heads, cfg.mixed_dim()});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        for (std::size_t t = 0; t < cfg.tokens; ++t) {
            for (std::size_t d = 0; d < dp; ++d) {
                const std::size_t j = t * dp + d;
                out.at(h, j) = mask.on(h, j) ? x.at(t, h * dp + d) : S(0);
            }
        }
    }
    return out;
}

// --- parameters -----------------------------------------------------------------

/// Linear map from the flattened U rows to a G-row-block increment.
template <std::floating_point S>
struct CompensationParams {
    Tensor<S> w;  // (c_u * d) x (c_g * d)
    Tensor<S> b;  // c_g * d, zero-initialized

    static CompensationParams zeros(std::size_t c_u, std::size_t c_g, std::size_t d) {
        return {Tensor<S>({c_u * d, c_g * d}), Tensor<S>({c_g * d})};
    }

    // Zero-initialized throughout: the block starts exactly as its
    // uncompensated twin and the pathway only grows as gradients demand.
    static CompensationParams init(std::size_t c_u, std::size_t c_g, std::size_t d, Rng&) {
        return zeros(c_u, c_g, d);
    }
};

/// Cross-attention projections for the separated residual.
template <std::floating_point S>
struct SepResidualParams {
    Tensor<S> wq;  // D x d_a (queries from the post-FFN rows)
    Tensor<S> wk;  // D x d_a (keys from the block input)
    Tensor<S> wv;  // D x d_a
    Tensor<S> wo;  // d_a x D

    static SepResidualParams zeros(std::size_t dim, std::size_t attn_dim) {
        return {Tensor<S>({dim, attn_dim}), Tensor<S>({dim, attn_dim}),
                Tensor<S>({dim, attn_dim}), Tensor<S>({attn_dim, dim})};
    }

    static SepResidualParams init(std::size_t dim, std::size_t attn_dim, Rng& rng) {
        SepResidualParams p = zeros(dim, attn_dim);
        const double a = 1.0 / std::sqrt(static_cast<double>(dim));
        const double ao = 1.0 / std::sqrt(static_cast<double>(attn_dim));
        rng.fill_uniform(p.wq, -a, a);
        rng.fill_uniform(p.wk, -a, a);
        rng.fill_uniform(p.wv, -a, a);
        rng.fill_uniform(p.wo, -ao, ao);
        return p;
    }
};

enum class ResidualKind { Plain, Separated };

template <std::floating_point S>
struct UGSepBlockParams {
    std::vector<FfnWeights<S>> reusable;      // rows [0, c_u)
    std::vector<FfnWeights<S>> non_reusable;  // rows [c_u, H)
    LayerNormParams<S> ln_mix;
    LayerNormParams<S> ln_out;
    std::optional<CompensationParams<S>> comp;
    std::optional<SepResidualParams<S>> resid;

    const FfnWeights<S>& ffn_for_row(std::size_t h, std::size_t c_u) const {
        return h < c_u ? reusable[h] : non_reusable[h - c_u];
    }
    FfnWeights<S>& ffn_for_row(std::size_t h, std::size_t c_u) {
        return h < c_u ? reusable[h] : non_reusable[h - c_u];
    }

    static UGSepBlockParams init(const MixerConfig& cfg, const UGPartition& part,
                                 bool compensation, ResidualKind residual, std::size_t attn_dim,
                                 Rng& rng) {
        part.check_against(cfg);
        UGSepBlockParams p;
        for (std::size_t h = 0; h < part.c_u; ++h) {
            p.reusable.push_back(
                FfnWeights<S>::init(cfg.mixed_dim(), cfg.ffn_hidden, cfg.dim, rng));
        }
        for (std::size_t h = 0; h < part.c_g; ++h) {
            p.non_reusable.push_back(
                FfnWeights<S>::init(cfg.mixed_dim(), cfg.ffn_hidden, cfg.dim, rng));
        }
        p.ln_mix = LayerNormParams<S>::identity(cfg.mixed_dim());
        p.ln_out = LayerNormParams<S>::identity(cfg.dim);
        if (compensation && part.c_u > 0) {
            // No U rows means nothing to reinject; the pathway is vacuous.
            p.comp = CompensationParams<S>::init(part.c_u, part.c_g, cfg.mixed_dim(), rng);
        }
        if (residual == ResidualKind::Separated) {
            p.resid = SepResidualParams<S>::init(cfg.dim, attn_dim, rng);
        }
        return p;
    }

    static UGSepBlockParams zeros_like(const UGSepBlockParams& o) {
        UGSepBlockParams g;
        for (const auto& f : o.reusable) {
            g.reusable.push_back(FfnWeights<S>::zeros(f.w1.rows(), f.w1.cols(), f.w2.cols()));
        }
        for (const auto& f : o.non_reusable) {
            g.non_reusable.push_back(FfnWeights<S>::zeros(f.w1.rows(), f.w1.cols(), f.w2.cols()));
        }
        g.ln_mix = LayerNormParams<S>::zeros(o.ln_mix.gamma.numel());
        g.ln_out = LayerNormParams<S>::zeros(o.ln_out.gamma.numel());
        if (o.comp) {
            g.comp = CompensationParams<S>{Tensor<S>::zeros_like(o.comp->w),
                                           Tensor<S>::zeros_like(o.comp->b)};
        }
        if (o.resid) {
            g.resid = SepResidualParams<S>{
                Tensor<S>::zeros_like(o.resid->wq), Tensor<S>::zeros_like(o.resid->wk),
                Tensor<S>::zeros_like(o.resid->wv), Tensor<S>::zeros_like(o.resid->wo)};
        }
        return g;
    }
};

// --- standalone ops ---------------------------------------------------------------

/// Rows [0, c_u) through the reusable FFN sets, the rest through the
/// non-reusable sets; together the two halves partition pffn's rows.
/// u_out is absent when the partition has no U rows.
template <std::floating_point S>
struct SplitPffnResult {
    std::optional<Tensor<S>> u_out;
    Tensor<S> g_out;
};

template <std::floating_point S>
inline SplitPffnResult<S> split_pffn(const Tensor<S>& p, const UGSepBlockParams<S>& params,
                                     const UGPartition& part, Activation act) {
    if (p.rows() != part.rows()) {
        throw std::invalid_argument("split_pffn: row count " + std::to_string(p.rows()) +
                                    " != c_u+c_g = " + std::to_string(part.rows()));
    }
    if (params.reusable.size() != part.c_u || params.non_reusable.size() != part.c_g) {
        throw std::invalid_argument(
            "split_pffn: weight set counts (" + std::to_string(params.reusable.size()) + "," +
            std::to_string(params.non_reusable.size()) + ") != partition rows (" +
            std::to_string(part.c_u) + "," + std::to_string(part.c_g) + ")");
    }
    SplitPffnResult<S> res;
    const std::size_t out_dim = params.non_reusable.front().w2.cols();
    if (part.c_u > 0) {
        res.u_out = Tensor<S>({part.c_u, out_dim});
        for (std::size_t h = 0; h < part.c_u; ++h) {
            ffn_row_forward<S>(p.row(h), params.reusable[h], act, res.u_out->row(h), nullptr);
        }
    }
    res.g_out = Tensor<S>({part.c_g, out_dim});
    for (std::size_t h = 0; h < part.c_g; ++h) {
        ffn_row_forward<S>(p.row(part.c_u + h), params.non_reusable[h], act, res.g_out.row(h),
                           nullptr);
    }
    return res;
}

/// G + reshape(Proj(flatten(U))); U itself is never modified. The
/// projection reads the flattened U block scaled by 1/sqrt(c_u), which
/// keeps its gradient magnitude in line with the per-token FFNs no matter
/// how many rows feed it.
template <std::floating_point S>
inline Tensor<S> info_compensation(const Tensor<S>& u, const Tensor<S>& g,
                                   const CompensationParams<S>& comp) {
    if (u.numel() != comp.w.rows() || g.numel() != comp.w.cols()) {
        throw std::invalid_argument("info_compensation: U has " + std::to_string(u.numel()) +
                                    " entries and G has " + std::to_string(g.numel()) +
                                    ", projection is " + comp.w.shape_str());
    }
    const S scale = S(1) / std::sqrt(static_cast<S>(u.rows()));
    Tensor<S> scaled({u.numel()});
    for (std::size_t i = 0; i < u.numel(); ++i) scaled[i] = u[i] * scale;
    Tensor<S> inc({g.numel()});
    linear_row<S>(scaled.flat(), comp.w, comp.b.flat(), inc.flat());
    Tensor<S> out(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) out[i] = g[i] + inc[i];
    return out;
}

// ---------------------------------------------------------------------------
// Masked cross-attention used by the separated residual.
//
// Masked logits are written as constant zeros (never computed from group
// keys) and masked probabilities are dropped from the value sum, so a
// user-row output touches user-side operands only. The zero logits still
// take softmax mass, matching the post-softmax multiplicative masking:
// user rows sum to less than one.
// ---------------------------------------------------------------------------

template <std::floating_point S>
struct SepResidualCache {
    Tensor<S> q;     // H x d_a
    Tensor<S> k;     // T x d_a
    Tensor<S> v;     // T x d_a
    Tensor<S> prob;  // H x T, full softmax rows (pre prob-mask)
    Tensor<S> attn;  // H x d_a, masked prob . V
};

template <std::floating_point S>
inline void sep_residual_scores_row(std::span<const S> q_row, const Tensor<S>& k,
                                    std::size_t unmasked_keys, S inv_sqrt, std::span<S> s_row) {
    const std::size_t d_a = k.cols();
    for (std::size_t j = 0; j < s_row.size(); ++j) {
        if (j < unmasked_keys) {
            S acc = S(0);
            const S* krow = k.data() + j * d_a;
            for (std::size_t d = 0; d < d_a; ++d) acc += q_row[d] * krow[d];
            s_row[j] = acc * inv_sqrt;
        } else {
            s_row[j] = S(0);
        }
    }
}

template <std::floating_point S>
inline void sep_residual_attend_row(std::span<const S> p_row, const Tensor<S>& v,
                                    std::size_t unmasked_keys, std::span<S> out) {
    const std::size_t d_a = v.cols();
    for (std::size_t d = 0; d < d_a; ++d) out[d] = S(0);
    for (std::size_t j = 0; j < unmasked_keys; ++j) {
        const S p = p_row[j];
        const S* vrow = v.data() + j * d_a;
        for (std::size_t d = 0; d < d_a; ++d) out[d] += p * vrow[d];
    }
}

/// Y + W_O-projected masked cross-attention of Y over the block input.
template <std::floating_point S, class ResidT = SepResidualParams<S>>
inline Tensor<S> separated_residual(const Tensor<S>& y, const Tensor<S>& x_in,
                                    const ResidT& params, const UGPartition& part,
                                    SepResidualCache<S>* cache = nullptr) {
    const std::size_t h = y.rows(), t = x_in.rows(), d_a = params.wq.cols();
    if (h != part.rows() || t != part.tokens()) {
        throw std::invalid_argument("separated_residual: Y is " + y.shape_str() + ", X is " +
                                    x_in.shape_str() + ", partition expects " +
                                    std::to_string(part.rows()) + " rows over " +
                                    std::to_string(part.tokens()) + " tokens");
    }
    Tensor<S> q = matmul(y, params.wq);
    Tensor<S> k = matmul(x_in, params.wk);
    Tensor<S> v = matmul(x_in, params.wv);
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(d_a));
    Tensor<S> scores({h, t});
    Tensor<S> prob({h, t});
    for (std::size_t i = 0; i < h; ++i) {
        const std::size_t keys = i < part.c_u ? part.n : t;
        sep_residual_scores_row<S>(q.row(i), k, keys, inv_sqrt, scores.row(i));
        softmax_span<S>(scores.row(i), prob.row(i));
    }
    Tensor<S> attn({h, d_a});
    for (std::size_t i = 0; i < h; ++i) {
        const std::size_t keys = i < part.c_u ? part.n : t;
        sep_residual_attend_row<S>(prob.row(i), v, keys, attn.row(i));
    }
    Tensor<S> out(y.shape());
    for (std::size_t i = 0; i < h; ++i) {
        Tensor<S> proj({y.cols()});
        linear_row<S>(attn.row(i), params.wo, {}, proj.flat());
        for (std::size_t j = 0; j < y.cols(); ++j) out.at(i, j) = y.at(i, j) + proj[j];
    }
    if (cache) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->prob = std::move(prob);
        cache->attn = std::move(attn);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Block forward in three scopes.
//
// Full computes every row (training, the naive serving path). UserOnly
// computes the c_u user rows from user tokens alone; GroupOnly computes
// the c_g group rows given the per-user cache. All three drive the same
// per-row kernels, so cached and naive serving agree bitwise.
// ---------------------------------------------------------------------------

struct UGSepBlockSpec {
    MixerConfig mixer;
    UGPartition part;
    bool compensation = false;
    ResidualKind residual = ResidualKind::Plain;
    std::size_t attn_dim = 0;

    void validate() const {
        mixer.validate();
        part.check_against(mixer);
        if (residual == ResidualKind::Plain && !part.preserves_counts()) {
            throw std::invalid_argument(
                "block spec: plain residual requires (n,m) == (c_u,c_g), got n=" +
                std::to_string(part.n) + " m=" + std::to_string(part.m) + " c_u=" +
                std::to_string(part.c_u) + " c_g=" + std::to_string(part.c_g));
        }
        if (residual == ResidualKind::Separated && attn_dim < 1) {
            throw std::invalid_argument("block spec: separated residual requires attn_dim >= 1");
        }
    }

    UGPartition output_partition(std::size_t next_cu, std::size_t next_cg) const {
        return UGPartition(part.c_u, part.c_g, next_cu, next_cg);
    }
};

/// Everything the per-candidate path needs from one user's pass.
template <std::floating_point S>
struct BlockUserCache {
    Tensor<S> out_u;     // c_u x D, user rows of the block output
    Tensor<S> masked_u;  // c_u x (T*D'), post-mask user rows (compensation input)
    Tensor<S> k_u;       // n x d_a, user-token keys (separated residual only)
    Tensor<S> v_u;       // n x d_a
};

template <std::floating_point S>
struct UGSepBlockGrads {
    UGSepBlockParams<S> params;
    Tensor<S> input;
};

template <std::floating_point S, class ParamsT = UGSepBlockParams<S>>
class UGSepBlockForward {
public:
    // Full scope.
    UGSepBlockForward(const Tensor<S>& x, const UGSepBlockSpec& spec, const ParamsT& params,
                      const UgMask& mask)
        : spec_(spec), params_(&params), mask_(&mask), x_(x) {
        spec_.validate();
        const MixerConfig& cfg = spec_.mixer;
        if (x.rank() != 2 || x.rows() != cfg.tokens || x.cols() != cfg.dim) {
            throw std::invalid_argument("ugsep block: input shape " + x.shape_str() +
                                        " does not match config");
        }
        const std::size_t h = cfg.heads;
        mixed_ = masked_mixup(x, mask, cfg);
        if (spec_.compensation) {
            apply_compensation();  // post-mask, pre-norm
        }
        normed_ = Tensor<S>({h, cfg.mixed_dim()});
        ln_mix_cache_.resize(h);
        for (std::size_t r = 0; r < h; ++r) {
            layer_norm_span<S>(mixed_.row(r), params.ln_mix.gamma.flat(),
                               params.ln_mix.beta.flat(), static_cast<S>(cfg.ln_eps),
                               normed_.row(r), &ln_mix_cache_[r]);
        }
        fused_ = Tensor<S>({h, cfg.dim});
        ffn_cache_.resize(h);
        for (std::size_t r = 0; r < h; ++r) {
            ffn_row_forward<S>(normed_.row(r), params.ffn_for_row(r, spec_.part.c_u), cfg.act,
                               fused_.row(r), &ffn_cache_[r]);
        }
        resid_ = Tensor<S>({h, cfg.dim});
        if (spec_.residual == ResidualKind::Plain) {
            for (std::size_t r = 0; r < h; ++r) {
                for (std::size_t j = 0; j < cfg.dim; ++j) {
                    resid_.at(r, j) = fused_.at(r, j) + x.at(r, j);
                }
            }
        } else {
            if (!params.resid) {
                throw std::invalid_argument(
                    "ugsep block: separated residual requested without its parameters");
            }
            resid_ = separated_residual<S>(fused_, x, *params.resid, spec_.part, &attn_cache_);
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

    /// Post-FFN (pre-residual) rows, compensation included on G rows.
    const Tensor<S>& pre_residual() const { return fused_; }
    /// Post-mixup, post-LN rows (the FFN inputs).
    const Tensor<S>& normed_mixed() const { return normed_; }

    BlockUserCache<S> user_cache() const {
        BlockUserCache<S> c;
        const std::size_t cu = spec_.part.c_u, d = spec_.mixer.dim;
        c.out_u = Tensor<S>({std::max<std::size_t>(cu, 1), d});
        c.masked_u = Tensor<S>({std::max<std::size_t>(cu, 1), spec_.mixer.mixed_dim()});
        for (std::size_t r = 0; r < cu; ++r) {
            std::copy(output_.row(r).begin(), output_.row(r).end(), c.out_u.row(r).begin());
            std::copy(mixed_.row(r).begin(), mixed_.row(r).end(), c.masked_u.row(r).begin());
        }
        if (spec_.residual == ResidualKind::Separated) {
            const std::size_t n = spec_.part.n, d_a = spec_.attn_dim;
            c.k_u = Tensor<S>({std::max<std::size_t>(n, 1), d_a});
            c.v_u = Tensor<S>({std::max<std::size_t>(n, 1), d_a});
            for (std::size_t j = 0; j < n; ++j) {
                std::copy(attn_cache_.k.row(j).begin(), attn_cache_.k.row(j).end(),
                          c.k_u.row(j).begin());
                std::copy(attn_cache_.v.row(j).begin(), attn_cache_.v.row(j).end(),
                          c.v_u.row(j).begin());
            }
        }
        return c;
    }

    UGSepBlockGrads<S> backward(const Tensor<S>& d_out) const;

private:
    void apply_compensation() {
        const auto& comp = *params_->comp;
        const std::size_t cu = spec_.part.c_u, cg = spec_.part.c_g;
        const std::size_t d = spec_.mixer.mixed_dim();
        comp_in_ = Tensor<S>({std::max<std::size_t>(cu * d, 1)});
        const S scale = cu > 0 ? S(1) / std::sqrt(static_cast<S>(cu)) : S(1);
        for (std::size_t r = 0; r < cu; ++r) {
            for (std::size_t j = 0; j < d; ++j) comp_in_[r * d + j] = mixed_.at(r, j) * scale;
        }
        if (cu == 0) return;  // no U rows feed the projection
        Tensor<S> inc({cg * d});
        linear_row<S>(comp_in_.flat(), comp.w, comp.b.flat(), inc.flat());
        for (std::size_t r = 0; r < cg; ++r) {
            for (std::size_t j = 0; j < d; ++j) mixed_.at(cu + r, j) += inc[r * d + j];
        }
    }

    UGSepBlockSpec spec_;
    const ParamsT* params_;
    const UgMask* mask_;
    Tensor<S> x_;
    Tensor<S> mixed_, normed_, fused_, resid_, output_;
    Tensor<S> comp_in_;
    std::vector<LayerNormCache<S>> ln_mix_cache_, ln_out_cache_;
    std::vector<FfnRowCache<S>> ffn_cache_;
    SepResidualCache<S> attn_cache_;
};

template <std::floating_point S, class ParamsT>
UGSepBlockGrads<S> UGSepBlockForward<S, ParamsT>::backward(const Tensor<S>& d_out) const {
    if (!d_out.same_shape(output_)) {
        throw std::invalid_argument("ugsep backward: gradient shape " + d_out.shape_str() +
                                    " != output shape " + output_.shape_str());
    }
    const MixerConfig& cfg = spec_.mixer;
    const std::size_t h = cfg.heads, t = cfg.tokens, d = cfg.dim;
    const std::size_t cu = spec_.part.c_u, cg = spec_.part.c_g, n = spec_.part.n;
    UGSepBlockGrads<S> g{UGSepBlockParams<S>::zeros_like(*params_), Tensor<S>::zeros_like(x_)};

    Tensor<S> d_resid({h, d});
    for (std::size_t r = 0; r < h; ++r) {
        layer_norm_backward_span<S>(resid_.row(r), params_->ln_out.gamma.flat(),
                                    ln_out_cache_[r], d_out.row(r), d_resid.row(r),
                                    g.params.ln_out.gamma.flat(), g.params.ln_out.beta.flat());
    }

    Tensor<S> d_fused({h, d});
    if (spec_.residual == ResidualKind::Plain) {
        d_fused = d_resid;
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t j = 0; j < d; ++j) g.input.at(r, j) += d_resid.at(r, j);
        }
    } else {
        d_fused = d_resid;  // skip path
        const auto& rp = *params_->resid;
        auto& rg = *g.params.resid;
        const std::size_t d_a = spec_.attn_dim;
        const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(d_a));

        Tensor<S> d_attn({h, d_a});
        for (std::size_t i = 0; i < h; ++i) {
            linear_row_backward<S>(attn_cache_.attn.row(i), rp.wo, d_resid.row(i), &rg.wo, {},
                                   d_attn.row(i));
        }
        Tensor<S> d_q({h, d_a});
        Tensor<S> d_k({t, d_a});
        Tensor<S> d_v({t, d_a});
        Tensor<S> d_prob({h, t});
        for (std::size_t i = 0; i < h; ++i) {
            const std::size_t keys = i < cu ? n : t;
            for (std::size_t j = 0; j < t; ++j) {
                if (j < keys) {
                    S acc = S(0);
                    for (std::size_t a = 0; a < d_a; ++a) {
                        acc += d_attn.at(i, a) * attn_cache_.v.at(j, a);
                    }
                    d_prob.at(i, j) = acc;
                    const S p = attn_cache_.prob.at(i, j);
                    for (std::size_t a = 0; a < d_a; ++a) {
                        d_v.at(j, a) += p * d_attn.at(i, a);
                    }
                } else {
                    d_prob.at(i, j) = S(0);
                }
            }
            Tensor<S> d_scores({t});
            softmax_backward_span<S>(attn_cache_.prob.row(i), d_prob.row(i), d_scores.flat());
            // Masked logits are constants; only the live key range reaches Q/K.
            for (std::size_t j = 0; j < keys; ++j) {
                const S ds = d_scores[j] * inv_sqrt;
                for (std::size_t a = 0; a < d_a; ++a) {
                    d_q.at(i, a) += ds * attn_cache_.k.at(j, a);
                    d_k.at(j, a) += ds * attn_cache_.q.at(i, a);
                }
            }
        }
        for (std::size_t i = 0; i < h; ++i) {
            linear_row_backward<S>(fused_.row(i), rp.wq, d_q.row(i), &rg.wq, {}, d_fused.row(i));
        }
        for (std::size_t j = 0; j < t; ++j) {
            linear_row_backward<S>(x_.row(j), rp.wk, d_k.row(j), &rg.wk, {}, g.input.row(j));
            linear_row_backward<S>(x_.row(j), rp.wv, d_v.row(j), &rg.wv, {}, g.input.row(j));
        }
    }

    Tensor<S> d_normed({h, cfg.mixed_dim()});
    for (std::size_t r = 0; r < h; ++r) {
        ffn_row_backward<S>(normed_.row(r), params_->ffn_for_row(r, cu), cfg.act, ffn_cache_[r],
                            d_fused.row(r), g.params.ffn_for_row(r, cu), d_normed.row(r));
    }
    Tensor<S> d_mixed({h, cfg.mixed_dim()});
    for (std::size_t r = 0; r < h; ++r) {
        layer_norm_backward_span<S>(mixed_.row(r), params_->ln_mix.gamma.flat(),
                                    ln_mix_cache_[r], d_normed.row(r), d_mixed.row(r),
                                    g.params.ln_mix.gamma.flat(), g.params.ln_mix.beta.flat());
    }
    if (spec_.compensation && cu > 0) {
        const auto& comp = *params_->comp;
        auto& comp_grad = *g.params.comp;
        const std::size_t dm = cfg.mixed_dim();
        Tensor<S> d_inc({cg * dm});
        for (std::size_t r = 0; r < cg; ++r) {
            for (std::size_t j = 0; j < dm; ++j) d_inc[r * dm + j] = d_mixed.at(cu + r, j);
        }
        Tensor<S> d_u({cu * dm});
        linear_row_backward<S>(comp_in_.flat(), comp.w, d_inc.flat(), &comp_grad.w,
                               comp_grad.b.flat(), d_u.flat());
        const S scale = S(1) / std::sqrt(static_cast<S>(cu));
        for (std::size_t r = 0; r < cu; ++r) {
            for (std::size_t j = 0; j < dm; ++j) d_mixed.at(r, j) += d_u[r * dm + j] * scale;
        }
    }
    const std::size_t dp = cfg.head_dim();
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t tok = 0; tok < t; ++tok) {
            for (std::size_t dd = 0; dd < dp; ++dd) {
                const std::size_t j = tok * dp + dd;
                if (mask_->on(r, j)) {
                    g.input.at(tok, r * dp + dd) += d_mixed.at(r, j);
                }
            }
        }
    }
    return g;
}

template <std::floating_point S, class ParamsT = UGSepBlockParams<S>>
inline Tensor<S> ugsep_block_forward(const Tensor<S>& x, const UGSepBlockSpec& spec,
                                     const ParamsT& params, const UgMask& mask) {
    return UGSepBlockForward<S, ParamsT>(x, spec, params, mask).output();
}

// --- user-only / group-only scopes (inference paths) -----------------------------

/// User rows of the block, computed from the n user tokens alone.
/// Returns the c_u output rows plus the cache the candidate path reads.
template <std::floating_point S, class ParamsT = UGSepBlockParams<S>>
inline BlockUserCache<S> ugsep_block_user_path(const Tensor<S>& x_u, const UGSepBlockSpec& spec,
                                               const ParamsT& params, const UgMask& mask) {
    spec.validate();
    const MixerConfig& cfg = spec.mixer;
    const std::size_t cu = spec.part.c_u, n = spec.part.n, d = cfg.dim;
    const std::size_t dp = cfg.head_dim();
    if (x_u.rows() != n || (n > 0 && x_u.cols() != d)) {
        throw std::invalid_argument("user path: expected " + std::to_string(n) + "x" +
                                    std::to_string(d) + " user tokens, got " + x_u.shape_str());
    }
    BlockUserCache<S> c;
    c.out_u = Tensor<S>({std::max<std::size_t>(cu, 1), d});
    c.masked_u = Tensor<S>({std::max<std::size_t>(cu, 1), cfg.mixed_dim()});
    if (cu == 0) return c;

    Tensor<S> normed_row({cfg.mixed_dim()});
    // Keys/values over user tokens are user-side work; compute once here.
    const bool sep = spec.residual == ResidualKind::Separated;
    if (sep) {
        c.k_u = Tensor<S>({std::max<std::size_t>(n, 1), spec.attn_dim});
        c.v_u = Tensor<S>({std::max<std::size_t>(n, 1), spec.attn_dim});
        for (std::size_t j = 0; j < n; ++j) {
            linear_row<S>(x_u.row(j), params.resid->wk, {}, c.k_u.row(j));
            linear_row<S>(x_u.row(j), params.resid->wv, {}, c.v_u.row(j));
        }
    }
    const S inv_sqrt = sep ? S(1) / std::sqrt(static_cast<S>(spec.attn_dim)) : S(0);
    Tensor<S> ffn_u({cu, d});
    for (std::size_t r = 0; r < cu; ++r) {
        for (std::size_t tok = 0; tok < cfg.tokens; ++tok) {
            for (std::size_t dd = 0; dd < dp; ++dd) {
                const std::size_t j = tok * dp + dd;
                c.masked_u.at(r, j) = (mask.on(r, j) && tok < n) ? x_u.at(tok, r * dp + dd)
                                                                 : S(0);
            }
        }
        layer_norm_span<S>(c.masked_u.row(r), params.ln_mix.gamma.flat(),
                           params.ln_mix.beta.flat(), static_cast<S>(cfg.ln_eps),
                           normed_row.flat(), nullptr);
        ffn_row_forward<S>(normed_row.flat(), params.reusable[r], cfg.act, ffn_u.row(r),
                           nullptr);
    }
    Tensor<S> resid_row({d});
    for (std::size_t r = 0; r < cu; ++r) {
        if (spec.residual == ResidualKind::Plain) {
            for (std::size_t j = 0; j < d; ++j) {
                resid_row[j] = ffn_u.at(r, j) + x_u.at(r, j);
            }
        } else {
            Tensor<S> q({spec.attn_dim});
            linear_row<S>(ffn_u.row(r), params.resid->wq, {}, q.flat());
            Tensor<S> scores({cfg.tokens});
            sep_residual_scores_row<S>(q.flat(), c.k_u, n, inv_sqrt, scores.flat());
            Tensor<S> prob({cfg.tokens});
            softmax_span<S>(scores.flat(), prob.flat());
            Tensor<S> attn({spec.attn_dim});
            sep_residual_attend_row<S>(prob.flat(), c.v_u, n, attn.flat());
            Tensor<S> proj({d});
            linear_row<S>(attn.flat(), params.resid->wo, {}, proj.flat());
            for (std::size_t j = 0; j < d; ++j) resid_row[j] = ffn_u.at(r, j) + proj[j];
        }
        layer_norm_span<S>(resid_row.flat(), params.ln_out.gamma.flat(),
                           params.ln_out.beta.flat(), static_cast<S>(cfg.ln_eps), c.out_u.row(r),
                           nullptr);
    }
    return c;
}

/// Group rows of the block for one candidate, given that user's cache.
/// x_u_in are the (cached) user-token inputs of this block.
template <std::floating_point S, class ParamsT = UGSepBlockParams<S>>
inline Tensor<S> ugsep_block_group_path(const Tensor<S>& x_u_in, const Tensor<S>& x_g_in,
                                        const UGSepBlockSpec& spec, const ParamsT& params,
                                        const UgMask& mask, const BlockUserCache<S>& cache) {
    const MixerConfig& cfg = spec.mixer;
    const std::size_t cu = spec.part.c_u, cg = spec.part.c_g;
    const std::size_t n = spec.part.n, m = spec.part.m, d = cfg.dim;
    const std::size_t dp = cfg.head_dim();
    if (x_g_in.rows() != m || x_g_in.cols() != d) {
        throw std::invalid_argument("group path: expected " + std::to_string(m) + "x" +
                                    std::to_string(d) + " group tokens, got " +
                                    x_g_in.shape_str());
    }
    auto token_entry = [&](std::size_t tok, std::size_t col) {
        return tok < n ? x_u_in.at(tok, col) : x_g_in.at(tok - n, col);
    };

    Tensor<S> out_g({cg, d});
    const std::size_t dm = cfg.mixed_dim();
    Tensor<S> mixed_g({cg, dm});
    Tensor<S> normed_row({dm});
    Tensor<S> ffn_g({cg, d});
    for (std::size_t r = 0; r < cg; ++r) {
        const std::size_t row = cu + r;
        for (std::size_t tok = 0; tok < cfg.tokens; ++tok) {
            for (std::size_t dd = 0; dd < dp; ++dd) {
                const std::size_t j = tok * dp + dd;
                mixed_g.at(r, j) = mask.on(row, j) ? token_entry(tok, row * dp + dd) : S(0);
            }
        }
    }
    if (spec.compensation && cu > 0) {
        Tensor<S> u_flat({cu * dm});
        const S uscale = S(1) / std::sqrt(static_cast<S>(cu));
        for (std::size_t r = 0; r < cu; ++r) {
            for (std::size_t j = 0; j < dm; ++j) {
                u_flat[r * dm + j] = cache.masked_u.at(r, j) * uscale;
            }
        }
        Tensor<S> inc({cg * dm});
        linear_row<S>(u_flat.flat(), params.comp->w, params.comp->b.flat(), inc.flat());
        for (std::size_t r = 0; r < cg; ++r) {
            for (std::size_t j = 0; j < dm; ++j) mixed_g.at(r, j) += inc[r * dm + j];
        }
    }
    for (std::size_t r = 0; r < cg; ++r) {
        layer_norm_span<S>(mixed_g.row(r), params.ln_mix.gamma.flat(),
                           params.ln_mix.beta.flat(), static_cast<S>(cfg.ln_eps),
                           normed_row.flat(), nullptr);
        ffn_row_forward<S>(normed_row.flat(), params.non_reusable[r], cfg.act, ffn_g.row(r),
                           nullptr);
    }
    Tensor<S> resid_row({d});
    if (spec.residual == ResidualKind::Plain) {
        for (std::size_t r = 0; r < cg; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                resid_row[j] = ffn_g.at(r, j) + x_g_in.at(r, j);
            }
            layer_norm_span<S>(resid_row.flat(), params.ln_out.gamma.flat(),
                               params.ln_out.beta.flat(), static_cast<S>(cfg.ln_eps),
                               out_g.row(r), nullptr);
        }
    } else {
        const std::size_t d_a = spec.attn_dim, t = cfg.tokens;
        const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(d_a));
        // Group-token keys/values are per-candidate; user ones come cached.
        Tensor<S> k({t, d_a});
        Tensor<S> v({t, d_a});
        for (std::size_t j = 0; j < n; ++j) {
            std::copy(cache.k_u.row(j).begin(), cache.k_u.row(j).end(), k.row(j).begin());
            std::copy(cache.v_u.row(j).begin(), cache.v_u.row(j).end(), v.row(j).begin());
        }
        for (std::size_t j = 0; j < m; ++j) {
            linear_row<S>(x_g_in.row(j), params.resid->wk, {}, k.row(n + j));
            linear_row<S>(x_g_in.row(j), params.resid->wv, {}, v.row(n + j));
        }
        for (std::size_t r = 0; r < cg; ++r) {
            Tensor<S> q({d_a});
            linear_row<S>(ffn_g.row(r), params.resid->wq, {}, q.flat());
            Tensor<S> scores({t});
            sep_residual_scores_row<S>(q.flat(), k, t, inv_sqrt, scores.flat());
            Tensor<S> prob({t});
            softmax_span<S>(scores.flat(), prob.flat());
            Tensor<S> attn({d_a});
            sep_residual_attend_row<S>(prob.flat(), v, t, attn.flat());
            Tensor<S> proj({d});
            linear_row<S>(attn.flat(), params.resid->wo, {}, proj.flat());
            for (std::size_t j = 0; j < d; ++j) resid_row[j] = ffn_g.at(r, j) + proj[j];
            layer_norm_span<S>(resid_row.flat(), params.ln_out.gamma.flat(),
                               params.ln_out.beta.flat(), static_cast<S>(cfg.ln_eps),
                               out_g.row(r), nullptr);
        }
    }
    return out_g;
}

// --- parameter traversal -----------------------------------------------------------

template <std::floating_point S>
inline void collect_params(UGSepBlockParams<S>& p, const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor<S>*>>& out) {
    for (std::size_t i = 0; i < p.reusable.size(); ++i) {
        collect_params(p.reusable[i], prefix + ".reusable" + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < p.non_reusable.size(); ++i) {
        collect_params(p.non_reusable[i], prefix + ".non_reusable" + std::to_string(i), out);
    }
    collect_params(p.ln_mix, prefix + ".ln_mix", out);
    collect_params(p.ln_out, prefix + ".ln_out", out);
    if (p.comp) {
        out.emplace_back(prefix + ".comp.w", &p.comp->w);
        out.emplace_back(prefix + ".comp.b", &p.comp->b);
    }
    if (p.resid) {
        out.emplace_back(prefix + ".resid.wq", &p.resid->wq);
        out.emplace_back(prefix + ".resid.wk", &p.resid->wk);
        out.emplace_back(prefix + ".resid.wv", &p.resid->wv);
        out.emplace_back(prefix + ".resid.wo", &p.resid->wo);
    }
}

}  // namespace ugsep
