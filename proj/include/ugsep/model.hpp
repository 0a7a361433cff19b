#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ugsep/quant.hpp"
#include "ugsep/separation.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// Desk-scale scoring model: a stack of separation blocks plus a readout
// head (mean-pool over final tokens -> linear -> sigmoid).
// ---------------------------------------------------------------------------

struct ModelSpec {
    std::vector<UGSepBlockSpec> blocks;
    bool fault_inject_mask = false;  // test hook: flips one masked bit in block 0

    void validate() const {
        if (blocks.empty()) {
            throw std::invalid_argument("model spec: at least one block required");
        }
        for (const auto& b : blocks) b.validate();
        for (std::size_t k = 1; k < blocks.size(); ++k) {
            const auto& prev = blocks[k - 1];
            const auto& cur = blocks[k];
            if (cur.mixer.tokens != prev.mixer.heads || cur.part.n != prev.part.c_u ||
                cur.part.m != prev.part.c_g) {
                throw std::invalid_argument("model spec: block " + std::to_string(k) +
                                            " input does not match block " +
                                            std::to_string(k - 1) + " output");
            }
            if (cur.mixer.dim != prev.mixer.dim) {
                throw std::invalid_argument("model spec: hidden dim changes at block " +
                                            std::to_string(k));
            }
        }
    }

    std::size_t dim() const { return blocks.front().mixer.dim; }
    std::size_t input_u_tokens() const { return blocks.front().part.n; }
    std::size_t input_g_tokens() const { return blocks.front().part.m; }
    std::size_t depth() const { return blocks.size(); }
};

/// Homogeneous stack; the first block may re-split the U/G row counts, in
/// which case it uses the separated residual and later blocks inherit the
/// new partition.
inline ModelSpec make_stack(std::size_t tokens, std::size_t dim, std::size_t heads,
                            std::size_t ffn_hidden, std::size_t depth, std::size_t n,
                            std::size_t m, std::size_t c_u, std::size_t c_g, bool compensation,
                            Activation act = Activation::Gelu, std::size_t attn_dim = 16) {
    ModelSpec spec;
    UGSepBlockSpec first;
    first.mixer = MixerConfig(tokens, dim, heads, ffn_hidden, act);
    first.part = UGPartition(n, m, c_u, c_g);
    first.compensation = compensation;
    const bool pyramidal = !(n == c_u && m == c_g);
    first.residual = pyramidal ? ResidualKind::Separated : ResidualKind::Plain;
    first.attn_dim = pyramidal ? attn_dim : 0;
    spec.blocks.push_back(first);
    for (std::size_t k = 1; k < depth; ++k) {
        UGSepBlockSpec b;
        b.mixer = MixerConfig(heads, dim, heads, ffn_hidden, act);
        b.part = UGPartition(c_u, c_g, c_u, c_g);
        b.compensation = compensation;
        b.residual = ResidualKind::Plain;
        spec.blocks.push_back(b);
    }
    spec.validate();
    return spec;
}

template <std::floating_point S>
struct ReadoutParams {
    Tensor<S> w;  // D
    Tensor<S> b;  // 1

    static ReadoutParams init(std::size_t dim, Rng& rng) {
        ReadoutParams p{Tensor<S>({dim}), Tensor<S>({1})};
        const double a = 1.0 / std::sqrt(static_cast<double>(dim));
        rng.fill_uniform(p.w, -a, a);
        return p;
    }

    static ReadoutParams zeros(std::size_t dim) { return {Tensor<S>({dim}), Tensor<S>({1})}; }
};

template <std::floating_point S>
struct Model {
    using scalar_type = S;

    ModelSpec spec;
    std::vector<UGSepBlockParams<S>> blocks;
    std::vector<UgMask> masks;
    ReadoutParams<S> readout;

    static Model init(const ModelSpec& spec, std::uint64_t seed) {
        spec.validate();
        Model m;
        m.spec = spec;
        Rng rng(seed);
        for (const auto& b : spec.blocks) {
            m.blocks.push_back(UGSepBlockParams<S>::init(b.mixer, b.part, b.compensation,
                                                         b.residual, b.attn_dim, rng));
        }
        m.readout = ReadoutParams<S>::init(spec.dim(), rng);
        m.rebuild_masks();
        return m;
    }

    static Model zeros_like(const Model& o) {
        Model m;
        m.spec = o.spec;
        for (const auto& b : o.blocks) m.blocks.push_back(UGSepBlockParams<S>::zeros_like(b));
        m.readout = ReadoutParams<S>::zeros(o.spec.dim());
        m.masks = o.masks;
        return m;
    }

    void rebuild_masks() {
        masks.clear();
        for (const auto& b : spec.blocks) {
            masks.push_back(build_ug_mask(b.part, b.mixer.head_dim(), b.mixer.tokens));
        }
        if (spec.fault_inject_mask) {
            UgMask& m0 = masks.front();
            const auto& p0 = spec.blocks.front().part;
            if (p0.c_u > 0) {
                // Flip the first masked entry back on: row 0, first G column.
                m0.keep[0 * m0.cols + p0.n * spec.blocks.front().mixer.head_dim()] = 1;
            }
        }
    }
};

// --- full forward with retained state (training / gradient checks) ------------

template <std::floating_point S>
class ModelForward {
public:
    ModelForward(const Model<S>& model, const Tensor<S>& x0) : model_(&model) {
        blocks_.reserve(model.spec.depth());
        const Tensor<S>* x = &x0;
        for (std::size_t k = 0; k < model.spec.depth(); ++k) {
            blocks_.emplace_back(*x, model.spec.blocks[k], model.blocks[k], model.masks[k]);
            x = &blocks_.back().output();
        }
        const Tensor<S>& last = blocks_.back().output();
        const std::size_t h = last.rows(), d = last.cols();
        pooled_ = Tensor<S>({d});
        for (std::size_t j = 0; j < d; ++j) {
            S acc = S(0);
            for (std::size_t r = 0; r < h; ++r) acc += last.at(r, j);
            pooled_[j] = acc / static_cast<S>(h);
        }
        z_ = S(0);
        for (std::size_t j = 0; j < d; ++j) z_ += model.readout.w[j] * pooled_[j];
        z_ += model.readout.b[0];
        score_ = sigmoid(z_);
    }

    S score() const { return score_; }
    S logit() const { return z_; }
    const UGSepBlockForward<S>& block(std::size_t k) const { return blocks_[k]; }
    const Tensor<S>& final_tokens() const { return blocks_.back().output(); }

    /// Backward from d loss / d logit; accumulates into model-shaped grads
    /// and returns d loss / d input tokens.
    Tensor<S> backward_from_dz(S dz, Model<S>& grads) const {
        const Tensor<S>& last = blocks_.back().output();
        const std::size_t h = last.rows(), d = last.cols();
        for (std::size_t j = 0; j < d; ++j) grads.readout.w[j] += dz * pooled_[j];
        grads.readout.b[0] += dz;
        Tensor<S> d_tokens({h, d});
        const S inv_h = S(1) / static_cast<S>(h);
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                d_tokens.at(r, j) = dz * model_->readout.w[j] * inv_h;
            }
        }
        for (std::size_t k = blocks_.size(); k-- > 0;) {
            UGSepBlockGrads<S> g = blocks_[k].backward(d_tokens);
            accumulate(grads.blocks[k], g.params);
            d_tokens = std::move(g.input);
        }
        return d_tokens;
    }

private:
    static void accumulate(UGSepBlockParams<S>& dst, UGSepBlockParams<S>& src) {
        std::vector<std::pair<std::string, Tensor<S>*>> a, b;
        collect_params(dst, "", a);
        collect_params(src, "", b);
        for (std::size_t i = 0; i < a.size(); ++i) add_inplace(*a[i].second, *b[i].second);
    }

    const Model<S>* model_;
    std::vector<UGSepBlockForward<S>> blocks_;
    Tensor<S> pooled_;
    S z_ = S(0);
    S score_ = S(0);
};

/// Score a single sample: x0 = concat(user tokens, candidate tokens).
template <std::floating_point S>
inline S score_sample(const Model<S>& model, const Tensor<S>& x0) {
    return ModelForward<S>(model, x0).score();
}

template <std::floating_point S>
inline Tensor<S> concat_tokens(const Tensor<S>& u, std::size_t n, const Tensor<S>& g,
                               std::size_t m, std::size_t d) {
    Tensor<S> x({n + m, d});
    for (std::size_t t = 0; t < n; ++t) {
        std::copy(u.row(t).begin(), u.row(t).end(), x.row(t).begin());
    }
    for (std::size_t t = 0; t < m; ++t) {
        std::copy(g.row(t).begin(), g.row(t).end(), x.row(n + t).begin());
    }
    return x;
}

// --- named parameter traversal -----------------------------------------------

template <std::floating_point S>
inline std::vector<std::pair<std::string, Tensor<S>*>> collect_params(Model<S>& m) {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    for (std::size_t k = 0; k < m.blocks.size(); ++k) {
        collect_params(m.blocks[k], "block" + std::to_string(k), out);
    }
    out.emplace_back("readout.w", &m.readout.w);
    out.emplace_back("readout.b", &m.readout.b);
    return out;
}

// ---------------------------------------------------------------------------
// Separability verifier: fixed user tokens, fresh group tokens per trial;
// user-side traces must be bitwise constant. The per-row trace is the
// concatenation [post-mask LN row | post-FFN row | output row].
// ---------------------------------------------------------------------------

struct BlockSeparabilityReport {
    std::size_t block_index = 0;
    std::size_t rows_checked = 0;
    std::size_t trials = 0;
    bool pass = true;
    struct Divergence {
        std::size_t row = 0;
        std::size_t col = 0;
        std::size_t trial = 0;
    };
    std::optional<Divergence> first_divergence;
};

struct SeparabilityReport {
    std::vector<BlockSeparabilityReport> blocks;
    std::size_t trials = 0;
    bool pass = true;
};

template <std::floating_point S>
inline std::vector<Tensor<S>> separability_traces(const Model<S>& model, const Tensor<S>& x0) {
    std::vector<Tensor<S>> traces;
    ModelForward<S> fwd(model, x0);
    for (std::size_t k = 0; k < model.spec.depth(); ++k) {
        const auto& spec = model.spec.blocks[k];
        const std::size_t cu = spec.part.c_u;
        const std::size_t w = spec.mixer.mixed_dim() + 2 * spec.mixer.dim;
        Tensor<S> trace({std::max<std::size_t>(cu, 1), w});
        const auto& blk = fwd.block(k);
        for (std::size_t r = 0; r < cu; ++r) {
            std::size_t off = 0;
            for (S v : blk.normed_mixed().row(r)) trace.at(r, off++) = v;
            for (S v : blk.pre_residual().row(r)) trace.at(r, off++) = v;
            for (S v : blk.output().row(r)) trace.at(r, off++) = v;
        }
        traces.push_back(std::move(trace));
    }
    return traces;
}

template <std::floating_point S>
inline SeparabilityReport verify_separability(const Model<S>& model, std::size_t trials,
                                              std::uint64_t seed) {
    if (trials < 1) {
        throw std::invalid_argument("verify_separability: trials must be >= 1");
    }
    const std::size_t n = model.spec.input_u_tokens();
    const std::size_t m = model.spec.input_g_tokens();
    const std::size_t d = model.spec.dim();
    Rng rng(seed);
    Tensor<S> u({std::max<std::size_t>(n, 1), d});
    rng.fill_gaussian(u);

    SeparabilityReport report;
    report.trials = trials;
    report.blocks.resize(model.spec.depth());
    for (std::size_t k = 0; k < model.spec.depth(); ++k) {
        report.blocks[k].block_index = k;
        report.blocks[k].rows_checked = model.spec.blocks[k].part.c_u;
        report.blocks[k].trials = trials;
    }

    std::vector<Tensor<S>> reference;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Tensor<S> g({m, d});
        rng.fill_gaussian(g);
        Tensor<S> x0 = concat_tokens(u, n, g, m, d);
        std::vector<Tensor<S>> traces = separability_traces(model, x0);
        if (trial == 0) {
            reference = std::move(traces);
            continue;
        }
        for (std::size_t k = 0; k < traces.size(); ++k) {
            auto& blk = report.blocks[k];
            if (!blk.pass || blk.rows_checked == 0) continue;
            if (bitwise_equal(reference[k], traces[k])) continue;
            blk.pass = false;
            for (std::size_t r = 0; r < blk.rows_checked && !blk.first_divergence; ++r) {
                for (std::size_t c = 0; c < reference[k].cols(); ++c) {
                    if (std::memcmp(&reference[k].at(r, c), &traces[k].at(r, c), sizeof(S)) !=
                        0) {
                        blk.first_divergence = {r, c, trial};
                        break;
                    }
                }
            }
        }
    }
    for (const auto& b : report.blocks) report.pass = report.pass && b.pass;
    return report;
}

// ---------------------------------------------------------------------------
// Weight-only quantized model. Reuses the generic block paths; only true
// weight matrices are quantized, biases and layer norms stay in full
// precision.
// ---------------------------------------------------------------------------

template <std::floating_point S>
struct QFfnWeights {
    QuantizedMatrix w1;
    Tensor<S> b1;
    QuantizedMatrix w2;
    Tensor<S> b2;
};

template <std::floating_point S>
struct QCompensationParams {
    QuantizedMatrix w;
    Tensor<S> b;
};

template <std::floating_point S>
struct QSepResidualParams {
    QuantizedMatrix wq, wk, wv, wo;
};

template <std::floating_point S>
struct QUGSepBlockParams {
    std::vector<QFfnWeights<S>> reusable;
    std::vector<QFfnWeights<S>> non_reusable;
    LayerNormParams<S> ln_mix;
    LayerNormParams<S> ln_out;
    std::optional<QCompensationParams<S>> comp;
    std::optional<QSepResidualParams<S>> resid;

    const QFfnWeights<S>& ffn_for_row(std::size_t h, std::size_t c_u) const {
        return h < c_u ? reusable[h] : non_reusable[h - c_u];
    }
};

template <std::floating_point S>
struct QuantizedModel {
    using scalar_type = S;

    ModelSpec spec;
    std::vector<QUGSepBlockParams<S>> blocks;
    std::vector<UgMask> masks;
    ReadoutParams<S> readout;
};

template <std::floating_point S>
inline QuantizedModel<S> quantize_model(const Model<S>& model, QuantScheme scheme = {}) {
    QuantizedModel<S> q;
    q.spec = model.spec;
    q.masks = model.masks;
    q.readout = model.readout;
    auto q_ffn = [&](const FfnWeights<S>& f) {
        return QFfnWeights<S>{quantize(f.w1, scheme), f.b1, quantize(f.w2, scheme), f.b2};
    };
    for (const auto& b : model.blocks) {
        QUGSepBlockParams<S> qb;
        for (const auto& f : b.reusable) qb.reusable.push_back(q_ffn(f));
        for (const auto& f : b.non_reusable) qb.non_reusable.push_back(q_ffn(f));
        qb.ln_mix = b.ln_mix;
        qb.ln_out = b.ln_out;
        if (b.comp) qb.comp = QCompensationParams<S>{quantize(b.comp->w, scheme), b.comp->b};
        if (b.resid) {
            qb.resid = QSepResidualParams<S>{quantize(b.resid->wq, scheme),
                                             quantize(b.resid->wk, scheme),
                                             quantize(b.resid->wv, scheme),
                                             quantize(b.resid->wo, scheme)};
        }
        q.blocks.push_back(std::move(qb));
    }
    return q;
}

/// Inference-only scoring through the quantized stack.
template <std::floating_point S>
inline S score_sample(const QuantizedModel<S>& model, const Tensor<S>& x0) {
    const Tensor<S>* x = &x0;
    Tensor<S> cur;
    for (std::size_t k = 0; k < model.spec.depth(); ++k) {
        cur = ugsep_block_forward<S, QUGSepBlockParams<S>>(*x, model.spec.blocks[k],
                                                           model.blocks[k], model.masks[k]);
        x = &cur;
    }
    const std::size_t h = cur.rows(), d = cur.cols();
    S z = S(0);
    Tensor<S> pooled({d});
    for (std::size_t j = 0; j < d; ++j) {
        S acc = S(0);
        for (std::size_t r = 0; r < h; ++r) acc += cur.at(r, j);
        pooled[j] = acc / static_cast<S>(h);
    }
    for (std::size_t j = 0; j < d; ++j) z += model.readout.w[j] * pooled[j];
    z += model.readout.b[0];
    return sigmoid(z);
}

/// Shapes of every quantizable matrix, for footprint accounting.
template <std::floating_point S>
inline std::vector<std::pair<std::size_t, std::size_t>> weight_matrix_shapes(
    const Model<S>& model) {
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    for (const auto& b : model.blocks) {
        for (const auto* group : {&b.reusable, &b.non_reusable}) {
            for (const auto& f : *group) {
                shapes.emplace_back(f.w1.rows(), f.w1.cols());
                shapes.emplace_back(f.w2.rows(), f.w2.cols());
            }
        }
        if (b.comp) shapes.emplace_back(b.comp->w.rows(), b.comp->w.cols());
        if (b.resid) {
            shapes.emplace_back(b.resid->wq.rows(), b.resid->wq.cols());
            shapes.emplace_back(b.resid->wk.rows(), b.resid->wk.cols());
            shapes.emplace_back(b.resid->wv.rows(), b.resid->wv.cols());
            shapes.emplace_back(b.resid->wo.rows(), b.resid->wo.cols());
        }
    }
    return shapes;
}

}  // namespace ugsep
