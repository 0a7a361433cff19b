#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "ugsep/model.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// In-request user-side caching: cumsum the candidate sizes, gather one
// replicated row per user, run the reusable path once, repeat its outputs
// across that user's candidates, and run only the non-reusable path per
// candidate. Scores match the naive per-candidate full forward bitwise.
// ---------------------------------------------------------------------------

template <std::floating_point S>
struct UserRecord {
    Tensor<S> user_tokens;               // n x D
    std::vector<Tensor<S>> candidates;   // each m x D
};

template <std::floating_point S>
struct Request {
    std::vector<UserRecord<S>> users;

    std::vector<std::size_t> candidate_sizes() const {
        std::vector<std::size_t> sizes;
        sizes.reserve(users.size());
        for (const auto& u : users) sizes.push_back(u.candidates.size());
        return sizes;
    }

    std::size_t total_candidates() const {
        std::size_t n = 0;
        for (const auto& u : users) n += u.candidates.size();
        return n;
    }
};

class IntegrityError : public std::runtime_error {
public:
    IntegrityError(std::size_t block, const std::string& what)
        : std::runtime_error(what), block_index(block) {}
    std::size_t block_index;
};

// --- Algorithm-1 primitives -----------------------------------------------------

/// Exclusive prefix sum: offsets[i] is the index of user i's first
/// replicated row.
inline std::vector<std::size_t> cumsum_offsets(const std::vector<std::size_t>& sizes) {
    std::vector<std::size_t> offsets(sizes.size());
    std::size_t acc = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 1) {
            throw std::invalid_argument("cumsum_offsets: candidate size must be >= 1 at index " +
                                        std::to_string(i));
        }
        offsets[i] = acc;
        acc += sizes[i];
    }
    return offsets;
}

/// Picks row offsets[i] out of the N-replicated layout. Works on any
/// [N x ...] tensor; trailing dimensions are kept.
template <std::floating_point S>
inline Tensor<S> gather_unique_u(const Tensor<S>& replicated,
                                 const std::vector<std::size_t>& offsets) {
    const std::size_t n_rows = replicated.dim(0);
    const std::size_t row_elems = replicated.numel() / n_rows;
    std::vector<std::size_t> shape = replicated.shape();
    shape[0] = offsets.size();
    Tensor<S> out(shape);
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        if (offsets[i] >= n_rows) {
            throw std::invalid_argument("gather_unique_u: offset " +
                                        std::to_string(offsets[i]) + " out of range [0," +
                                        std::to_string(n_rows) + ")");
        }
        std::copy(replicated.data() + offsets[i] * row_elems,
                  replicated.data() + (offsets[i] + 1) * row_elems,
                  out.data() + i * row_elems);
    }
    return out;
}

/// Repeats row i of a [M x ...] tensor sizes[i] times, preserving order.
template <std::floating_point S>
inline Tensor<S> repeat_u_outputs(const Tensor<S>& unique,
                                  const std::vector<std::size_t>& sizes) {
    if (unique.dim(0) != sizes.size()) {
        throw std::invalid_argument("repeat_u_outputs: " + std::to_string(unique.dim(0)) +
                                    " rows vs " + std::to_string(sizes.size()) + " sizes");
    }
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    const std::size_t row_elems = unique.numel() / unique.dim(0);
    std::vector<std::size_t> shape = unique.shape();
    shape[0] = total;
    Tensor<S> out(shape);
    std::size_t r = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        for (std::size_t c = 0; c < sizes[i]; ++c, ++r) {
            std::copy(unique.data() + i * row_elems, unique.data() + (i + 1) * row_elems,
                      out.data() + r * row_elems);
        }
    }
    return out;
}

/// Algorithm 1's INPUT_U: each user's token matrix replicated once per
/// candidate, [N x n x D].
template <std::floating_point S>
inline Tensor<S> replicated_user_input(const Request<S>& req) {
    if (req.users.empty()) {
        throw std::invalid_argument("request has no users");
    }
    const std::size_t n = req.users.front().user_tokens.rows();
    const std::size_t d = req.users.front().user_tokens.cols();
    Tensor<S> out({req.total_candidates(), n, d});
    std::size_t r = 0;
    for (const auto& u : req.users) {
        for (std::size_t c = 0; c < u.candidates.size(); ++c, ++r) {
            std::copy(u.user_tokens.flat().begin(), u.user_tokens.flat().end(),
                      out.data() + r * n * d);
        }
    }
    return out;
}

// --- user-cache packing (the Repeat payload) -------------------------------------

inline std::size_t user_cache_width(const ModelSpec& spec) {
    const std::size_t d = spec.dim();
    std::size_t w = spec.input_u_tokens() * d;
    for (const auto& b : spec.blocks) {
        w += b.part.c_u * d;  // out_u
        if (b.compensation && b.part.c_u > 0) w += b.part.c_u * b.mixer.mixed_dim();
        if (b.residual == ResidualKind::Separated) w += 2 * b.part.n * b.attn_dim;
    }
    return w;
}

template <std::floating_point S>
inline void pack_user_cache(const ModelSpec& spec, const Tensor<S>& input_u,
                            const std::vector<BlockUserCache<S>>& caches, std::span<S> row) {
    std::size_t off = 0;
    auto put = [&](const Tensor<S>& t, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) row[off++] = t[i];
    };
    const std::size_t d = spec.dim();
    put(input_u, spec.input_u_tokens() * d);
    for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
        const auto& b = spec.blocks[k];
        put(caches[k].out_u, b.part.c_u * d);
        if (b.compensation && b.part.c_u > 0) {
            put(caches[k].masked_u, b.part.c_u * b.mixer.mixed_dim());
        }
        if (b.residual == ResidualKind::Separated) {
            put(caches[k].k_u, b.part.n * b.attn_dim);
            put(caches[k].v_u, b.part.n * b.attn_dim);
        }
    }
}

template <std::floating_point S>
struct UnpackedUserCache {
    Tensor<S> input_u;
    std::vector<BlockUserCache<S>> blocks;
};

template <std::floating_point S>
inline UnpackedUserCache<S> unpack_user_cache(const ModelSpec& spec, std::span<const S> row) {
    UnpackedUserCache<S> u;
    std::size_t off = 0;
    const std::size_t d = spec.dim();
    auto take = [&](std::size_t rows, std::size_t cols) {
        Tensor<S> t({std::max<std::size_t>(rows, 1), std::max<std::size_t>(cols, 1)});
        for (std::size_t i = 0; i < rows * cols; ++i) t[i] = row[off++];
        return t;
    };
    u.input_u = take(spec.input_u_tokens(), d);
    for (const auto& b : spec.blocks) {
        BlockUserCache<S> c;
        c.out_u = take(b.part.c_u, d);
        if (b.compensation && b.part.c_u > 0) {
            c.masked_u = take(b.part.c_u, b.mixer.mixed_dim());
        }
        if (b.residual == ResidualKind::Separated) {
            c.k_u = take(b.part.n, b.attn_dim);
            c.v_u = take(b.part.n, b.attn_dim);
        }
        u.blocks.push_back(std::move(c));
    }
    return u;
}

// --- serving ---------------------------------------------------------------------

/// Full forward per (user, candidate) pair; the reuse-free baseline.
template <class ModelT>
inline std::vector<typename ModelT::scalar_type> serve_naive(
    const ModelT& model, const Request<typename ModelT::scalar_type>& req) {
    using S = typename ModelT::scalar_type;
    const std::size_t n = model.spec.input_u_tokens();
    const std::size_t m = model.spec.input_g_tokens();
    const std::size_t d = model.spec.dim();
    std::vector<S> scores;
    scores.reserve(req.total_candidates());
    for (const auto& user : req.users) {
        for (const auto& cand : user.candidates) {
            Tensor<S> x0 = concat_tokens(user.user_tokens, n, cand, m, d);
            scores.push_back(score_sample(model, x0));
        }
    }
    return scores;
}

/// The cached path: reusable activations computed once per user, repeated
/// per candidate, non-reusable rows recomputed per candidate. With
/// cross_check on, every candidate's user rows are recomputed through the
/// full forward and compared bitwise against the cache.
template <class ModelT>
inline std::vector<typename ModelT::scalar_type> serve_cached(
    const ModelT& model, const Request<typename ModelT::scalar_type>& req,
    bool cross_check = false) {
    using S = typename ModelT::scalar_type;
    if (req.users.empty()) return {};
    const ModelSpec& spec = model.spec;
    const std::size_t d = spec.dim();
    const std::size_t depth = spec.depth();
    const std::vector<std::size_t> sizes = req.candidate_sizes();
    const std::vector<std::size_t> offsets = cumsum_offsets(sizes);
    const std::size_t n_users = req.users.size();
    const std::size_t n_cands = req.total_candidates();

    // Lines 3-4: offsets over the replicated layout, then one row per user.
    Tensor<S> replicated = replicated_user_input(req);
    Tensor<S> unique_u = gather_unique_u(replicated, offsets);

    // Line 5: reusable path once per unique user.
    const std::size_t width = user_cache_width(spec);
    Tensor<S> user_rows({n_users, width});
    const std::size_t n0 = spec.input_u_tokens();
    for (std::size_t i = 0; i < n_users; ++i) {
        Tensor<S> u_in({std::max<std::size_t>(n0, 1), d});
        for (std::size_t e = 0; e < n0 * d; ++e) u_in[e] = unique_u.data()[i * n0 * d + e];
        std::vector<BlockUserCache<S>> caches;
        const Tensor<S>* x_u = &u_in;
        for (std::size_t k = 0; k < depth; ++k) {
            caches.push_back(ugsep_block_user_path<S>(*x_u, spec.blocks[k], model.blocks[k],
                                                      model.masks[k]));
            x_u = &caches.back().out_u;
        }
        pack_user_cache(spec, u_in, caches, user_rows.row(i));
    }

    // Line 6: user outputs replicated back to the candidate layout.
    Tensor<S> output_u = repeat_u_outputs(user_rows, sizes);

    // Non-reusable path per candidate.
    std::vector<S> scores(n_cands);
    std::size_t r = 0;
    for (std::size_t i = 0; i < n_users; ++i) {
        for (const Tensor<S>& cand : req.users[i].candidates) {
            UnpackedUserCache<S> cache = unpack_user_cache<S>(spec, output_u.row(r));
            const Tensor<S>* x_u_in = &cache.input_u;
            Tensor<S> g = cand;
            for (std::size_t k = 0; k < depth; ++k) {
                g = ugsep_block_group_path<S>(*x_u_in, g, spec.blocks[k], model.blocks[k],
                                              model.masks[k], cache.blocks[k]);
                x_u_in = &cache.blocks[k].out_u;
            }
            const auto& last = spec.blocks.back();
            const std::size_t cu = last.part.c_u, cg = last.part.c_g;
            const std::size_t h = cu + cg;
            S z = S(0);
            const Tensor<S>& out_u_last = cache.blocks.back().out_u;
            for (std::size_t j = 0; j < d; ++j) {
                S acc = S(0);
                for (std::size_t row = 0; row < cu; ++row) acc += out_u_last.at(row, j);
                for (std::size_t row = 0; row < cg; ++row) acc += g.at(row, j);
                z += model.readout.w[j] * (acc / static_cast<S>(h));
            }
            z += model.readout.b[0];
            scores[r] = sigmoid(z);

            if (cross_check) {
                Tensor<S> x0 =
                    concat_tokens(req.users[i].user_tokens, spec.input_u_tokens(), cand,
                                  spec.input_g_tokens(), d);
                const Tensor<S>* x = &x0;
                Tensor<S> cur;
                for (std::size_t k = 0; k < depth; ++k) {
                    cur = ugsep_block_forward(*x, spec.blocks[k], model.blocks[k],
                                              model.masks[k]);
                    for (std::size_t row = 0; row < spec.blocks[k].part.c_u; ++row) {
                        if (!bitwise_equal<S>(cur.row(row), cache.blocks[k].out_u.row(row))) {
                            throw IntegrityError(
                                k, "serve_cached: user rows of block " + std::to_string(k) +
                                       " differ from the naive forward (candidate " +
                                       std::to_string(r) + ", row " + std::to_string(row) +
                                       "); separation is broken");
                        }
                    }
                    x = &cur;
                }
            }
            ++r;
        }
    }
    return scores;
}

// --- analytic multiply-add accounting ---------------------------------------------

struct PathCost {
    std::uint64_t ln = 0;
    std::uint64_t ffn = 0;
    std::uint64_t residual = 0;
    std::uint64_t compensation = 0;
    std::uint64_t readout = 0;

    std::uint64_t total() const { return ln + ffn + residual + compensation + readout; }
};

enum class ServeMode { Naive, Cached };

struct FlopsLedger {
    PathCost reusable;      // per forward, computed once per user when cached
    PathCost nonreusable;   // per forward, always per candidate
    std::uint64_t users = 0;       // M
    std::uint64_t candidates = 0;  // N
    ServeMode mode = ServeMode::Naive;

    std::uint64_t f_u() const { return reusable.total(); }
    std::uint64_t f_g() const { return nonreusable.total(); }
    std::uint64_t naive_total() const { return (f_u() + f_g()) * candidates; }
    std::uint64_t cached_total() const { return f_u() * users + f_g() * candidates; }
    std::uint64_t mode_total() const {
        return mode == ServeMode::Naive ? naive_total() : cached_total();
    }
    double cached_over_naive() const {
        return static_cast<double>(cached_total()) / static_cast<double>(naive_total());
    }
};

namespace cost {
inline std::uint64_t linear(std::uint64_t in, std::uint64_t out, bool bias) {
    return in * out + (bias ? out : 0);
}
inline std::uint64_t ffn_row(std::uint64_t in, std::uint64_t hidden, std::uint64_t out) {
    return linear(in, hidden, true) + hidden + linear(hidden, out, true);
}
inline std::uint64_t layer_norm(std::uint64_t len) { return 7 * len + 4; }
inline std::uint64_t softmax(std::uint64_t len) { return 4 * len; }
}  // namespace cost

/// Exact multiply-add counts per path; mixup and masking cost nothing.
inline FlopsLedger flops_count(const ModelSpec& spec, std::size_t users,
                               std::size_t candidates, ServeMode mode) {
    FlopsLedger ledger;
    ledger.users = users;
    ledger.candidates = candidates;
    ledger.mode = mode;
    const std::uint64_t d = spec.dim();
    for (const auto& b : spec.blocks) {
        const std::uint64_t cu = b.part.c_u, cg = b.part.c_g;
        const std::uint64_t n = b.part.n, m = b.part.m;
        const std::uint64_t t = b.mixer.tokens;
        const std::uint64_t mixed = b.mixer.mixed_dim();
        const std::uint64_t hidden = b.mixer.ffn_hidden;

        ledger.reusable.ln += cu * (cost::layer_norm(mixed) + cost::layer_norm(d));
        ledger.nonreusable.ln += cg * (cost::layer_norm(mixed) + cost::layer_norm(d));
        ledger.reusable.ffn += cu * cost::ffn_row(mixed, hidden, d);
        ledger.nonreusable.ffn += cg * cost::ffn_row(mixed, hidden, d);
        if (b.compensation && cu > 0) {
            ledger.nonreusable.compensation +=
                cost::linear(cu * mixed, cg * mixed, true) + cg * mixed;
        }
        if (b.residual == ResidualKind::Plain) {
            ledger.reusable.residual += cu * d;
            ledger.nonreusable.residual += cg * d;
        } else {
            const std::uint64_t da = b.attn_dim;
            ledger.reusable.residual += 2 * n * cost::linear(d, da, false);
            ledger.reusable.residual +=
                cu * (cost::linear(d, da, false) + n * da + cost::softmax(t) + n * da +
                      cost::linear(da, d, false) + d);
            ledger.nonreusable.residual += 2 * m * cost::linear(d, da, false);
            ledger.nonreusable.residual +=
                cg * (cost::linear(d, da, false) + t * da + cost::softmax(t) + t * da +
                      cost::linear(da, d, false) + d);
        }
    }
    const std::uint64_t h_last = spec.blocks.back().mixer.heads;
    ledger.nonreusable.readout += h_last * d + d + d + 2;
    return ledger;
}

// --- benchmark -------------------------------------------------------------------

struct SizeDist {
    enum class Kind { Fixed, Uniform } kind = Kind::Fixed;
    std::size_t fixed = 1;
    std::size_t lo = 1, hi = 1;
};

struct WorkloadSpec {
    std::uint64_t seed = 0;
    std::size_t users = 1;
    SizeDist sizes;
};

template <std::floating_point S>
inline Request<S> make_request(const ModelSpec& spec, const WorkloadSpec& workload) {
    Rng rng(workload.seed);
    Request<S> req;
    const std::size_t n = spec.input_u_tokens(), m = spec.input_g_tokens(), d = spec.dim();
    for (std::size_t i = 0; i < workload.users; ++i) {
        UserRecord<S> user;
        user.user_tokens = Tensor<S>({std::max<std::size_t>(n, 1), d});
        rng.fill_gaussian(user.user_tokens);
        std::size_t count = workload.sizes.kind == SizeDist::Kind::Fixed
                                ? workload.sizes.fixed
                                : workload.sizes.lo +
                                      rng.index(workload.sizes.hi - workload.sizes.lo + 1);
        for (std::size_t c = 0; c < count; ++c) {
            Tensor<S> cand({m, d});
            rng.fill_gaussian(cand);
            user.candidates.push_back(std::move(cand));
        }
        req.users.push_back(std::move(user));
    }
    return req;
}

struct BenchModeStats {
    std::string mode;
    double p50_ms = 0.0;
    double p90_ms = 0.0;
    std::uint64_t flops = 0;
};

struct BenchReport {
    std::vector<BenchModeStats> modes;
    FlopsLedger ledger;
    bool equivalence_pass = false;
    std::size_t users = 0;
    std::size_t candidates = 0;
    bool flops_only = false;
    // Production latency reductions are hardware measurements; this
    // wall-clock is CPU compute at desk scale and is not comparable.
    static constexpr const char* kNote =
        "wall-clock measures desk-scale CPU compute, not production serving latency";
};

namespace detail {
inline double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const std::size_t idx = static_cast<std::size_t>(p * static_cast<double>(v.size() - 1));
    return v[idx];
}
}  // namespace detail

template <std::floating_point S>
inline BenchReport bench(const Model<S>& model, const WorkloadSpec& workload,
                         std::size_t repetitions, bool flops_only = false) {
    if (repetitions < 3) {
        throw std::invalid_argument("bench: at least 3 repetitions required, got " +
                                    std::to_string(repetitions));
    }
    Request<S> req = make_request<S>(model.spec, workload);
    const std::size_t n_users = req.users.size();
    const std::size_t n_cands = req.total_candidates();

    BenchReport report;
    report.users = n_users;
    report.candidates = n_cands;
    report.flops_only = flops_only;
    report.ledger = flops_count(model.spec, n_users, n_cands, ServeMode::Cached);

    const std::uint64_t naive_flops = report.ledger.naive_total();
    const std::uint64_t cached_flops = report.ledger.cached_total();
    if (flops_only) {
        report.modes = {{"naive", 0.0, 0.0, naive_flops},
                        {"cached", 0.0, 0.0, cached_flops},
                        {"cached_w8a16", 0.0, 0.0, cached_flops}};
        report.equivalence_pass = true;
        return report;
    }

    QuantizedModel<S> qmodel = quantize_model(model);
    std::vector<S> ref = serve_naive(model, req);
    std::vector<S> cached = serve_cached(model, req);
    report.equivalence_pass =
        bitwise_equal<S>(std::span<const S>(ref), std::span<const S>(cached));

    auto time_mode = [&](auto&& fn) {
        std::vector<double> ms;
        ms.reserve(repetitions);
        for (std::size_t rep = 0; rep < repetitions; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            fn();
            const auto t1 = std::chrono::steady_clock::now();
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        return ms;
    };
    std::vector<double> t_naive = time_mode([&] { (void)serve_naive(model, req); });
    std::vector<double> t_cached = time_mode([&] { (void)serve_cached(model, req); });
    std::vector<double> t_q = time_mode([&] { (void)serve_cached(qmodel, req); });
    report.modes = {
        {"naive", detail::percentile(t_naive, 0.5), detail::percentile(t_naive, 0.9),
         naive_flops},
        {"cached", detail::percentile(t_cached, 0.5), detail::percentile(t_cached, 0.9),
         cached_flops},
        // Weight-only quantization changes bytes moved, not arithmetic.
        {"cached_w8a16", detail::percentile(t_q, 0.5), detail::percentile(t_q, 0.9),
         cached_flops},
    };
    return report;
}

}  // namespace ugsep
