#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "ugsep/model.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// Synthetic CTR data. Labels come from a hidden teacher with a genuine
// bilinear U x G interaction, so masking user rows can actually cost
// accuracy and compensation has something to recover.
// ---------------------------------------------------------------------------

struct TeacherConfig {
    double temperature = 0.25;  // higher = noisier labels
    double target_base_rate = 0.25;
    // Support of the bilinear interaction, chosen so the mixer family can
    // learn it at desk scale and the masking ablations have something real
    // to measure. Group rows of a masked model only ever feed the trailing
    // head slices of the G tokens into an FFN, so the whole G side lives in
    // the trailing `g_band` coordinates. Two parts:
    //   aligned: same-`align_width`-slice cells inside the band; formable
    //     within a single mixed row, so every variant learns them fast,
    //     and a skewed split loses the band's lower half outright.
    //   cross:   u in the band's lower half times g in its upper half;
    //     those coordinates sit in the masked user rows of a skewed split,
    //     which is exactly the information compensation reinjects.
    //   low aligned: same-slice cells below the band at a small weight —
    //     signal only an unmasked model can touch, so masking trades real
    //     information against its denoising effect instead of getting the
    //     denoising for free.
    // g_band = 0 disables the structure (dense interaction).
    std::size_t g_band = 16;
    std::size_t align_width = 4;
    double align_gain = 3.0;
    double cross_gain = 3.0;
    double low_align_gain = 1.5;
};

struct DataConfig {
    std::uint64_t seed = 1;
    std::size_t num_users = 4096;
    std::size_t cands_per_user = 8;
    std::size_t u_tokens = 4;  // n
    std::size_t g_tokens = 4;  // m
    std::size_t dim = 32;
    TeacherConfig teacher;

    std::size_t examples() const { return num_users * cands_per_user; }
};

struct SyntheticDataset {
    DataConfig cfg;
    std::vector<TensorD> user_tokens;   // per user, n x D
    std::vector<TensorD> cand_tokens;   // per example, m x D
    std::vector<int> labels;            // per example
    std::vector<double> teacher_score;  // per example, the teacher's own probability
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;

    std::size_t user_of(std::size_t example) const { return example / cfg.cands_per_user; }
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline TensorD mean_pool(const TensorD& tokens) {
    TensorD out({tokens.cols()});
    for (std::size_t j = 0; j < tokens.cols(); ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < tokens.rows(); ++r) acc += tokens.at(r, j);
        out[j] = acc / static_cast<double>(tokens.rows());
    }
    return out;
}
}  // namespace detail

inline SyntheticDataset generate(const DataConfig& cfg) {
    if (cfg.num_users < 1 || cfg.cands_per_user < 1 || cfg.dim < 1 || cfg.g_tokens < 1) {
        throw std::invalid_argument("generate: degenerate shape config");
    }
    SyntheticDataset ds;
    ds.cfg = cfg;
    Rng rng(cfg.seed);

    TensorD interaction({cfg.dim, cfg.dim});
    rng.fill_gaussian(interaction);
    if (cfg.teacher.g_band > 0 && cfg.teacher.g_band < cfg.dim) {
        const std::size_t cut = cfg.dim - cfg.teacher.g_band;
        const std::size_t mid = cut + cfg.teacher.g_band / 2;
        const std::size_t w = cfg.teacher.align_width;
        for (std::size_t i = 0; i < cfg.dim; ++i) {
            for (std::size_t j = 0; j < cfg.dim; ++j) {
                const bool same_slice = w > 0 && i / w == j / w;
                const bool cross = i >= cut && i < mid && j >= mid;
                if (same_slice && j >= cut) {
                    interaction.at(i, j) *= cfg.teacher.align_gain;
                } else if (same_slice) {
                    interaction.at(i, j) *= cfg.teacher.low_align_gain;
                } else if (cross) {
                    interaction.at(i, j) *= cfg.teacher.cross_gain;
                } else {
                    interaction.at(i, j) = 0.0;
                }
            }
        }
    }

    ds.user_tokens.reserve(cfg.num_users);
    for (std::size_t u = 0; u < cfg.num_users; ++u) {
        TensorD t({std::max<std::size_t>(cfg.u_tokens, 1), cfg.dim});
        rng.fill_gaussian(t);
        ds.user_tokens.push_back(std::move(t));
    }
    const std::size_t n_examples = cfg.examples();
    ds.cand_tokens.reserve(n_examples);
    std::vector<double> raw(n_examples);
    for (std::size_t e = 0; e < n_examples; ++e) {
        TensorD g({cfg.g_tokens, cfg.dim});
        rng.fill_gaussian(g);
        TensorD pu = detail::mean_pool(ds.user_tokens[e / cfg.cands_per_user]);
        TensorD pg = detail::mean_pool(g);
        double z = 0.0;
        for (std::size_t i = 0; i < cfg.dim; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < cfg.dim; ++j) acc += interaction.at(i, j) * pg[j];
            z += pu[i] * acc;
        }
        raw[e] = z / static_cast<double>(cfg.dim);
        ds.cand_tokens.push_back(std::move(g));
    }

    // Standardize the teacher logit, then calibrate the bias so the mean
    // probability hits the target base rate.
    double mean = 0.0;
    for (double z : raw) mean += z;
    mean /= static_cast<double>(n_examples);
    double var = 0.0;
    for (double z : raw) var += (z - mean) * (z - mean);
    var /= static_cast<double>(n_examples);
    const double sd = std::sqrt(var);
    if (!(sd > 0.0)) {
        throw std::runtime_error("generate: teacher logits are constant; recalibrate the bias");
    }
    const double inv_temp = 1.0 / cfg.teacher.temperature;
    auto mean_prob = [&](double bias) {
        double acc = 0.0;
        for (double z : raw) acc += sigmoid(((z - mean) / sd) * inv_temp + bias);
        return acc / static_cast<double>(n_examples);
    };
    double lo = -20.0, hi = 20.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mean_prob(mid) < cfg.teacher.target_base_rate) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    const double bias = 0.5 * (lo + hi);

    Rng label_rng(detail::splitmix64(cfg.seed ^ 0xA5A5A5A5A5A5A5A5ull));
    ds.labels.resize(n_examples);
    ds.teacher_score.resize(n_examples);
    std::size_t positives = 0;
    for (std::size_t e = 0; e < n_examples; ++e) {
        const double p = sigmoid(((raw[e] - mean) / sd) * inv_temp + bias);
        ds.teacher_score[e] = p;
        ds.labels[e] = label_rng.next_unit() < p ? 1 : 0;
        positives += static_cast<std::size_t>(ds.labels[e]);
    }
    if (positives == 0 || positives == n_examples) {
        throw std::runtime_error("generate: all labels identical; recalibrate the teacher bias");
    }

    // 80/20 split by example-index hash.
    for (std::size_t e = 0; e < n_examples; ++e) {
        if (detail::splitmix64(static_cast<std::uint64_t>(e) ^ cfg.seed) % 5 == 0) {
            ds.test_idx.push_back(e);
        } else {
            ds.train_idx.push_back(e);
        }
    }
    return ds;
}

// --- AUC -----------------------------------------------------------------------

/// Exact pair-counting AUC, ties at half weight. Integer accounting keeps
/// it exact up to 2^63 pairs.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw std::invalid_argument("auc: scores and labels must be non-empty and equal length");
    }
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return a < b;
    });
    std::uint64_t pos_total = 0, neg_total = 0;
    for (int l : labels) (l ? pos_total : neg_total) += 1;
    if (pos_total == 0 || neg_total == 0) {
        throw std::invalid_argument("auc: need at least one positive and one negative label");
    }
    std::uint64_t wins2 = 0;  // 2 * (pos above neg) + 1 * ties
    std::uint64_t neg_below = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        std::uint64_t pos_here = 0, neg_here = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? pos_here : neg_here) += 1;
            ++j;
        }
        wins2 += 2 * pos_here * neg_below + pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    return static_cast<double>(wins2) / (2.0 * static_cast<double>(pos_total) *
                                         static_cast<double>(neg_total));
}

// --- training --------------------------------------------------------------------

struct TrainConfig {
    double lr = 0.2;
    double momentum = 0.9;
    std::size_t batch = 128;
    std::size_t steps = 2500;
    std::uint64_t seed = 7;
    std::size_t log_every = 50;
};

struct TrainResult {
    std::vector<double> loss_trace;
    double test_auc = 0.0;
};

template <std::floating_point S>
inline TensorD example_input(const SyntheticDataset& ds, std::size_t e) {
    return concat_tokens(ds.user_tokens[ds.user_of(e)], ds.cfg.u_tokens, ds.cand_tokens[e],
                         ds.cfg.g_tokens, ds.cfg.dim);
}

inline double eval_auc(const Model<double>& model, const SyntheticDataset& ds,
                       const std::vector<std::size_t>& idx) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(idx.size());
    for (std::size_t e : idx) {
        scores.push_back(score_sample(model, example_input<double>(ds, e)));
        labels.push_back(ds.labels[e]);
    }
    return auc(scores, labels);
}

inline double eval_auc(const QuantizedModel<double>& model, const SyntheticDataset& ds,
                       const std::vector<std::size_t>& idx) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(idx.size());
    for (std::size_t e : idx) {
        scores.push_back(score_sample(model, example_input<double>(ds, e)));
        labels.push_back(ds.labels[e]);
    }
    return auc(scores, labels);
}

/// Minibatch logistic regression on the readout score, momentum SGD.
/// Fully determined by (model init, dataset, config).
inline TrainResult train(Model<double>& model, const SyntheticDataset& ds,
                         const TrainConfig& cfg) {
    const std::size_t model_n = model.spec.input_u_tokens();
    const std::size_t total = ds.cfg.u_tokens + ds.cfg.g_tokens;
    // A baseline model (n = 0) consumes the same rows as all-G tokens.
    if ((model_n != 0 && model_n != ds.cfg.u_tokens) ||
        model_n + model.spec.input_g_tokens() != total) {
        throw std::invalid_argument("train: dataset token split (" +
                                    std::to_string(ds.cfg.u_tokens) + "+" +
                                    std::to_string(ds.cfg.g_tokens) +
                                    ") does not match the model partition (" +
                                    std::to_string(model_n) + "+" +
                                    std::to_string(model.spec.input_g_tokens()) + ")");
    }
    TrainResult result;
    Rng rng(cfg.seed);
    Model<double> velocity = Model<double>::zeros_like(model);
    auto named_params = collect_params(model);
    auto named_velocity = collect_params(velocity);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Model<double> grads = Model<double>::zeros_like(model);
        double loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const std::size_t e = ds.train_idx[rng.index(ds.train_idx.size())];
            ModelForward<double> fwd(model, example_input<double>(ds, e));
            const double s = fwd.score();
            const double y = static_cast<double>(ds.labels[e]);
            const double eps = 1e-12;
            loss += -(y * std::log(s + eps) + (1.0 - y) * std::log(1.0 - s + eps));
            fwd.backward_from_dz((s - y) / static_cast<double>(cfg.batch), grads);
        }
        loss /= static_cast<double>(cfg.batch);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train: loss diverged (non-finite) at step " +
                                     std::to_string(step));
        }
        if (step % cfg.log_every == 0) result.loss_trace.push_back(loss);

        auto named_grads = collect_params(grads);
        for (std::size_t p = 0; p < named_params.size(); ++p) {
            Tensor<double>& param = *named_params[p].second;
            Tensor<double>& vel = *named_velocity[p].second;
            Tensor<double>& grad = *named_grads[p].second;
            for (std::size_t i = 0; i < param.numel(); ++i) {
                vel[i] = cfg.momentum * vel[i] + grad[i];
                param[i] -= cfg.lr * vel[i];
            }
        }
    }
    result.test_auc = eval_auc(model, ds, ds.test_idx);
    return result;
}

// --- ablation runners ---------------------------------------------------------------

struct AblationModelShape {
    std::size_t tokens = 8;
    std::size_t dim = 32;
    std::size_t heads = 8;
    std::size_t ffn_hidden = 32;
    std::size_t depth = 2;
    std::size_t attn_dim = 16;
    Activation act = Activation::Gelu;
};

/// Plain-residual variant on a ratio-matched token split; the baseline
/// treats every token as group-side and uses the identical stack shape.
inline ModelSpec variant_spec(const AblationModelShape& shape, std::size_t c_u, std::size_t c_g,
                              bool compensation) {
    if (c_u + c_g != shape.heads || shape.tokens != shape.heads) {
        throw std::invalid_argument(
            "variant_spec: plain ratio variants need c_u + c_g == heads == tokens");
    }
    const std::size_t n = c_u, m = c_g;
    if (c_u == 0) {
        return make_stack(shape.tokens, shape.dim, shape.heads, shape.ffn_hidden, shape.depth, 0,
                          shape.tokens, 0, shape.heads, false, shape.act, shape.attn_dim);
    }
    return make_stack(shape.tokens, shape.dim, shape.heads, shape.ffn_hidden, shape.depth, n, m,
                      c_u, c_g, compensation, shape.act, shape.attn_dim);
}

/// The ratio sweep re-splits the same total token budget, so each ratio
/// trains on a sibling dataset: identical generator config and seed, with
/// the user/group token counts moved to match the split.
inline SyntheticDataset ratio_dataset(const SyntheticDataset& ds, std::size_t c_u,
                                      std::size_t c_g) {
    if (ds.cfg.u_tokens == c_u && ds.cfg.g_tokens == c_g) return ds;
    DataConfig cfg = ds.cfg;
    cfg.u_tokens = c_u;
    cfg.g_tokens = c_g;
    return generate(cfg);
}

struct AblationRow {
    std::string name;
    std::size_t c_u = 0;
    std::size_t c_g = 0;
    bool compensation = false;
    std::vector<double> aucs;  // one per training seed
    double median_auc = 0.0;
    // Median over seeds of (variant - matched baseline), paired by seed.
    double median_delta = 0.0;
    double matched_baseline_auc = 0.0;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<std::uint64_t> seeds;
};

namespace detail {
inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Independent jobs, bounded workers; slot-indexed results keep the output
// independent of scheduling.
inline void run_jobs(std::vector<std::function<void()>>& jobs, std::size_t threads);
}  // namespace detail

inline double train_variant_auc(const AblationModelShape& shape, const SyntheticDataset& ds,
                                std::size_t c_u, std::size_t c_g, bool compensation,
                                const TrainConfig& base_cfg, std::uint64_t seed) {
    ModelSpec spec = variant_spec(shape, c_u, c_g, compensation);
    Model<double> model = Model<double>::init(spec, seed);
    TrainConfig cfg = base_cfg;
    cfg.seed = detail::splitmix64(seed ^ 0x5EED5EED5EED5EEDull);
    return train(model, ds, cfg).test_auc;
}

struct AblationArm {
    std::string name;
    const SyntheticDataset* data = nullptr;
    std::size_t c_u = 0, c_g = 0;
    bool compensation = false;
    std::size_t matched_baseline = 0;  // arm index its deltas pair against
    bool emit = true;                  // matched baselines train but stay off the table
    std::vector<double> aucs;
};

inline AblationTable run_ablation_arms(std::vector<AblationArm>& arms,
                                       const AblationModelShape& shape, const TrainConfig& cfg,
                                       const std::vector<std::uint64_t>& seeds,
                                       std::size_t threads) {
    std::vector<std::function<void()>> jobs;
    for (auto& arm : arms) {
        arm.aucs.assign(seeds.size(), 0.0);
        for (std::size_t si = 0; si < seeds.size(); ++si) {
            AblationArm* a = &arm;
            std::uint64_t seed = seeds[si];
            jobs.push_back([a, si, seed, &shape, &cfg] {
                a->aucs[si] =
                    train_variant_auc(shape, *a->data, a->c_u, a->c_g, a->compensation, cfg,
                                      seed);
            });
        }
    }
    detail::run_jobs(jobs, threads);

    AblationTable table;
    table.seeds = seeds;
    for (const auto& arm : arms) {
        if (!arm.emit) continue;
        AblationRow row;
        row.name = arm.name;
        row.c_u = arm.c_u;
        row.c_g = arm.c_g;
        row.compensation = arm.compensation;
        row.aucs = arm.aucs;
        row.median_auc = detail::median(arm.aucs);
        std::vector<double> deltas;
        for (std::size_t si = 0; si < seeds.size(); ++si) {
            deltas.push_back(arm.aucs[si] - arms[arm.matched_baseline].aucs[si]);
        }
        row.median_delta = detail::median(deltas);
        row.matched_baseline_auc = detail::median(arms[arm.matched_baseline].aucs);
        table.rows.push_back(std::move(row));
    }
    return table;
}

/// Ratio sweep, compensation off, each ratio paired with a baseline trained
/// on its own token split.
inline AblationTable ablate_ratios(const SyntheticDataset& ds, const AblationModelShape& shape,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& ratios,
                                   const TrainConfig& cfg,
                                   const std::vector<std::uint64_t>& seeds,
                                   std::size_t threads = 2) {
    std::vector<SyntheticDataset> derived;
    derived.reserve(ratios.size());
    std::vector<AblationArm> arms;
    arms.push_back({"baseline", &ds, 0, shape.heads, false, 0, true, {}});
    for (const auto& [cu, cg] : ratios) {
        derived.push_back(ratio_dataset(ds, cu, cg));
    }
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const auto& [cu, cg] = ratios[i];
        std::size_t base_idx = 0;
        if (derived[i].cfg.u_tokens != ds.cfg.u_tokens ||
            derived[i].cfg.g_tokens != ds.cfg.g_tokens) {
            base_idx = arms.size();
            arms.push_back({"baseline(" + std::to_string(cu) + ":" + std::to_string(cg) + ")",
                            &derived[i], 0, shape.heads, false, base_idx, false, {}});
        }
        arms.push_back({std::to_string(cu) + ":" + std::to_string(cg), &derived[i], cu, cg,
                        false, base_idx, true, {}});
    }
    return run_ablation_arms(arms, shape, cfg, seeds, threads);
}

/// Compensation on/off pairs at skewed ratios. Single-block models by
/// default (shape.depth = 1 recommended): with one block, the projection is
/// the only route from masked user content to the group rows, so the study
/// isolates the mechanism.
inline AblationTable ablate_compensation(
    const SyntheticDataset& ds, const AblationModelShape& shape,
    const std::vector<std::pair<std::size_t, std::size_t>>& ratios, const TrainConfig& cfg,
    const std::vector<std::uint64_t>& seeds, std::size_t threads = 2) {
    std::vector<SyntheticDataset> derived;
    derived.reserve(ratios.size());
    for (const auto& [cu, cg] : ratios) derived.push_back(ratio_dataset(ds, cu, cg));
    std::vector<AblationArm> arms;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const auto& [cu, cg] = ratios[i];
        const std::string tag = std::to_string(cu) + ":" + std::to_string(cg);
        const std::size_t base_idx = arms.size();
        arms.push_back({"baseline(" + tag + ")", &derived[i], 0, shape.heads, false, base_idx,
                        false, {}});
        arms.push_back({tag, &derived[i], cu, cg, false, base_idx, true, {}});
        arms.push_back({tag + " +comp", &derived[i], cu, cg, true, base_idx, true, {}});
    }
    return run_ablation_arms(arms, shape, cfg, seeds, threads);
}

namespace detail {
inline void run_jobs(std::vector<std::function<void()>>& jobs, std::size_t threads) {
    if (threads <= 1 || jobs.size() <= 1) {
        for (auto& j : jobs) j();
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            jobs[i]();
        }
    };
    std::vector<std::thread> pool;
    const std::size_t count = std::min(threads, jobs.size());
    pool.reserve(count - 1);
    for (std::size_t t = 0; t + 1 < count; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
}
}  // namespace detail

}  // namespace ugsep
