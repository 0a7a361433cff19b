#include "ugsep/mixer.hpp"

#include <gtest/gtest.h>

#include <algorithm>

#include "ugsep/gradcheck.hpp"

using namespace ugsep;

namespace {

TEST(SplitHeads, ContiguousSlices) {
    MixerConfig cfg(1, 4, 2, 1);
    TensorD x({1, 4}, {10, 11, 12, 13});
    TensorD out = split_heads(x, cfg);
    ASSERT_EQ(out.shape(), (std::vector<std::size_t>{1, 2, 2}));
    EXPECT_EQ(out[0], 10.0);
    EXPECT_EQ(out[1], 11.0);
    EXPECT_EQ(out[2], 12.0);
    EXPECT_EQ(out[3], 13.0);
}

TEST(SplitHeads, SingleHeadIsIdentityWithUnitAxis) {
    MixerConfig cfg(3, 4, 1, 1);
    Rng rng(2);
    TensorD x({3, 4});
    rng.fill_gaussian(x);
    TensorD out = split_heads(x, cfg);
    ASSERT_EQ(out.shape(), (std::vector<std::size_t>{3, 1, 4}));
    EXPECT_TRUE(bitwise_equal<double>(out.flat(), x.flat()));
}

TEST(SplitHeads, IndexArithmetic) {
    MixerConfig cfg(3, 6, 3, 1);
    Rng rng(3);
    TensorD x({3, 6});
    rng.fill_gaussian(x);
    TensorD out = split_heads(x, cfg);
    // entry (t=2, h=1, :) == X[2][2:4]
    for (std::size_t d = 0; d < 2; ++d) {
        EXPECT_EQ(out[(2 * 3 + 1) * 2 + d], x.at(2, 2 + d));
    }
}

TEST(Mixup, ExplicitLayout) {
    MixerConfig cfg(2, 4, 2, 1);
    TensorD x({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});  // rows [a,b,c,d],[e,f,g,h]
    TensorD m = mixup(x, cfg);
    TensorD expected({2, 4}, {1, 2, 5, 6, 3, 4, 7, 8});
    EXPECT_TRUE(bitwise_equal(m, expected));
}

TEST(Mixup, SingleTokenReshapes) {
    MixerConfig cfg(1, 6, 3, 1);
    TensorD x({1, 6}, {1, 2, 3, 4, 5, 6});
    TensorD m = mixup(x, cfg);
    ASSERT_EQ(m.rows(), 3u);
    ASSERT_EQ(m.cols(), 2u);
    EXPECT_TRUE(bitwise_equal<double>(m.flat(), x.flat()));
}

TEST(Mixup, InversePermutation) {
    MixerConfig cfg(4, 8, 4, 1);
    Rng rng(11);
    TensorD x({4, 8});
    rng.fill_gaussian(x);
    TensorD y = mixup(x, cfg);
    EXPECT_TRUE(bitwise_equal(mixup_inverse(y, cfg), x));
    EXPECT_TRUE(bitwise_equal(mixup(mixup_inverse(y, cfg), cfg), y));
}

TEST(Mixup, PreservesEntryMultiset) {
    MixerConfig cfg(6, 12, 4, 1);
    Rng rng(13);
    TensorD x({6, 12});
    rng.fill_gaussian(x);
    TensorD y = mixup(x, cfg);
    std::vector<double> a(x.flat().begin(), x.flat().end());
    std::vector<double> b(y.flat().begin(), y.flat().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
}

TEST(MixerConfig, HeadsMustDivideDim) {
    EXPECT_THROW(MixerConfig(4, 10, 3, 8), std::invalid_argument);
}

TEST(Pffn, ZeroWeightsYieldBias) {
    MixerConfig cfg(2, 4, 2, 3);
    MixerBlockParams<double> p;
    for (std::size_t h = 0; h < 2; ++h) {
        auto w = FfnWeights<double>::zeros(cfg.mixed_dim(), 3, 4);
        for (std::size_t j = 0; j < 4; ++j) w.b2[j] = 7.5;
        p.ffn.push_back(std::move(w));
    }
    TensorD rows({2, cfg.mixed_dim()});
    Rng rng(4);
    rng.fill_gaussian(rows);
    TensorD out = pffn(rows, p, cfg);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], 7.5);
}

TEST(Pffn, SingleRowEqualsTwoLayerMlp) {
    MixerConfig cfg(1, 4, 1, 5);
    Rng rng(6);
    MixerBlockParams<double> p;
    p.ffn.push_back(FfnWeights<double>::init(cfg.mixed_dim(), 5, 4, rng));
    TensorD row({1, cfg.mixed_dim()});
    rng.fill_gaussian(row);
    TensorD out = pffn(row, p, cfg);

    TensorD z({5});
    linear_row<double>(row.row(0), p.ffn[0].w1, p.ffn[0].b1.flat(), z.flat());
    for (std::size_t i = 0; i < 5; ++i) z[i] = gelu(z[i]);
    TensorD expect({4});
    linear_row<double>(z.flat(), p.ffn[0].w2, p.ffn[0].b2.flat(), expect.flat());
    EXPECT_TRUE(bitwise_equal<double>(out.row(0), expect.flat()));
}

TEST(Pffn, RowsUseTheirOwnWeights) {
    MixerConfig cfg(2, 4, 2, 3);
    Rng rng(8);
    MixerBlockParams<double> p;
    p.ffn.push_back(FfnWeights<double>::init(cfg.mixed_dim(), 3, 4, rng));
    p.ffn.push_back(FfnWeights<double>::init(cfg.mixed_dim(), 3, 4, rng));
    TensorD rows({2, cfg.mixed_dim()});
    rng.fill_gaussian(rows);
    TensorD out = pffn(rows, p, cfg);

    // Swap-in token 1's weights for row 0: output must differ.
    MixerBlockParams<double> swapped;
    swapped.ffn.push_back(p.ffn[1]);
    swapped.ffn.push_back(p.ffn[1]);
    TensorD out2 = pffn(rows, swapped, cfg);
    EXPECT_FALSE(bitwise_equal<double>(out.row(0), out2.row(0)));
    EXPECT_TRUE(bitwise_equal<double>(out.row(1), out2.row(1)));
}

TEST(Pffn, PerTokenLocality) {
    MixerConfig cfg(3, 6, 3, 4);
    Rng rng(14);
    MixerBlockParams<double> p;
    for (int h = 0; h < 3; ++h) {
        p.ffn.push_back(FfnWeights<double>::init(cfg.mixed_dim(), 4, 6, rng));
    }
    TensorD rows({3, cfg.mixed_dim()});
    rng.fill_gaussian(rows);
    TensorD before = pffn(rows, p, cfg);
    p.ffn[1].w1.at(0, 0) += 0.125;
    p.ffn[1].w2.at(2, 3) -= 0.5;
    TensorD after = pffn(rows, p, cfg);
    EXPECT_TRUE(bitwise_equal<double>(before.row(0), after.row(0)));
    EXPECT_FALSE(bitwise_equal<double>(before.row(1), after.row(1)));
    EXPECT_TRUE(bitwise_equal<double>(before.row(2), after.row(2)));
}

TEST(MixerBlock, ZeroFfnIsResidualPassthrough) {
    MixerConfig cfg(3, 6, 3, 4);
    Rng rng(15);
    MixerBlockParams<double> p = MixerBlockParams<double>::init(cfg, rng);
    for (auto& f : p.ffn) {
        f.w1 = TensorD({cfg.mixed_dim(), 4});
        f.w2 = TensorD({4, 6});
        f.b1 = TensorD({4});
        f.b2 = TensorD({6});
    }
    TensorD x({3, 6});
    rng.fill_gaussian(x);
    TensorD out = mixer_block_forward(x, p, cfg);
    // FFN contributes nothing; output is the post-residual LN of X itself.
    TensorD expected({3, 6});
    for (std::size_t r = 0; r < 3; ++r) {
        layer_norm_span<double>(x.row(r), p.ln_out.gamma.flat(), p.ln_out.beta.flat(),
                                cfg.ln_eps, expected.row(r), nullptr);
    }
    EXPECT_TRUE(bitwise_equal(out, expected));
}

TEST(MixerBlock, ShapeContractAndComposition) {
    MixerConfig cfg(4, 8, 4, 6);
    Rng rng(16);
    MixerBlockParams<double> p1 = MixerBlockParams<double>::init(cfg, rng);
    MixerBlockParams<double> p2 = MixerBlockParams<double>::init(cfg, rng);
    MixerBlockParams<double> p3 = MixerBlockParams<double>::init(cfg, rng);
    TensorD x({4, 8});
    rng.fill_gaussian(x);
    TensorD y = mixer_block_forward(x, p1, cfg);
    EXPECT_EQ(y.shape(), x.shape());
    y = mixer_block_forward(y, p2, cfg);
    y = mixer_block_forward(y, p3, cfg);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_TRUE(all_finite(y));
}

TEST(MixerBlock, RejectsHeadsNotEqualTokens) {
    MixerConfig cfg(4, 8, 2, 6);
    Rng rng(17);
    MixerBlockParams<double> p = MixerBlockParams<double>::init(cfg, rng);
    TensorD x({4, 8});
    EXPECT_THROW(mixer_block_forward(x, p, cfg), std::invalid_argument);
}

// Fully hand-written forward; no library calls beyond <cmath>.
TensorD straight_line_oracle(const TensorD& x, const MixerBlockParams<double>& p,
                             const MixerConfig& cfg) {
    const std::size_t T = cfg.tokens, D = cfg.dim, H = cfg.heads, DP = D / H;
    const std::size_t MD = T * DP, HID = cfg.ffn_hidden;
    const double eps = cfg.ln_eps;
    auto ln = [&](const std::vector<double>& v, const TensorD& gamma, const TensorD& beta) {
        const std::size_t n = v.size();
        double mean = 0.0;
        for (double e : v) mean += e;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double e : v) var += (e - mean) * (e - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = gamma[i] * ((v[i] - mean) * inv) + beta[i];
        return out;
    };
    auto act = [](double v) {
        const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
        return 0.5 * v * (1.0 + std::tanh(u));
    };
    TensorD out({T, D});
    for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> mixed(MD);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t d = 0; d < DP; ++d) mixed[t * DP + d] = x.at(t, h * DP + d);
        }
        std::vector<double> normed = ln(mixed, p.ln_mix.gamma, p.ln_mix.beta);
        std::vector<double> z(HID, 0.0);
        for (std::size_t i = 0; i < MD; ++i) {
            for (std::size_t j = 0; j < HID; ++j) z[j] += normed[i] * p.ffn[h].w1.at(i, j);
        }
        for (std::size_t j = 0; j < HID; ++j) z[j] += p.ffn[h].b1[j];
        std::vector<double> a(HID);
        for (std::size_t j = 0; j < HID; ++j) a[j] = act(z[j]);
        std::vector<double> f(D, 0.0);
        for (std::size_t i = 0; i < HID; ++i) {
            for (std::size_t j = 0; j < D; ++j) f[j] += a[i] * p.ffn[h].w2.at(i, j);
        }
        for (std::size_t j = 0; j < D; ++j) f[j] += p.ffn[h].b2[j];
        std::vector<double> resid(D);
        for (std::size_t j = 0; j < D; ++j) resid[j] = f[j] + x.at(h, j);
        std::vector<double> y = ln(resid, p.ln_out.gamma, p.ln_out.beta);
        for (std::size_t j = 0; j < D; ++j) out.at(h, j) = y[j];
    }
    return out;
}

TEST(MixerBlock, MatchesStraightLineOracleBitwise) {
    MixerConfig cfg(4, 8, 4, 16);
    Rng rng(7);
    MixerBlockParams<double> p = MixerBlockParams<double>::init(cfg, rng);
    // Exercise non-default norm parameters too.
    rng.fill_uniform(p.ln_mix.gamma, 0.5, 1.5);
    rng.fill_uniform(p.ln_mix.beta, -0.2, 0.2);
    rng.fill_uniform(p.ln_out.gamma, 0.5, 1.5);
    rng.fill_uniform(p.ln_out.beta, -0.2, 0.2);
    TensorD x({4, 8});
    rng.fill_gaussian(x);
    EXPECT_TRUE(bitwise_equal(mixer_block_forward(x, p, cfg), straight_line_oracle(x, p, cfg)));
}

TEST(MixerBlock, GradientCheck) {
    MixerConfig cfg(4, 8, 4, 6);
    Rng rng(19);
    MixerBlockParams<double> params = MixerBlockParams<double>::init(cfg, rng);
    TensorD x({4, 8});
    rng.fill_gaussian(x);
    TensorD weights({4, 8});
    rng.fill_gaussian(weights);

    std::vector<std::pair<std::string, TensorD*>> named;
    collect_params(params, "blk", named);
    std::vector<TensorD> flat;
    for (auto& [n, t] : named) flat.push_back(*t);
    flat.push_back(x);

    auto f = [&](const std::vector<TensorD>& p) {
        MixerBlockParams<double> local = params;
        std::vector<std::pair<std::string, TensorD*>> ln;
        collect_params(local, "blk", ln);
        for (std::size_t i = 0; i < ln.size(); ++i) *ln[i].second = p[i];
        TensorD y = mixer_block_forward(p.back(), local, cfg);
        double s = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += weights[i] * y[i];
        return s;
    };

    MixerBlockForward<double> fwd(x, params, cfg);
    MixerBlockGrads<double> g = fwd.backward(weights);
    std::vector<std::pair<std::string, TensorD*>> gn;
    collect_params(g.params, "blk", gn);
    std::vector<TensorD> analytic;
    for (auto& [n, t] : gn) analytic.push_back(*t);
    analytic.push_back(g.input);

    GradCheckReport rep = check_gradient(f, flat, analytic, 1e-5, 1e-5);
    EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}

}  // namespace
