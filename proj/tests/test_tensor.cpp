#include "ugsep/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "ugsep/gradcheck.hpp"

using namespace ugsep;

namespace {

// Independent triple-loop reference, same ascending-t accumulation.
TensorD matmul_oracle(const TensorD& a, const TensorD& b) {
    TensorD c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < a.cols(); ++t) {
                acc += a.at(i, t) * b.at(t, j);
            }
            c.at(i, j) = acc;
        }
    }
    return c;
}

TEST(Matmul, IdentityCase) {
    TensorD eye({2, 2}, {1, 0, 0, 1});
    TensorD b({2, 2}, {5, 6, 7, 8});
    EXPECT_TRUE(bitwise_equal(matmul(eye, b), b));
}

TEST(Matmul, DotProduct) {
    TensorD a({1, 2}, {1, 2});
    TensorD b({2, 1}, {3, 4});
    TensorD c = matmul(a, b);
    EXPECT_EQ(c.numel(), 1u);
    EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, MatchesTripleLoopOracleExactly) {
    Rng rng(123);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t r = 1 + rng.index(16), k = 1 + rng.index(16), c = 1 + rng.index(16);
        TensorD a({r, k});
        TensorD b({k, c});
        rng.fill_gaussian(a);
        rng.fill_gaussian(b);
        EXPECT_TRUE(bitwise_equal(matmul(a, b), matmul_oracle(a, b)));
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    TensorD a({2, 3});
    TensorD b({4, 2});
    try {
        matmul(a, b);
        FAIL() << "expected shape error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x2]"), std::string::npos);
    }
}

TEST(Matmul, Deterministic) {
    Rng rng(9);
    TensorD a({7, 5});
    TensorD b({5, 3});
    rng.fill_gaussian(a);
    rng.fill_gaussian(b);
    EXPECT_TRUE(bitwise_equal(matmul(a, b), matmul(a, b)));
}

TEST(LayerNorm, ZeroVariance) {
    TensorD x({3}, {1, 1, 1});
    TensorD gamma({3}, {1, 1, 1});
    TensorD beta({3});
    TensorD y = layer_norm<double>(x, gamma, beta, 1e-5);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(LayerNorm, Symmetry) {
    const double a = 2.5;
    TensorD x({2}, {-a, a});
    TensorD gamma({2}, {1, 1});
    TensorD beta({2});
    TensorD y = layer_norm<double>(x, gamma, beta, 1e-30);
    EXPECT_NEAR(y[0], -1.0, 1e-12);
    EXPECT_NEAR(y[1], 1.0, 1e-12);
}

TEST(LayerNorm, DirectFormulaOracle) {
    TensorD x({3}, {1, 2, 3});
    TensorD gamma({3}, {2, 2, 2});
    TensorD beta({3}, {1, 1, 1});
    const double eps = 1e-5;
    TensorD y = layer_norm<double>(x, gamma, beta, eps);
    const double mean = 2.0;
    const double var = ((1 - mean) * (1 - mean) + 0.0 + (3 - mean) * (3 - mean)) / 3.0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double expected = 2.0 * (x[i] - mean) / std::sqrt(var + eps) + 1.0;
        EXPECT_NEAR(y[i], expected, 1e-12);
    }
}

TEST(LayerNorm, NormalizesRandomInputs) {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 4 + rng.index(60);
        TensorD x({n});
        rng.fill_gaussian(x);
        TensorD gamma({n});
        for (std::size_t i = 0; i < n; ++i) gamma[i] = 1.0;
        TensorD beta({n});
        TensorD y = layer_norm<double>(x, gamma, beta, 1e-12);
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += y[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (y[i] - mean) * (y[i] - mean);
        var /= static_cast<double>(n);
        EXPECT_LE(std::fabs(mean), 1e-10);
        EXPECT_NEAR(var, 1.0, 1e-6);
    }
}

TEST(LayerNorm, RejectsNonPositiveEps) {
    TensorD x({2}, {1, 2});
    TensorD gamma({2}, {1, 1});
    TensorD beta({2});
    EXPECT_THROW(layer_norm<double>(x, gamma, beta, 0.0), std::invalid_argument);
}

TEST(Activation, GeluAtZero) { EXPECT_EQ(gelu(0.0), 0.0); }

TEST(Activation, Relu) {
    TensorD x({2}, {-1, 2});
    TensorD y = activation(Activation::Relu, x);
    EXPECT_EQ(y[0], 0.0);
    EXPECT_EQ(y[1], 2.0);
}

TEST(Activation, GeluMatchesScalarReference) {
    for (int i = -30; i <= 30; ++i) {
        const double x = i / 10.0;
        const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
        const double ref = 0.5 * x * (1.0 + std::tanh(u));
        EXPECT_NEAR(gelu(x), ref, 1e-12);
    }
}

TEST(Activation, GeluGradMatchesFiniteDifference) {
    const double h = 1e-6;
    for (int i = -25; i <= 25; ++i) {
        const double x = i / 8.0;
        const double num = (gelu(x + h) - gelu(x - h)) / (2 * h);
        EXPECT_NEAR(gelu_grad(x), num, 1e-7);
    }
}

TEST(Rng, DeterministicStreams) {
    Rng a(42), b(42);
    TensorD ta({64}), tb({64});
    a.fill_gaussian(ta);
    b.fill_gaussian(tb);
    EXPECT_TRUE(bitwise_equal(ta, tb));
}

TEST(Tensor, RejectsZeroExtent) {
    EXPECT_THROW(TensorD({0, 3}), std::invalid_argument);
}

TEST(Tensor, RejectsDataLengthMismatch) {
    EXPECT_THROW(TensorD({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

// --- gradient checker ---------------------------------------------------------

TEST(CheckGradient, QuadraticExact) {
    auto f = [](const std::vector<TensorD>& p) { return p[0][0] * p[0][0]; };
    std::vector<TensorD> params{TensorD({1}, {3.0})};
    std::vector<TensorD> analytic{TensorD({1}, {6.0})};
    GradCheckReport rep = check_gradient(f, params, analytic, 1e-5, 1e-8);
    EXPECT_TRUE(rep.pass);
}

TEST(CheckGradient, MatmulWeightGradient) {
    Rng rng(5);
    TensorD w({4, 3});
    TensorD x({3, 2});
    rng.fill_gaussian(w);
    rng.fill_gaussian(x);
    auto f = [&](const std::vector<TensorD>& p) {
        TensorD y = matmul(p[0], x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i];
        return s;
    };
    // d/dW sum(W x) = 1^T x^T broadcast over rows: dW[i][t] = sum_j x[t][j].
    TensorD analytic({4, 3});
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t t = 0; t < 3; ++t) {
            double s = 0.0;
            for (std::size_t j = 0; j < 2; ++j) s += x.at(t, j);
            analytic.at(i, t) = s;
        }
    }
    GradCheckReport rep = check_gradient(f, {w}, {analytic}, 1e-5, 1e-7);
    EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}

TEST(CheckGradient, CorruptedGradientFails) {
    auto f = [](const std::vector<TensorD>& p) { return p[0][0] * p[0][0]; };
    std::vector<TensorD> params{TensorD({1}, {3.0})};
    std::vector<TensorD> corrupted{TensorD({1}, {6.0 * 1.01})};
    GradCheckReport rep = check_gradient(f, params, corrupted, 1e-5, 1e-5);
    EXPECT_FALSE(rep.pass);
}

TEST(CheckGradient, NonFiniteValueThrows) {
    auto f = [](const std::vector<TensorD>&) {
        return std::numeric_limits<double>::quiet_NaN();
    };
    std::vector<TensorD> params{TensorD({1}, {1.0})};
    std::vector<TensorD> analytic{TensorD({1}, {0.0})};
    EXPECT_THROW(check_gradient(f, params, analytic, 1e-5, 1e-5), std::runtime_error);
}

TEST(CheckGradient, RejectsBadStep) {
    auto f = [](const std::vector<TensorD>&) { return 0.0; };
    EXPECT_THROW(check_gradient(f, {}, {}, 0.0, 1e-5), std::invalid_argument);
}

}  // namespace
