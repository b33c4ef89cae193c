#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ehrtext/errors.hpp"
#include "ehrtext/numerics/adamw.hpp"
#include "ehrtext/numerics/gradcheck.hpp"
#include "ehrtext/numerics/ops.hpp"
#include "ehrtext/numerics/sparsemax.hpp"
#include "support.hpp"

using namespace ehrtext;
using num::Matrix;
using num::Var;
using ehrtext::testing::random_var;

namespace {

Matrix<double> mat(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix<double> m(static_cast<num::Index>(rows.size()), static_cast<num::Index>(rows.begin()->size()));
    num::Index r = 0;
    for (const auto& row : rows) {
        num::Index c = 0;
        for (double v : row) m(r, c++) = v;
        ++r;
    }
    return m;
}

// Weighted sum so gradients are not all equal.
Var<double> weighted_sum(const Var<double>& x, num::Rng& rng) {
    Var<double> w(rng.normal_matrix<double>(x.rows(), x.cols(), 1.0));
    return num::sum_all(num::mul(x, w));
}

}  // namespace

TEST(Sparsemax, SpecExamples) {
    auto a = num::sparsemax(std::vector<double>{0.0, 0.0});
    EXPECT_DOUBLE_EQ(a[0], 0.5);
    EXPECT_DOUBLE_EQ(a[1], 0.5);
    auto b = num::sparsemax(std::vector<double>{2.0, 0.0});
    EXPECT_DOUBLE_EQ(b[0], 1.0);
    EXPECT_DOUBLE_EQ(b[1], 0.0);
    auto c = num::sparsemax(std::vector<double>{0.5, 0.1, -1.0});
    EXPECT_NEAR(c[0], 0.7, 1e-12);
    EXPECT_NEAR(c[1], 0.3, 1e-12);
    EXPECT_EQ(c[2], 0.0);
    std::vector<double> v{0.5, 0.1, -1.0};
    EXPECT_NEAR(num::sparsemax_threshold<double>(v), -0.2, 1e-12);
}

TEST(Sparsemax, RejectsNonFiniteAndEmpty) {
    EXPECT_THROW(num::sparsemax(std::vector<double>{1.0, NAN}), InvalidInput);
    EXPECT_THROW(num::sparsemax(std::vector<double>{INFINITY}), InvalidInput);
    EXPECT_THROW(num::sparsemax(std::vector<double>{}), InvalidInput);
}

TEST(Sparsemax, MatchesBisectionOracle) {
    num::Rng rng(11);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 1 + rng.index(12);
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal() * (0.1 + 3.0 * rng.uniform());
        auto got = num::sparsemax(v);
        auto want = ehrtext::testing::simplex_projection_bisection(v);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_NEAR(got[i], want[i], 1e-9);
            EXPECT_GE(got[i], 0.0);
            sum += got[i];
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Sparsemax, ShiftInvariant) {
    num::Rng rng(12);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> v(6);
        for (auto& x : v) x = rng.normal();
        const double c = rng.uniform(-50.0, 50.0);
        std::vector<double> w = v;
        for (auto& x : w) x += c;
        auto a = num::sparsemax(v);
        auto b = num::sparsemax(w);
        for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
    }
}

TEST(Cosine, Examples) {
    Var<double> e(mat({{1, 0}, {0, 1}}));
    auto s = num::cosine_similarity_matrix(e, e).value();
    EXPECT_TRUE(s.isApprox(Matrix<double>::Identity(2, 2)));
    EXPECT_DOUBLE_EQ(num::cosine_similarity_matrix(Var<double>(mat({{1, 0}})), Var<double>(mat({{0, 1}}))).item(), 0.0);
    EXPECT_NEAR(num::cosine_similarity_matrix(Var<double>(mat({{1, 1}})), Var<double>(mat({{1, 0}}))).item(),
                1.0 / std::sqrt(2.0), 1e-15);
}

TEST(Cosine, ZeroRowIsDegenerate) {
    EXPECT_THROW(num::cosine_similarity_matrix(Var<double>(mat({{0, 0}})), Var<double>(mat({{1, 0}}))),
                 DegenerateVector);
}

TEST(Cosine, TransposeSymmetryAndRange) {
    num::Rng rng(13);
    for (int t = 0; t < 50; ++t) {
        Var<double> a(rng.normal_matrix<double>(5, 7, 1.0));
        Var<double> b(rng.normal_matrix<double>(5, 7, 1.0));
        Matrix<double> ab = num::cosine_similarity_matrix(a, b).value();
        Matrix<double> ba = num::cosine_similarity_matrix(b, a).value();
        EXPECT_TRUE(ab.transpose().isApprox(ba, 1e-14));
        EXPECT_LE(ab.maxCoeff(), 1.0);
        EXPECT_GE(ab.minCoeff(), -1.0);
    }
}

TEST(AdamW, SpecExamples) {
    num::AdamWConfig cfg;
    {
        Matrix<double> p = mat({{1.0, -2.0}});
        num::AdamWMoments<double> m;
        num::adamw_step(p, Matrix<double>(Matrix<double>::Zero(1, 2)), m, 1, cfg);
        EXPECT_EQ(p(0, 0), 1.0);
        EXPECT_EQ(p(0, 1), -2.0);
    }
    {
        cfg.learning_rate = 0.1;
        Matrix<double> p = mat({{1.0}});
        num::AdamWMoments<double> m;
        num::adamw_step(p, mat({{1.0}}), m, 1, cfg);
        // Bias-corrected first step: -lr * g / (|g| + eps).
        EXPECT_NEAR(p(0, 0), 1.0 - 0.1 * 1.0 / (1.0 + 1e-8), 1e-15);
        EXPECT_NEAR(p(0, 0), 0.9, 1e-8);
    }
    {
        cfg.learning_rate = 1e-4;
        cfg.weight_decay = 1e-4;
        Matrix<double> p = mat({{1.0}});
        num::AdamWMoments<double> m;
        num::adamw_step(p, mat({{0.0}}), m, 1, cfg);
        EXPECT_NEAR(p(0, 0), 1.0 - 1e-8, 1e-16);
    }
}

TEST(AdamW, ShapeMismatchIsContractViolation) {
    Matrix<double> p = Matrix<double>::Zero(2, 2);
    num::AdamWMoments<double> m;
    EXPECT_THROW(num::adamw_step(p, Matrix<double>(Matrix<double>::Zero(1, 2)), m, 1, num::AdamWConfig{}), ContractViolation);
}

TEST(AdamW, StepCounterAndMomentShapes) {
    num::ParameterStore<double> store;
    store.add("a", "g", Matrix<double>::Ones(3, 2));
    store.add("b", "g", Matrix<double>::Ones(1, 4));
    num::AdamW<double> opt(store, {});
    for (int i = 1; i <= 5; ++i) {
        Var<double> loss = num::add(num::sum_all(store.get("a")), num::sum_all(store.get("b")));
        store.zero_grad();
        num::backward(loss);
        opt.step();
        EXPECT_EQ(opt.step_count(), static_cast<std::uint64_t>(i));
    }
    EXPECT_EQ(opt.moments()[0].first.rows(), 3);
    EXPECT_EQ(opt.moments()[0].second.cols(), 2);
    EXPECT_EQ(opt.moments()[1].first.cols(), 4);
}

TEST(AdamW, MonotoneOnConvexQuadratic) {
    num::Rng rng(14);
    for (double lr : {1e-2, 3e-3, 1e-3}) {
        Matrix<double> target = rng.normal_matrix<double>(1, 6, 1.0);
        Matrix<double> x = rng.normal_matrix<double>(1, 6, 1.0);
        num::AdamWConfig cfg;
        cfg.learning_rate = lr;
        num::AdamWMoments<double> m;
        double prev = INFINITY;
        for (int step = 1; step <= 200; ++step) {
            const double loss = (x - target).squaredNorm();
            if (step > 3) EXPECT_LE(loss, prev) << "lr " << lr << " step " << step;
            prev = loss;
            Matrix<double> g = 2.0 * (x - target);
            num::adamw_step(x, g, m, static_cast<std::uint64_t>(step), cfg);
        }
    }
}

TEST(Gradcheck, Polynomial) {
    Var<double> x(mat({{3.0}}));
    const double err = num::gradcheck([](const Var<double>& v) { return num::mul(v, v); }, x, 1e-5);
    EXPECT_LT(err, 1e-7);
    x.zero_grad();
    auto y = num::mul(x, x);
    num::backward(y);
    EXPECT_DOUBLE_EQ(x.grad()(0, 0), 6.0);
}

TEST(Gradcheck, ReportsNonFiniteCoordinate) {
    Var<double> x(mat({{1.0, 0.0}}), true);
    auto f = [&] {
        Matrix<double> v = x.value();
        if (v(0, 1) > 0.0) {
            Matrix<double> bad = v;
            bad(0, 1) = NAN;
            return num::sum_all(num::add(x, Var<double>(bad - v)));
        }
        return num::sum_all(x);
    };
    try {
        num::gradcheck(f, {x}, 1e-6);
        FAIL() << "expected InvalidInput";
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
    }
}

class OpGradients : public ::testing::Test {
protected:
    num::Rng rng{2024};
    void expect_ok(const num::GradcheckResult& r) {
        EXPECT_LT(r.max_relative_error, 1e-5) << "input " << r.worst_input << " coordinate " << r.worst_coordinate;
    }
};

TEST_F(OpGradients, LinearAndElementwise) {
    for (int t = 0; t < 5; ++t) {
        auto x = random_var(rng, 4, 5), w = random_var(rng, 5, 3), b = random_var(rng, 1, 3);
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                return weighted_sum(num::linear(x, w, b), r2);
            },
            {x, w, b}));
        auto p = random_var(rng, 4, 3), q = random_var(rng, 3, 4);
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                return weighted_sum(num::matmul(p, q), r2);
            },
            {p, q}));
        auto a = random_var(rng, 3, 4), c = random_var(rng, 5, 4);
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                return weighted_sum(num::matmul_nt(a, c), r2);
            },
            {a, c}));
        auto u = random_var(rng, 3, 4), v = random_var(rng, 3, 4);
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                return weighted_sum(num::sub(num::mul(num::sigmoid(u), num::gelu(v)), num::relu(num::add(u, v))), r2);
            },
            {u, v}));
        auto s = Var<double>(mat({{0.7 + rng.uniform()}}), true);
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                return weighted_sum(num::affine(num::div_scalar(u, s), 2.0, 0.3), r2);
            },
            {u, s}));
    }
}

TEST_F(OpGradients, GluAndLayerNorm) {
    for (int t = 0; t < 5; ++t) {
        auto x = random_var(rng, 4, 6);
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                return weighted_sum(num::glu(x), r2);
            },
            {x}));
        auto h = random_var(rng, 3, 8), g = random_var(rng, 1, 8), b = random_var(rng, 1, 8);
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                return weighted_sum(num::layer_norm(h, g, b), r2);
            },
            {h, g, b}));
    }
}

TEST_F(OpGradients, StructuralOps) {
    auto x = random_var(rng, 5, 4), y = random_var(rng, 5, 2), z = random_var(rng, 2, 4);
    expect_ok(num::gradcheck(
        [&] {
            num::Rng r2(1);
            auto gathered = num::gather_rows(x, {0, 3, 3, 1});
            auto cols = num::concat_cols<double>({x, y});
            auto rows = num::concat_rows<double>({x, z});
            auto sliced = num::slice_cols(cols, 1, 4);
            auto pooled = num::segment_mean(x, {{0, 2}, {2, 3}});
            return num::add(num::add(weighted_sum(gathered, r2), weighted_sum(rows, r2)),
                            num::add(weighted_sum(sliced, r2), weighted_sum(pooled, r2)));
        },
        {x, y, z}));
}

TEST_F(OpGradients, Attention) {
    for (int t = 0; t < 3; ++t) {
        auto q = random_var(rng, 5, 8), k = random_var(rng, 7, 8), v = random_var(rng, 7, 8);
        std::vector<unsigned char> mask = {1, 1, 0, 1, 1, 1, 1};
        expect_ok(num::gradcheck(
            [&] {
                num::Rng r2(t);
                auto out = num::attention(q, k, v, 2, {{0, 2}, {2, 3}}, {{0, 3}, {3, 4}}, &mask);
                return weighted_sum(out, r2);
            },
            {q, k, v}));
    }
}

TEST_F(OpGradients, SparsemaxAwayFromSupportChanges) {
    int checked = 0;
    while (checked < 10) {
        Matrix<double> m = rng.normal_matrix<double>(3, 6, 1.0);
        bool safe = true;
        for (num::Index r = 0; r < m.rows(); ++r) {
            std::vector<double> row(m.row(r).data(), m.row(r).data() + m.cols());
            safe = safe && ehrtext::testing::sparsemax_margin(row) > 1e-3;
        }
        if (!safe) continue;
        Var<double> x(m, true);
        expect_ok(num::gradcheck([&] { return num::sum_all(num::mul(num::sparsemax_rows(x), num::sparsemax_rows(x))); },
                                 {x}));
        ++checked;
    }
}

TEST_F(OpGradients, NormalizationAndLosses) {
    auto e = random_var(rng, 4, 8), t = random_var(rng, 4, 8);
    expect_ok(num::gradcheck([&] { return num::clip_loss_from_logits(num::scale(num::cosine_similarity_matrix(e, t), 10.0)); },
                             {e, t}));
    auto x = random_var(rng, 6, 1);
    std::vector<double> y = {1, 0, 1, 1, 0, 0};
    expect_ok(num::gradcheck([&] { return num::binary_cross_entropy(num::sigmoid(x), std::span<const double>(y)); }, {x}));
    expect_ok(num::gradcheck([&] { return num::bce_with_logits(x, std::span<const double>(y)); }, {x}));
    auto p = random_var(rng, 3, 4);
    Matrix<double> target = rng.normal_matrix<double>(3, 4, 1.0);
    Matrix<double> mask = mat({{1, 0, 0, 1}, {0, 1, 0, 0}, {1, 1, 1, 0}});
    expect_ok(num::gradcheck([&] { return num::masked_mse(p, target, mask); }, {p}));
    auto l = random_var(rng, 4, 5);
    expect_ok(num::gradcheck([&] { return num::cross_entropy_rows(l, {0, 4, 2, 2}, {1.0, 0.0, 1.0, 1.0}); }, {l}));
}

TEST(Losses, BceWithLogitsMatchesProbabilityForm) {
    num::Rng rng(5);
    Var<double> x(rng.normal_matrix<double>(8, 1, 2.0));
    std::vector<double> y = {1, 0, 1, 0, 0, 1, 1, 0};
    EXPECT_NEAR(num::bce_with_logits(x, std::span<const double>(y)).item(),
                num::binary_cross_entropy(num::sigmoid(x), std::span<const double>(y)).item(), 1e-12);
}

TEST(Losses, ConstantPredictionClosedForm) {
    std::vector<double> y = {1, 0, 0, 1, 0, 0, 0, 1, 0, 0};
    const double r = 0.3;
    for (double p : {0.5, 0.2, 0.9, 0.999}) {
        Var<double> probs(Matrix<double>::Constant(10, 1, p));
        const double want = -(r * std::log(p) + (1 - r) * std::log(1 - p));
        EXPECT_NEAR(num::binary_cross_entropy(probs, std::span<const double>(y)).item(), want, 1e-9);
    }
    Var<double> half(Matrix<double>::Constant(10, 1, 0.5));
    EXPECT_NEAR(num::binary_cross_entropy(half, std::span<const double>(y)).item(), std::log(2.0), 1e-12);
}

TEST(Losses, NearPerfectPredictions) {
    std::vector<double> y = {1, 0, 1, 0};
    Var<double> probs(mat({{0.999}, {0.001}, {0.999}, {0.001}}));
    const double loss = num::binary_cross_entropy(probs, std::span<const double>(y)).item();
    EXPECT_NEAR(loss, -std::log(0.999), 1e-12);
    EXPECT_LT(loss, 0.002);
}

TEST(Autodiff, GradAccumulatesAcrossUses) {
    Var<double> x(mat({{2.0}}), true);
    auto y = num::add(num::mul(x, x), x);
    num::backward(y);
    EXPECT_DOUBLE_EQ(x.grad()(0, 0), 5.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
    Var<double> x(mat({{2.0}}), true);
    Var<double> y;
    {
        num::NoGradGuard guard;
        y = num::mul(x, x);
    }
    EXPECT_FALSE(y.requires_grad());
}
