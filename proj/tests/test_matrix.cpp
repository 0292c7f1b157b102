#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "pointlabel/matrix.hpp"

using namespace pointlabel;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const Matrix<float> eye{{1, 0}, {0, 1}};
    const Matrix<float> m{{1, 2}, {3, 4}};
    EXPECT_EQ(matmul(eye, m), m);
}

TEST(Matmul, RowTimesColumn) {
    const Matrix<float> a{{1, 2}};
    const Matrix<float> b{{3}, {4}};
    const auto c = matmul(a, b);
    ASSERT_EQ(c.rows(), 1u);
    ASSERT_EQ(c.cols(), 1u);
    EXPECT_EQ(c(0, 0), 11.0f);
}

TEST(Matmul, EmptyInnerDimensionGivesZero) {
    const Matrix<float> a(1, 0), b(0, 1);
    const auto c = matmul(a, b);
    ASSERT_EQ(c.rows(), 1u);
    ASSERT_EQ(c.cols(), 1u);
    EXPECT_EQ(c(0, 0), 0.0f);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    const Matrix<float> a(2, 3), b(2, 3);
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    }
}

TEST(Matmul, MatchesNaiveReferenceOnOddShapes) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto [n, k, m] : {std::tuple{1, 1, 1}, {5, 3, 7}, {67, 33, 65}, {4, 70, 31}, {130, 9, 64}}) {
        Matrix<float> a(n, k), b(k, m);
        for (auto& v : a.values()) v = static_cast<float>(u(rng));
        for (auto& v : b.values()) v = static_cast<float>(u(rng));
        const auto c = matmul(a, b);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                double acc = 0;
                for (int p = 0; p < k; ++p) acc += double(a(i, p)) * double(b(p, j));
                // Same left-to-right float64 order, rounded once.
                EXPECT_EQ(c(i, j), static_cast<float>(acc)) << i << "," << j;
            }
    }
}

TEST(Matmul, AssociativeOnRandomDoubles) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-2, 2);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix<double> a(4, 4), b(4, 4), c(4, 4);
        for (auto* m : {&a, &b, &c})
            for (auto& v : m->values()) v = u(rng);
        const auto lhs = matmul(matmul(a, b), c);
        const auto rhs = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < lhs.size(); ++i)
            EXPECT_NEAR(lhs.values()[i], rhs.values()[i], 1e-6 * std::max(1.0, std::abs(rhs.values()[i])));
    }
}

TEST(Matmul, TransposedVariantsAgreeWithExplicitTranspose) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1, 1);
    Matrix<double> a(6, 4), b(6, 5), c(3, 4);
    for (auto* m : {&a, &b, &c})
        for (auto& v : m->values()) v = u(rng);
    EXPECT_EQ(matmul_tn(a, b), matmul(transpose(a), b));
    EXPECT_EQ(matmul_nt(a, c), matmul(a, transpose(c)));
}

TEST(Reduce, MaxOverRows) {
    const Matrix<float> m{{1, 5}, {3, 2}};
    EXPECT_EQ(reduce(m, Axis::Rows, Reduction::Max), (std::vector<float>{3, 5}));
}

TEST(Reduce, MeanOverRows) {
    const Matrix<double> m{{1}, {2}, {3}};
    EXPECT_EQ(reduce(m, Axis::Rows, Reduction::Mean), (std::vector<double>{2}));
}

TEST(Reduce, BiasedVarianceOverRows) {
    const Matrix<double> m{{1}, {2}, {3}};
    EXPECT_NEAR(reduce(m, Axis::Rows, Reduction::Var)[0], 2.0 / 3.0, 1e-15);
}

TEST(Reduce, ColsAxisReducesEachRow) {
    const Matrix<double> m{{1, 5}, {3, 2}};
    EXPECT_EQ(reduce(m, Axis::Cols, Reduction::Max), (std::vector<double>{5, 3}));
    EXPECT_EQ(reduce(m, Axis::Cols, Reduction::Mean), (std::vector<double>{3, 2.5}));
}

TEST(Reduce, MaxOverSingleRowIsThatRow) {
    const Matrix<float> m{{4, -1, 2}};
    EXPECT_EQ(reduce(m, Axis::Rows, Reduction::Max), (std::vector<float>{4, -1, 2}));
}

TEST(Reduce, EmptyAxisIsDomainError) {
    EXPECT_THROW(reduce(Matrix<float>(0, 3), Axis::Rows, Reduction::Max), DomainError);
    EXPECT_THROW(reduce(Matrix<float>(3, 0), Axis::Cols, Reduction::Mean), DomainError);
}

TEST(ReduceProperty, MaxIsInvariantUnderRowShuffles) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(-10, 10);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 40, k = 1 + rng() % 12;
        Matrix<float> m(n, k);
        for (auto& v : m.values()) v = u(rng);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix<float> p(n, k);
        for (std::size_t i = 0; i < n; ++i) std::copy(m.row(perm[i]).begin(), m.row(perm[i]).end(), p.row(i).begin());
        EXPECT_EQ(reduce(p, Axis::Rows, Reduction::Max), reduce(m, Axis::Rows, Reduction::Max));
    }
}

TEST(ReduceProperty, VarianceNonNegativeAndZeroOnConstantRows) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<float> u(-1e3f, 1e3f);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 30;
        Matrix<float> m(n, 3);
        for (auto& v : m.values()) v = u(rng);
        for (float v : reduce(m, Axis::Rows, Reduction::Var)) EXPECT_GE(v, 0.0f);
        const float c = u(rng);
        Matrix<float> constant(n, 2, c);
        for (float v : reduce(constant, Axis::Rows, Reduction::Var)) EXPECT_EQ(v, 0.0f);
    }
}

TEST(ArgmaxRow, PicksLargest) { EXPECT_EQ(argmax_row(std::vector<double>{0.1, 0.7, 0.2}), 1u); }

TEST(ArgmaxRow, TiesGoToLowestIndex) { EXPECT_EQ(argmax_row(std::vector<double>{0.5, 0.5}), 0u); }

TEST(ArgmaxRow, Singleton) { EXPECT_EQ(argmax_row(std::vector<double>{3}), 0u); }

TEST(ArgmaxRow, EmptyIsDomainError) { EXPECT_THROW(argmax_row(std::vector<double>{}), DomainError); }

TEST(Elementwise, AddHadamardScale) {
    const Matrix<double> a{{1, 2}, {3, 4}}, b{{5, 6}, {7, 8}};
    EXPECT_EQ(add(a, b), (Matrix<double>{{6, 8}, {10, 12}}));
    EXPECT_EQ(hadamard(a, b), (Matrix<double>{{5, 12}, {21, 32}}));
    EXPECT_EQ(scale(a, 2.0), (Matrix<double>{{2, 4}, {6, 8}}));
    EXPECT_THROW(add(a, Matrix<double>(1, 2)), ShapeError);
}

TEST(Elementwise, SelectColumnsKeepsOrder) {
    const Matrix<double> a{{1, 2, 3}, {4, 5, 6}};
    const std::vector<std::size_t> cols{2, 0};
    EXPECT_EQ(select_columns(a, std::span<const std::size_t>(cols)), (Matrix<double>{{3, 1}, {6, 4}}));
}
