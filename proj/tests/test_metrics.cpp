#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "pointlabel/metrics.hpp"

using namespace pointlabel;

TEST(Evaluate, PerfectPrediction) {
    const std::vector<int> y{0, 1, 2, 2, 1};
    const auto r = evaluate(y, y, 3);
    EXPECT_EQ(r.overall_accuracy, 1.0);
    for (const auto& c : r.classes) {
        EXPECT_EQ(c.precision, 1.0);
        EXPECT_EQ(c.recall, 1.0);
        EXPECT_EQ(c.f1, 1.0);
    }
}

TEST(Evaluate, TwoClassReferenceExample) {
    const std::vector<int> truth{0, 0, 1, 1}, pred{0, 1, 1, 1};
    const auto r = evaluate(pred, truth, 2);
    EXPECT_DOUBLE_EQ(r.overall_accuracy, 0.75);
    EXPECT_EQ(r.confusion(0, 0), 1u);
    EXPECT_EQ(r.confusion(0, 1), 1u);
    EXPECT_EQ(r.confusion(1, 1), 2u);
    EXPECT_DOUBLE_EQ(r.classes[0].precision, 1.0);
    EXPECT_DOUBLE_EQ(r.classes[0].recall, 0.5);
    EXPECT_DOUBLE_EQ(r.classes[0].f1, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.classes[1].precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.classes[1].recall, 1.0);
    EXPECT_DOUBLE_EQ(r.classes[1].f1, 0.8);
}

TEST(Evaluate, AbsentClassFlaggedWithZeroScores) {
    const std::vector<int> y{0, 2, 2};
    const auto r = evaluate(y, y, 3);
    EXPECT_TRUE(r.classes[1].absent);
    EXPECT_EQ(r.classes[1].f1, 0.0);
    EXPECT_FALSE(r.classes[0].absent);
    EXPECT_DOUBLE_EQ(r.mean_f1(), 1.0);
}

TEST(Evaluate, PredictedButNeverTrueIsNotAbsent) {
    const std::vector<int> truth{0, 0}, pred{0, 1};
    const auto r = evaluate(pred, truth, 2);
    EXPECT_FALSE(r.classes[1].absent);
    EXPECT_EQ(r.classes[1].precision, 0.0);
    EXPECT_EQ(r.classes[1].recall, 0.0);
}

TEST(Evaluate, InvalidInputsRejected) {
    const std::vector<int> a{0, 1}, b{0};
    EXPECT_THROW(evaluate(a, b, 2), ShapeError);
    EXPECT_THROW(evaluate(std::span<const int>{}, std::span<const int>{}, 2), DomainError);
    const std::vector<int> bad{0, 5};
    EXPECT_THROW(evaluate(bad, a, 2), DomainError);
    const std::vector<int> neg{-1, 0};
    EXPECT_THROW(evaluate(a, neg, 2), DomainError);
}

TEST(Evaluate, InferredClassCount) {
    const std::vector<int> t{0, 4}, p{4, 4};
    EXPECT_EQ(evaluate(p, t).class_count(), 5u);
}

TEST(EvaluateProperty, ConfusionMarginsAndNormalisedRows) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 2 + rng() % 8, n = 1 + rng() % 500;
        std::vector<int> t(n), p(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = static_cast<int>(rng() % k);
            p[i] = rng() % 3 ? t[i] : static_cast<int>(rng() % k);
        }
        const auto r = evaluate(p, t, k);
        std::size_t total = 0;
        for (std::size_t c = 0; c < k; ++c) {
            std::size_t row = 0;
            for (std::size_t j = 0; j < k; ++j) row += r.confusion(c, j);
            EXPECT_EQ(row, static_cast<std::size_t>(std::count(t.begin(), t.end(), static_cast<int>(c))));
            total += row;
            const auto nr = r.normalized_row(c);
            double s = 0;
            for (double v : nr) s += v;
            if (row) EXPECT_NEAR(s, 1.0, 1e-12);
            else EXPECT_EQ(s, 0.0);
            const auto& sc = r.classes[c];
            EXPECT_GE(sc.f1, std::min(sc.precision, sc.recall) - 1e-12);
            EXPECT_LE(sc.f1, std::max(sc.precision, sc.recall) + 1e-12);
        }
        EXPECT_EQ(total, n);
        EXPECT_EQ(r.total, n);
    }
}

TEST(ReportText, RowsAndAbsentMarker) {
    std::vector<int> truth(9), pred(9);
    for (int i = 0; i < 9; ++i) truth[i] = pred[i] = i == 4 ? 3 : i;  // no Fence
    const auto r = evaluate(pred, truth, 9);
    std::ostringstream out;
    write_report_text(out, r);
    const std::string s = out.str();
    EXPECT_NE(s.find("Powerline"), std::string::npos);
    EXPECT_NE(s.find("Fence*"), std::string::npos);
    EXPECT_NE(s.find("Precision/Correctness"), std::string::npos);
    EXPECT_NE(s.find("Recall/Completeness"), std::string::npos);
    EXPECT_NE(s.find("F1 Score"), std::string::npos);
    EXPECT_NE(s.find("Overall Accuracy 100.00%"), std::string::npos);
    EXPECT_NE(s.find("* class absent"), std::string::npos);
}

TEST(ReportText, RowNormalisedPercentages) {
    const std::vector<int> truth{0, 0, 1, 1}, pred{0, 1, 1, 1};
    std::ostringstream out;
    write_report_text(out, evaluate(pred, truth, 2));
    std::istringstream in(out.str());
    std::string header, row0;
    std::getline(in, header);
    std::getline(in, row0);
    EXPECT_NE(row0.find("class 0"), std::string::npos);
    EXPECT_NE(row0.find("50.0"), std::string::npos);
    EXPECT_EQ(header.find("*"), std::string::npos);
}

TEST(ReportCsv, HeaderAndConfusionBlock) {
    const std::vector<int> truth{0, 0, 1, 1}, pred{0, 1, 1, 1};
    std::ostringstream out;
    write_report_csv(out, evaluate(pred, truth, 2));
    const std::string s = out.str();
    EXPECT_EQ(s.rfind("class,name,precision,recall,f1,truth_count,pred_count,absent\n", 0), 0u);
    EXPECT_NE(s.find("0,class 0,1.000000,0.500000,0.666667,2,1,0\n"), std::string::npos);
    EXPECT_NE(s.find("truth_0,1,1\n"), std::string::npos);
    EXPECT_NE(s.find("overall_accuracy,0.750000"), std::string::npos);
}
