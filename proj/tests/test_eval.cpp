#include <gtest/gtest.h>

#include "mammo/eval.hpp"
#include "mammo/random.hpp"

using namespace mammo;

TEST(Confusion, OneOfEach) {
  const std::vector<int> p{1, 1, 0, 0}, y{1, 0, 1, 0};
  const auto cm = confusion(p, y);
  EXPECT_EQ(cm, (ConfusionMatrix{1, 1, 1, 1}));
  const auto m = metrics(cm);
  EXPECT_DOUBLE_EQ(*m.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(*m.precision, 0.5);
  EXPECT_DOUBLE_EQ(*m.recall, 0.5);
  EXPECT_DOUBLE_EQ(*m.f1, 0.5);
}

TEST(Confusion, RejectsMismatch) {
  const std::vector<int> p{1}, y{1, 0};
  EXPECT_THROW(confusion(p, y), MetricError);
  const std::vector<int> bad{2};
  EXPECT_THROW(confusion(bad, bad), MetricError);
}

TEST(Metrics, PrecisionUndefinedWithoutPositivePredictions) {
  const auto m = metrics(ConfusionMatrix{0, 0, 5, 3});
  EXPECT_FALSE(m.precision.has_value());
  EXPECT_FALSE(m.f1.has_value());
  EXPECT_DOUBLE_EQ(*m.recall, 0.0);
  EXPECT_EQ(format_metric(m.precision), "n/a");
}

TEST(Metrics, AccuracyIsConvexCombination) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    ConfusionMatrix cm{static_cast<std::size_t>(rng.integer(0, 20)), static_cast<std::size_t>(rng.integer(0, 20)),
                       static_cast<std::size_t>(rng.integer(0, 20)), static_cast<std::size_t>(rng.integer(0, 20))};
    const std::size_t P = cm.tp + cm.fn, N = cm.tn + cm.fp;
    if (P == 0 || N == 0) continue;
    const double spec = static_cast<double>(cm.tn) / static_cast<double>(N);
    const double prev = static_cast<double>(P) / static_cast<double>(P + N);
    EXPECT_NEAR(*metrics(cm).accuracy, prev * *metrics(cm).recall + (1 - prev) * spec, 1e-12);
  }
}

TEST(Auc, SeparatedIsOne) {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(roc_auc(s, y).auc, 1.0);
}

TEST(Auc, AllTiedIsHalf) {
  const std::vector<double> s(6, 0.4);
  const std::vector<int> y{1, 0, 1, 0, 0, 1};
  EXPECT_DOUBLE_EQ(roc_auc(s, y).auc, 0.5);
}

TEST(Auc, MatchesRankStatistic) {
  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    const auto n = static_cast<std::size_t>(rng.integer(4, 60));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.integer(0, 10)) / 10.0;  // plenty of ties
      y[i] = static_cast<int>(rng.integer(0, 1));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(roc_auc(s, y).auc, rank_statistic_auc(s, y), 1e-9);
  }
}

TEST(Auc, SingleClassIsError) {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> y{1, 1};
  EXPECT_THROW(roc_auc(s, y), MetricError);
}

TEST(PrCurve, AllEqualScores) {
  const std::vector<double> s(5, 0.7);
  const std::vector<int> y{1, 0, 0, 1, 0};
  const auto pts = pr_curve(s, y);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_DOUBLE_EQ(pts[0].precision, 0.4);
  EXPECT_DOUBLE_EQ(pts[0].recall, 1.0);
}

TEST(PrCurve, RecallNonIncreasing) {
  const std::vector<double> s{0.9, 0.1, 0.5, 0.7, 0.3};
  const std::vector<int> y{1, 0, 1, 0, 1};
  const auto pts = pr_curve(s, y);
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LE(pts[i].recall, pts[i - 1].recall);
}
