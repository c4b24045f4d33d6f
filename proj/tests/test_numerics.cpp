#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "pacm/numerics.hpp"
#include "pacm/random.hpp"

using namespace pacm;

TEST(Grid1D, EndpointsAndStep) {
  const Grid1D g(-30.0, 30.0, 500);
  EXPECT_EQ(g.point(0), -30.0);
  EXPECT_EQ(g.point(499), 30.0);
  EXPECT_NEAR(g.step(), 60.0 / 499.0, 1e-15);
  EXPECT_NEAR(g.point(1) - g.point(0), g.step(), 1e-12);
}

TEST(Grid1D, RejectsBadShapes) {
  EXPECT_THROW(Grid1D(1.0, 1.0, 10), UsageError);
  EXPECT_THROW(Grid1D(0.0, 1.0, 1), UsageError);
}

TEST(LogSumExp, KnownValues) {
  const std::vector<double> zeros{0.0, 0.0};
  EXPECT_NEAR(log_sum_exp(zeros), std::log(2.0), 1e-15);
  const std::vector<double> v{std::log(1.0), std::log(3.0)};
  EXPECT_NEAR(log_mean_exp(v), std::log(2.0), 1e-15);
}

TEST(LogSumExp, NoOverflowForLargeInputs) {
  const std::vector<double> v{1000.0, 1000.0};
  EXPECT_NEAR(log_sum_exp(v), 1000.0 + std::log(2.0), 1e-12);
  const std::vector<double> w{-1000.0, -1000.0};
  EXPECT_NEAR(log_mean_exp(w), -1000.0, 1e-12);
}

TEST(LogSumExp, NegativeInfinityEntries) {
  const double ninf = -std::numeric_limits<double>::infinity();
  const std::vector<double> some{ninf, 0.0};
  EXPECT_NEAR(log_sum_exp(some), 0.0, 1e-15);
  const std::vector<double> all{ninf, ninf};
  EXPECT_EQ(log_sum_exp(all), ninf);
}

TEST(LogSumExp, EmptyIsUsageError) {
  const std::vector<double> e;
  EXPECT_THROW(log_sum_exp(e), UsageError);
  EXPECT_THROW(log_mean_exp(e), UsageError);
}

TEST(TemperedAverage, KnownValue) {
  // (1/0.5) log((1 + 2) / 2) = 2 log 1.5
  const std::vector<double> v{0.0, std::log(4.0)};
  EXPECT_NEAR(log_avg_exp_tempered(v, 0.5), 0.810930216216329, 1e-12);
  EXPECT_NEAR(log_avg_exp_tempered(v, 1.0), log_mean_exp(v), 1e-15);
  EXPECT_NEAR(log_avg_exp_tempered(v, 0.0), 0.5 * std::log(4.0), 1e-15);
  EXPECT_THROW(log_avg_exp_tempered(v, 1.5), UsageError);
}

TEST(TemperedAverage, MonotoneInPhi) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(5);
    for (double& x : v) x = rng.normal(0.0, 3.0);
    double prev = log_avg_exp_tempered(v, 0.0);
    for (double phi : {0.1, 0.3, 0.6, 1.0}) {
      const double cur = log_avg_exp_tempered(v, phi);
      EXPECT_GE(cur, prev - 1e-12);
      prev = cur;
    }
    EXPECT_LE(prev, log_mean_exp(v) + 1e-12);
  }
}

TEST(NormalizeLogDensity, UnitMass) {
  const Grid1D g(-5.0, 5.0, 101);
  std::vector<double> lv(g.count());
  for (std::size_t i = 0; i < g.count(); ++i) lv[i] = -0.5 * g.point(i) * g.point(i) + 700.0;
  const GridDensity d = normalize_log_density(g, lv);
  EXPECT_NEAR(d.mass(), 1.0, 1e-12);
}

TEST(NormalizeLogDensity, Errors) {
  const Grid1D g(0.0, 1.0, 3);
  const double ninf = -std::numeric_limits<double>::infinity();
  EXPECT_THROW(normalize_log_density(g, std::vector<double>{ninf, ninf, ninf}), DegenerateDensityError);
  EXPECT_THROW(normalize_log_density(g, std::vector<double>{0.0, 0.0}), UsageError);
}

TEST(MeanAndSe, Basic) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const MeanSe ms = mean_and_se(v);
  EXPECT_DOUBLE_EQ(ms.mean, 2.5);
  EXPECT_NEAR(ms.se, std::sqrt(5.0 / 3.0 / 4.0), 1e-15);
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
}
