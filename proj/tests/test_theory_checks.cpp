#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pacm/theory_checks.hpp"

using namespace pacm;

TEST(CheckReport, RecordsViolations) {
  CheckReport r;
  r.record(0.5);
  r.record(-1e-13, 1e-12);
  EXPECT_TRUE(r.passed);
  r.record(-0.1);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.violations, 1u);
  EXPECT_EQ(r.trials, 3u);
  EXPECT_DOUBLE_EQ(r.worst_slack, -0.1);
}

TEST(MonotoneChain, PassesOnToyPosterior) {
  Rng rng(1);
  const std::vector<double> data{-2.1, 0.4, 1.7, 2.5, 3.0};
  const CheckReport r = check_monotone_chain(Normal1D(0.5, 1.5), data, 1.0, {1, 2, 4, 8, 16, 32}, 2000, rng);
  EXPECT_TRUE(r.passed) << r.violations << " violations, worst " << r.worst_slack;
  ASSERT_EQ(r.values.size(), 6u);
  EXPECT_GT(r.values.front(), r.values.back());
}

TEST(MonotoneChain, DetectsIncreasingSequence) {
  // A sampler whose data term grows with m must be flagged.
  Rng rng(2);
  LogLikSampler bad = [](Rng& r, std::size_t m) {
    Eigen::MatrixXd ll(static_cast<Eigen::Index>(m), 3);
    for (Eigen::Index k = 0; k < ll.size(); ++k) ll(k) = -static_cast<double>(m) + 0.01 * r.normal();
    return ll;
  };
  EXPECT_FALSE(check_monotone_chain(bad, {1, 2, 4}, 50, rng).passed);
  EXPECT_THROW(check_monotone_chain(bad, {2, 4}, 50, rng), UsageError);
}

TEST(Lemmas, AllPass) {
  Rng rng(3);
  const auto reports = check_inequality_lemmas(rng, 1000);
  EXPECT_EQ(reports.size(), 7u);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.passed) << r.name << ": " << r.violations << " violations";
    EXPECT_GE(r.trials, 1000u) << r.name;
  }
  EXPECT_THROW(check_inequality_lemmas(rng, 10), UsageError);
}

TEST(LambdaStar, ScanMinimumAndConvexity) {
  for (std::size_t n : {10u, 100u})
    for (double beta : {0.5, 1.0, 2.0}) {
      const CheckReport r = check_lambda_star(n, beta, {1, 2, 4, 16, 64});
      EXPECT_TRUE(r.passed) << "n=" << n << " beta=" << beta;
    }
}
