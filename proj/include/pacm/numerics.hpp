#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pacm/errors.hpp"

namespace pacm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Nats to bits. Only the reporting layer should need this.
inline double to_bits(double nats) { return nats / std::numbers::ln2; }

// Uniform grid over [lo, hi] with both endpoints included.
class Grid1D {
 public:
  Grid1D(double lo, double hi, std::size_t count) : lo_(lo), hi_(hi), count_(count) {
    if (!(lo < hi)) throw UsageError("Grid1D: lo must be < hi");
    if (count < 2) throw UsageError("Grid1D: count must be >= 2");
    step_ = (hi - lo) / static_cast<double>(count - 1);
  }

  double lo() const { return lo_; }
  double hi() const { return hi_; }
  std::size_t count() const { return count_; }
  double step() const { return step_; }
  double point(std::size_t i) const {
    return i + 1 == count_ ? hi_ : lo_ + step_ * static_cast<double>(i);
  }
  std::vector<double> points() const {
    std::vector<double> out(count_);
    for (std::size_t i = 0; i < count_; ++i) out[i] = point(i);
    return out;
  }

  bool operator==(const Grid1D& o) const {
    return lo_ == o.lo_ && hi_ == o.hi_ && count_ == o.count_;
  }

 private:
  double lo_;
  double hi_;
  std::size_t count_;
  double step_;
};

// Discretized density on a Grid1D. Mass is measured by the rectangle rule
// sum(probs) * step.
struct GridDensity {
  Grid1D grid;
  std::vector<double> probs;

  double mass() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s * grid.step();
  }
};

namespace detail {
inline void require_nonempty(std::span<const double> v, const char* who) {
  if (v.empty()) throw UsageError(std::string(who) + ": empty input");
}
}  // namespace detail

// log(sum(exp(v))) with max shifting. -inf entries are allowed.
inline double log_sum_exp(std::span<const double> v) {
  detail::require_nonempty(v, "log_sum_exp");
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (mx == kNegInf) return kNegInf;
  if (std::isinf(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// log((1/n) sum(exp(v))).
inline double log_mean_exp(std::span<const double> v) {
  detail::require_nonempty(v, "log_mean_exp");
  return log_sum_exp(v) - std::log(static_cast<double>(v.size()));
}

// (1/phi) log((1/n) sum(exp(phi v))) for phi in (0, 1]; the arithmetic mean
// at phi = 0. For every phi in [0, 1] the result is <= log_mean_exp(v).
inline double log_avg_exp_tempered(std::span<const double> v, double phi) {
  detail::require_nonempty(v, "log_avg_exp_tempered");
  if (!(phi >= 0.0 && phi <= 1.0)) throw UsageError("log_avg_exp_tempered: phi outside [0, 1]");
  if (phi == 0.0) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
  std::vector<double> scaled(v.begin(), v.end());
  for (double& x : scaled) x *= phi;
  return log_mean_exp(scaled) / phi;
}

// Turn unnormalized log values on a grid into a density with unit
// rectangle-rule mass. Normalization happens in log space.
inline GridDensity normalize_log_density(const Grid1D& grid, std::span<const double> logvals) {
  if (logvals.size() != grid.count())
    throw UsageError("normalize_log_density: logvals length != grid.count");
  for (double x : logvals)
    if (std::isnan(x)) throw UsageError("normalize_log_density: NaN log value");
  const double lse = log_sum_exp(logvals);
  if (lse == kNegInf) throw DegenerateDensityError("normalize_log_density: all entries are -inf");
  const double log_norm = lse + std::log(grid.step());
  GridDensity out{grid, std::vector<double>(grid.count())};
  for (std::size_t i = 0; i < grid.count(); ++i) out.probs[i] = std::exp(logvals[i] - log_norm);
  return out;
}

// Mean and standard error of a sample.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_and_se(std::span<const double> v) {
  detail::require_nonempty(v, "mean_and_se");
  const double n = static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / n;
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw UsageError("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

}  // namespace pacm
