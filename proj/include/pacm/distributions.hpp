#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "pacm/errors.hpp"
#include "pacm/numerics.hpp"
#include "pacm/random.hpp"

namespace pacm {

inline double normal_log_pdf(double x, double loc, double scale) {
  const double z = (x - loc) / scale;
  return -0.5 * z * z - std::log(scale) - 0.5 * kLog2Pi;
}

inline double normal_pdf(double x, double loc, double scale) {
  return std::exp(normal_log_pdf(x, loc, scale));
}

inline double normal_cdf(double x, double loc, double scale) {
  return 0.5 * std::erfc(-(x - loc) / (scale * std::numbers::sqrt2));
}

struct Normal1D {
  double loc = 0.0;
  double scale = 1.0;

  Normal1D() = default;
  Normal1D(double loc_, double scale_) : loc(loc_), scale(scale_) {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw UsageError("Normal1D: scale must be > 0");
  }
};

namespace detail {
inline void check_weights(std::span<const double> w, const char* who) {
  if (w.empty()) throw UsageError(std::string(who) + ": need at least one component");
  double s = 0.0;
  for (double x : w) {
    if (!(x > 0.0)) throw UsageError(std::string(who) + ": weights must be positive");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-12) throw UsageError(std::string(who) + ": weights must sum to 1");
}
}  // namespace detail

// Finite mixture of 1-D normals; used for the data-generating distribution.
struct MixtureNormal1D {
  std::vector<double> weights;
  std::vector<double> locs;
  std::vector<double> scales;

  MixtureNormal1D(std::vector<double> w, std::vector<double> l, std::vector<double> s)
      : weights(std::move(w)), locs(std::move(l)), scales(std::move(s)) {
    if (locs.size() != weights.size() || scales.size() != weights.size())
      throw UsageError("MixtureNormal1D: component vectors differ in length");
    detail::check_weights(weights, "MixtureNormal1D");
    for (double s : scales)
      if (!(s > 0.0)) throw UsageError("MixtureNormal1D: scales must be > 0");
  }

  std::size_t size() const { return weights.size(); }
  double mean() const {
    double m = 0.0;
    for (std::size_t k = 0; k < size(); ++k) m += weights[k] * locs[k];
    return m;
  }
  double variance() const {
    double m2 = 0.0;
    for (std::size_t k = 0; k < size(); ++k)
      m2 += weights[k] * (scales[k] * scales[k] + locs[k] * locs[k]);
    const double m = mean();
    return m2 - m * m;
  }
};

// Weighted atoms on the parameter line, optionally smeared by a common normal
// kernel (component_scale 0 means pure point masses).
struct AtomicMixture {
  std::vector<double> weights;
  std::vector<double> locs;
  double component_scale = 0.0;

  AtomicMixture(std::vector<double> w, std::vector<double> l, double cs)
      : weights(std::move(w)), locs(std::move(l)), component_scale(cs) {
    if (locs.size() != weights.size()) throw UsageError("AtomicMixture: weights/locs length mismatch");
    detail::check_weights(weights, "AtomicMixture");
    if (!(component_scale >= 0.0)) throw UsageError("AtomicMixture: component_scale must be >= 0");
  }

  static AtomicMixture uniform(std::vector<double> l, double cs) {
    const std::size_t k = l.size();
    if (k == 0) throw UsageError("AtomicMixture: need at least one atom");
    std::vector<double> w(k, 1.0 / static_cast<double>(k));
    // Guard the sum-to-one check against roundoff for large k.
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) x /= s;
    return AtomicMixture(std::move(w), std::move(l), cs);
  }

  std::size_t size() const { return weights.size(); }
};

// Diagonal Gaussian over a flat parameter vector; scale_i = exp(raw_scale_i).
struct MeanFieldGaussian {
  Eigen::VectorXd locs;
  Eigen::VectorXd raw_scales;

  MeanFieldGaussian() = default;
  MeanFieldGaussian(Eigen::VectorXd l, Eigen::VectorXd r) : locs(std::move(l)), raw_scales(std::move(r)) {
    if (locs.size() != raw_scales.size()) throw UsageError("MeanFieldGaussian: locs/raw_scales length mismatch");
  }
  static MeanFieldGaussian standard(Eigen::Index d) {
    return {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d)};
  }

  Eigen::Index dim() const { return locs.size(); }
  Eigen::VectorXd scales() const { return raw_scales.array().exp().matrix(); }
};

// ---------------------------------------------------------------------------
// log densities

inline double log_prob(const Normal1D& d, double x) { return normal_log_pdf(x, d.loc, d.scale); }

inline double log_prob(const MixtureNormal1D& d, double x) {
  std::vector<double> terms(d.size());
  for (std::size_t k = 0; k < d.size(); ++k)
    terms[k] = std::log(d.weights[k]) + normal_log_pdf(x, d.locs[k], d.scales[k]);
  return log_sum_exp(terms);
}

// Point-mass mixtures have no density; the log "density" of a pure atom is
// +inf at the atom and -inf elsewhere.
inline double log_prob(const AtomicMixture& d, double x) {
  if (d.component_scale == 0.0) {
    double w = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k)
      if (d.locs[k] == x) w += d.weights[k];
    return w > 0.0 ? std::numeric_limits<double>::infinity() : kNegInf;
  }
  std::vector<double> terms(d.size());
  for (std::size_t k = 0; k < d.size(); ++k)
    terms[k] = std::log(d.weights[k]) + normal_log_pdf(x, d.locs[k], d.component_scale);
  return log_sum_exp(terms);
}

// Linear interpolation between grid nodes; -inf outside the grid.
inline double log_prob(const GridDensity& d, double x) {
  const Grid1D& g = d.grid;
  if (x < g.lo() || x > g.hi()) return kNegInf;
  const double u = (x - g.lo()) / g.step();
  const auto i = std::min(static_cast<std::size_t>(u), g.count() - 2);
  const double t = u - static_cast<double>(i);
  const double p = (1.0 - t) * d.probs[i] + t * d.probs[i + 1];
  return p > 0.0 ? std::log(p) : kNegInf;
}

inline double log_prob(const MeanFieldGaussian& d, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != d.dim()) throw UsageError("MeanFieldGaussian::log_prob: dimension mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < d.dim(); ++i) {
    const double z = (x[i] - d.locs[i]) * std::exp(-d.raw_scales[i]);
    s += -0.5 * z * z - d.raw_scales[i] - 0.5 * kLog2Pi;
  }
  return s;
}

// ---------------------------------------------------------------------------
// sampling

inline std::vector<double> sample(const Normal1D& d, Rng& rng, std::size_t k) {
  std::vector<double> out(k);
  for (double& x : out) x = rng.normal(d.loc, d.scale);
  return out;
}

inline std::vector<double> sample(const MixtureNormal1D& d, Rng& rng, std::size_t k) {
  std::vector<double> cdf(d.size());
  std::partial_sum(d.weights.begin(), d.weights.end(), cdf.begin());
  std::vector<double> out(k);
  for (double& x : out) {
    const double u = rng.uniform() * cdf.back();
    const auto c = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), d.size() - 1);
    x = rng.normal(d.locs[c], d.scales[c]);
  }
  return out;
}

inline std::vector<double> sample(const AtomicMixture& d, Rng& rng, std::size_t k) {
  std::vector<double> cdf(d.size());
  std::partial_sum(d.weights.begin(), d.weights.end(), cdf.begin());
  std::vector<double> out(k);
  for (double& x : out) {
    const double u = rng.uniform() * cdf.back();
    const auto c = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), d.size() - 1);
    x = d.component_scale > 0.0 ? rng.normal(d.locs[c], d.component_scale) : d.locs[c];
  }
  return out;
}

// Discrete inverse CDF over the grid nodes (no interpolation).
inline std::vector<double> sample(const GridDensity& d, Rng& rng, std::size_t k) {
  std::vector<double> cdf(d.probs.size());
  std::partial_sum(d.probs.begin(), d.probs.end(), cdf.begin());
  std::vector<double> out(k);
  for (double& x : out) {
    const double u = rng.uniform() * cdf.back();
    const auto i = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), cdf.size() - 1);
    x = d.grid.point(i);
  }
  return out;
}

// k x d matrix of draws, one per row.
inline Eigen::MatrixXd sample(const MeanFieldGaussian& d, Rng& rng, std::size_t k) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(k), d.dim());
  const Eigen::VectorXd s = d.scales();
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) = d.locs[c] + s[c] * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// KL divergences (nats)

inline double kl_normal_normal(const Normal1D& q, const Normal1D& r) {
  const double dm = q.loc - r.loc;
  return std::log(r.scale / q.scale) + (q.scale * q.scale + dm * dm) / (2.0 * r.scale * r.scale) - 0.5;
}

// Sum of coordinate KLs.
inline double kl_divergence(const MeanFieldGaussian& q, const MeanFieldGaussian& r) {
  if (q.dim() != r.dim()) throw UsageError("kl_divergence: dimension mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < q.dim(); ++i) {
    const double qs = std::exp(q.raw_scales[i]);
    const double rs = std::exp(r.raw_scales[i]);
    const double dm = q.locs[i] - r.locs[i];
    s += (r.raw_scales[i] - q.raw_scales[i]) + (qs * qs + dm * dm) / (2.0 * rs * rs) - 0.5;
  }
  return s;
}

// KL[q^m, r^m] for m independent copies.
inline double kl_iid(const MeanFieldGaussian& q, const MeanFieldGaussian& r, std::size_t m) {
  return static_cast<double>(m) * kl_divergence(q, r);
}

// KL between discrete distributions on the same finite support.
inline double kl_discrete(std::span<const double> p, std::span<const double> r) {
  if (p.size() != r.size()) throw UsageError("kl_discrete: support size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (r[i] == 0.0) throw AbsoluteContinuityError("kl_discrete: r has zero mass where p does not");
    s += p[i] * std::log(p[i] / r[i]);
  }
  return s;
}

// Rectangle-rule KL[q, r] for densities on a shared grid.
inline double kl_grid(const GridDensity& q, const GridDensity& r) {
  if (!(q.grid == r.grid)) throw UsageError("kl_grid: grids differ");
  double s = 0.0;
  for (std::size_t i = 0; i < q.probs.size(); ++i) {
    if (q.probs[i] == 0.0) continue;
    if (r.probs[i] == 0.0) throw AbsoluteContinuityError("kl_grid: r has zero density where q does not");
    s += q.probs[i] * (std::log(q.probs[i]) - std::log(r.probs[i]));
  }
  return s * q.grid.step();
}

// Discretize any density with a log_prob overload onto a grid.
template <class Dist>
GridDensity discretize(const Dist& d, const Grid1D& grid) {
  std::vector<double> lv(grid.count());
  for (std::size_t i = 0; i < grid.count(); ++i) lv[i] = log_prob(d, grid.point(i));
  return normalize_log_density(grid, lv);
}

// ---------------------------------------------------------------------------
// Posterior predictive under the location family Normal(x; theta, model_scale)

inline double log_predictive_density(const Normal1D& q, double model_scale, double x) {
  return normal_log_pdf(x, q.loc, std::hypot(q.scale, model_scale));
}

inline double log_predictive_density(const AtomicMixture& q, double model_scale, double x) {
  const double s = std::hypot(q.component_scale, model_scale);
  std::vector<double> terms(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) terms[k] = std::log(q.weights[k]) + normal_log_pdf(x, q.locs[k], s);
  return log_sum_exp(terms);
}

inline double log_predictive_density(const GridDensity& q, double model_scale, double x) {
  std::vector<double> terms;
  terms.reserve(q.probs.size());
  for (std::size_t i = 0; i < q.probs.size(); ++i) {
    if (q.probs[i] <= 0.0) continue;
    terms.push_back(std::log(q.probs[i]) + normal_log_pdf(x, q.grid.point(i), model_scale));
  }
  if (terms.empty()) return kNegInf;
  return log_sum_exp(terms) + std::log(q.grid.step());
}

template <class Posterior>
double predictive_density(const Posterior& q, double model_scale, double x) {
  return std::exp(log_predictive_density(q, model_scale, x));
}

}  // namespace pacm
