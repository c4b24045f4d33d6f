#pragma once

// Risk functionals evaluated on plain numbers: the empirical inferential and
// predictive terms, the four training losses (ELBO, PAC^m, PAC^2-T, IWAE),
// the generalization gap, the psi offset and its closed-form upper bound.
//
// Everything is in nats. The differentiable versions of the four losses live
// in pacm/losses.hpp and are checked against these.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pacm/distributions.hpp"
#include "pacm/errors.hpp"
#include "pacm/numerics.hpp"
#include "pacm/random.hpp"

namespace pacm {

// values(j, i) = log p(x_i | theta_j); m rows (posterior draws) by n columns
// (data points).
class LogLikMatrix {
 public:
  explicit LogLikMatrix(Eigen::MatrixXd values) : values_(std::move(values)) {
    if (values_.rows() < 1 || values_.cols() < 1) throw UsageError("LogLikMatrix: need m >= 1 and n >= 1");
    if (values_.hasNaN()) throw UsageError("LogLikMatrix: NaN entry");
  }

  std::size_t m() const { return static_cast<std::size_t>(values_.rows()); }
  std::size_t n() const { return static_cast<std::size_t>(values_.cols()); }
  const Eigen::MatrixXd& values() const { return values_; }
  double operator()(std::size_t j, std::size_t i) const {
    return values_(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
  }
  std::vector<double> column(std::size_t i) const {
    std::vector<double> c(m());
    for (std::size_t j = 0; j < m(); ++j) c[j] = (*this)(j, i);
    return c;
  }

 private:
  Eigen::MatrixXd values_;
};

struct BoundParams {
  std::size_t n = 1;
  std::size_t m = 1;
  double beta = 1.0;
  double lambda = 1.0;
  double xi = 1.0;
  double s = 1.0;
  // Permit lambda < m. The beta-parameterized coefficient 1/(beta n) implies
  // lambda = beta n m, which falls below m whenever beta n < 1.
  bool allow_small_lambda = false;

  void validate() const {
    if (n < 1 || m < 1) throw UsageError("BoundParams: n and m must be >= 1");
    if (!(beta > 0.0)) throw UsageError("BoundParams: beta must be > 0");
    if (!(lambda > 0.0)) throw UsageError("BoundParams: lambda must be > 0");
    if (!(xi > 0.0 && xi <= 1.0)) throw UsageError("BoundParams: xi must lie in (0, 1]");
    if (!(s > 0.0)) throw UsageError("BoundParams: s must be > 0");
  }

  // Default coupling lambda = beta n m, giving the KL coefficient 1/(beta n).
  static BoundParams beta_nm(std::size_t n, std::size_t m, double beta) {
    BoundParams p;
    p.n = n;
    p.m = m;
    p.beta = beta;
    p.lambda = beta * static_cast<double>(n) * static_cast<double>(m);
    p.allow_small_lambda = true;
    return p;
  }

  bool lambda_below_m() const { return lambda < static_cast<double>(m); }
};

struct GapStats {
  double delta = 0.0;
  double empirical_term = 0.0;
  double true_term = 0.0;
};

// -(1/(m n)) sum_{j,i} ll(j, i)
inline double emp_inf_risk(const LogLikMatrix& ll) {
  double s = 0.0;
  for (std::size_t j = 0; j < ll.m(); ++j)
    for (std::size_t i = 0; i < ll.n(); ++i) s += ll(j, i);
  return -s / static_cast<double>(ll.m() * ll.n());
}

// -(1/n) sum_i log_mean_exp_j ll(j, i)
inline double mc_pred_term(const LogLikMatrix& ll) {
  double s = 0.0;
  for (std::size_t i = 0; i < ll.n(); ++i) s += log_mean_exp(ll.column(i));
  return -s / static_cast<double>(ll.n());
}

namespace detail {
inline void require_nonneg_kl(double kl, const char* who) {
  if (!(kl >= 0.0)) throw UsageError(std::string(who) + ": kl must be >= 0");
}
inline void require_lambda(const BoundParams& p, const char* who) {
  p.validate();
  if (p.lambda_below_m() && !p.allow_small_lambda)
    throw UsageError(std::string(who) + ": lambda < m (set allow_small_lambda to override)");
}
}  // namespace detail

inline double elbo_loss(const LogLikMatrix& ll, double kl, const BoundParams& p) {
  detail::require_nonneg_kl(kl, "elbo_loss");
  p.validate();
  return emp_inf_risk(ll) + kl / (p.beta * static_cast<double>(p.n));
}

// KL coefficient m / lambda; written as (kl * m) / lambda so that m = 1 with
// lambda = beta n reproduces the ELBO penalty bit-for-bit.
inline double pacm_penalty(double kl, const BoundParams& p) {
  return kl * static_cast<double>(p.m) / p.lambda;
}

inline double pacm_loss(const LogLikMatrix& ll, double kl, const BoundParams& p) {
  detail::require_nonneg_kl(kl, "pacm_loss");
  detail::require_lambda(p, "pacm_loss");
  return mc_pred_term(ll) + pacm_penalty(kl, p);
}

// h(a) = 2 (a / (1 - e^a)^2 + 1 / (e^a (1 - e^a))), the second-order Jensen
// weight for a centered log mean likelihood a < 0.
inline double pac2t_weight(double a) {
  const double ea = std::exp(a);
  return 2.0 * (a / ((1.0 - ea) * (1.0 - ea)) + 1.0 / (ea * (1.0 - ea)));
}

// Sample-variance correction of PAC^2-T, averaged over data points.
inline double pac2t_variance_term(const LogLikMatrix& ll, double smoothing) {
  if (!(smoothing > 0.0)) throw UsageError("pac2t: smoothing must be > 0");
  const std::size_t m = ll.m();
  const std::size_t n = ll.n();
  if (m < 2) return 0.0;
  const double md = static_cast<double>(m);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> col = ll.column(i);
    double mx = kNegInf;
    for (double v : col) mx = std::max(mx, v);
    const double shift = mx + smoothing;
    for (double& v : col) v -= shift;
    const double h = pac2t_weight(log_mean_exp(col));
    double sum_e2 = 0.0;
    double sum_e = 0.0;
    for (double v : col) {
      sum_e2 += std::exp(2.0 * v);
      sum_e += std::exp(v);
    }
    // mean_j h e^{2c_j} - mean_{j,k} h e^{c_j + c_k}
    total += h * (sum_e2 / md - (sum_e / md) * (sum_e / md));
  }
  return total / static_cast<double>(n);
}

inline double pac2t_loss(const LogLikMatrix& ll, double kl, const BoundParams& p, double smoothing = 0.1) {
  if (!(smoothing > 0.0)) throw UsageError("pac2t_loss: smoothing must be > 0");
  const double elbo = elbo_loss(ll, kl, p);
  return elbo - pac2t_variance_term(ll, smoothing);
}

// -(1/n) sum_i log_mean_exp_j (ll(j, i) + log_weight(j, i)),
// log_weight = log r(theta_j) - log q(theta_j).
inline double iwae_loss(const LogLikMatrix& ll, const Eigen::MatrixXd& log_weight) {
  if (log_weight.rows() != static_cast<Eigen::Index>(ll.m()) ||
      log_weight.cols() != static_cast<Eigen::Index>(ll.n()))
    throw UsageError("iwae_loss: log_weight shape mismatch");
  return mc_pred_term(LogLikMatrix(ll.values() + log_weight));
}

inline GapStats delta_gap(double empirical_term, double true_term) {
  if (!std::isfinite(empirical_term) || !std::isfinite(true_term))
    throw UsageError("delta_gap: terms must be finite");
  return {empirical_term - true_term, empirical_term, true_term};
}

inline double lambda_star(std::size_t n, double beta, std::size_t m) {
  if (n < 1 || m < 1 || !(beta > 0.0)) throw UsageError("lambda_star: need n, m >= 1 and beta > 0");
  return static_cast<double>(n) * beta * std::sqrt(std::log(static_cast<double>(std::max<std::size_t>(2, m))));
}

// lambda s^2 / (2n) + n log m / lambda + log m - log(xi) / lambda
inline double psi_upper_bound(double lambda, double s, std::size_t n, std::size_t m, double xi) {
  if (!(lambda > 0.0) || !(s > 0.0) || !(xi > 0.0 && xi <= 1.0) || n < 1 || m < 1)
    throw UsageError("psi_upper_bound: invalid arguments");
  const double nd = static_cast<double>(n);
  const double lm = std::log(static_cast<double>(m));
  return lambda * s * s / (2.0 * nd) + nd * lm / lambda + lm - std::log(xi) / lambda;
}

// ---------------------------------------------------------------------------
// Toy location model p(x | theta) = Normal(x; theta, model_scale)

namespace detail {
// Probability mass of nu outside [lo, hi].
inline double mass_outside(const MixtureNormal1D& nu, double lo, double hi) {
  double out = 0.0;
  for (std::size_t k = 0; k < nu.size(); ++k)
    out += nu.weights[k] * (normal_cdf(lo, nu.locs[k], nu.scales[k]) +
                            (1.0 - normal_cdf(hi, nu.locs[k], nu.scales[k])));
  return out;
}

inline void require_coverage(const MixtureNormal1D& nu, const Grid1D& g, double tol) {
  if (mass_outside(nu, g.lo(), g.hi()) > tol)
    throw MassCoverageError("x grid does not cover the data distribution");
}
}  // namespace detail

// A grid wide enough for any quadrature against nu.
inline Grid1D default_x_grid(const MixtureNormal1D& nu, std::size_t count = 4001) {
  double lo = nu.locs[0];
  double hi = nu.locs[0];
  for (std::size_t k = 0; k < nu.size(); ++k) {
    lo = std::min(lo, nu.locs[k] - 12.0 * nu.scales[k]);
    hi = std::max(hi, nu.locs[k] + 12.0 * nu.scales[k]);
  }
  return Grid1D(lo, hi, count);
}

// E_q[log Normal(x; theta, model_scale)]
inline double expected_log_lik(const Normal1D& q, double model_scale, double x) {
  const double d = x - q.loc;
  return -0.5 * kLog2Pi - std::log(model_scale) - (d * d + q.scale * q.scale) / (2.0 * model_scale * model_scale);
}

inline double expected_log_lik(const AtomicMixture& q, double model_scale, double x) {
  double s = 0.0;
  const double c2 = q.component_scale * q.component_scale;
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double d = x - q.locs[k];
    s += q.weights[k] * (-0.5 * kLog2Pi - std::log(model_scale) - (d * d + c2) / (2.0 * model_scale * model_scale));
  }
  return s;
}

inline double expected_log_lik(const GridDensity& q, double model_scale, double x) {
  double s = 0.0;
  for (std::size_t g = 0; g < q.probs.size(); ++g)
    if (q.probs[g] > 0.0) s += q.probs[g] * normal_log_pdf(x, q.grid.point(g), model_scale);
  return s * q.grid.step();
}

struct TrueRisks {
  double true_inf = 0.0;
  double true_pred = 0.0;
};

// Quadrature over x of -nu(x) E_q[log p(x|theta)] and -nu(x) log E_q[p(x|theta)].
template <class Posterior>
TrueRisks true_risks_toy(const Posterior& q, const MixtureNormal1D& nu, double model_scale, const Grid1D& x_grid) {
  detail::require_coverage(nu, x_grid, 1e-10);
  TrueRisks r;
  for (std::size_t i = 0; i < x_grid.count(); ++i) {
    const double x = x_grid.point(i);
    const double w = std::exp(log_prob(nu, x));
    if (w == 0.0) continue;
    r.true_inf -= w * expected_log_lik(q, model_scale, x);
    r.true_pred -= w * log_predictive_density(q, model_scale, x);
  }
  r.true_inf *= x_grid.step();
  r.true_pred *= x_grid.step();
  return r;
}

// Differential entropy of nu by the same quadrature.
inline double entropy(const MixtureNormal1D& nu, const Grid1D& x_grid) {
  detail::require_coverage(nu, x_grid, 1e-10);
  double h = 0.0;
  for (std::size_t i = 0; i < x_grid.count(); ++i) {
    const double lp = log_prob(nu, x_grid.point(i));
    if (lp == kNegInf) continue;
    h -= std::exp(lp) * lp;
  }
  return h * x_grid.step();
}

// KL[nu, predictive of q] = true predictive risk - entropy(nu).
template <class Posterior>
double kl_to_predictive(const Posterior& q, const MixtureNormal1D& nu, double model_scale, const Grid1D& x_grid) {
  return true_risks_toy(q, nu, model_scale, x_grid).true_pred - entropy(nu, x_grid);
}

// (1/n) sum_i log((1/m) sum_j p(x_i | theta_j)) and its nu-expectation.
inline GapStats toy_gap(std::span<const double> xs, std::span<const double> thetas, const MixtureNormal1D& nu,
                        double model_scale, const Grid1D& x_grid) {
  auto log_g = [&](double x) {
    std::vector<double> t(thetas.size());
    for (std::size_t j = 0; j < thetas.size(); ++j) t[j] = normal_log_pdf(x, thetas[j], model_scale);
    return log_mean_exp(t);
  };
  double emp = 0.0;
  for (double x : xs) emp += log_g(x);
  emp /= static_cast<double>(xs.size());
  double tru = 0.0;
  for (std::size_t i = 0; i < x_grid.count(); ++i) {
    const double x = x_grid.point(i);
    const double w = std::exp(log_prob(nu, x));
    if (w > 0.0) tru += w * log_g(x);
  }
  tru *= x_grid.step();
  return delta_gap(emp, tru);
}

struct PsiEstimate {
  double value = 0.0;
  double se = 0.0;
  std::size_t trials = 0;
};

// Monte-Carlo psi: (1/lambda) log mean_t exp(lambda Delta_t) - log(xi)/lambda
// over fresh (X^n ~ nu, Theta^m ~ prior) draws. The average is accumulated in
// log space; the standard error is the delta-method error of the log mean.
inline PsiEstimate psi_mc(const MixtureNormal1D& nu, const Normal1D& prior, double model_scale,
                          const BoundParams& p, std::size_t trials, Rng& rng) {
  if (trials < 1) throw UsageError("psi_mc: trials must be >= 1");
  p.validate();
  const Grid1D x_grid = default_x_grid(nu, 2001);
  std::vector<double> z(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto xs = sample(nu, rng, p.n);
    const auto th = sample(prior, rng, p.m);
    z[t] = p.lambda * toy_gap(xs, th, nu, model_scale, x_grid).delta;
  }
  const double lme = log_mean_exp(z);
  std::vector<double> w(trials);
  for (std::size_t t = 0; t < trials; ++t) w[t] = std::exp(z[t] - lme);
  const MeanSe ms = mean_and_se(w);
  PsiEstimate out;
  out.value = lme / p.lambda - std::log(p.xi) / p.lambda;
  out.se = ms.se / p.lambda;  // mean of w is 1
  out.trials = trials;
  return out;
}

}  // namespace pacm
