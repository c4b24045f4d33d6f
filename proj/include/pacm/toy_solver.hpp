#pragma once

// Solvers for the one-dimensional location model p(x | theta) = N(x; theta, s)
// with a Normal prior: closed-form Bayes, the m -> infinity PAC-predictive
// fixed point on a grid, the atomic empirical-predictive minimizer, and the
// optima of the true risks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pacm/distributions.hpp"
#include "pacm/errors.hpp"
#include "pacm/numerics.hpp"
#include "pacm/objectives.hpp"
#include "pacm/random.hpp"

namespace pacm {

inline Normal1D conjugate_posterior(const Normal1D& prior, std::span<const double> data, double model_scale) {
  if (!(model_scale > 0.0)) throw UsageError("conjugate_posterior: model_scale must be > 0");
  const double prior_prec = 1.0 / (prior.scale * prior.scale);
  const double lik_prec = 1.0 / (model_scale * model_scale);
  double sx = 0.0;
  for (double x : data) sx += x;
  const double prec = prior_prec + static_cast<double>(data.size()) * lik_prec;
  const double loc = (prior.loc * prior_prec + sx * lik_prec) / prec;
  return Normal1D(loc, 1.0 / std::sqrt(prec));
}

// ---------------------------------------------------------------------------
// fixed point

struct FixedPointConfig {
  Grid1D grid{-30.0, 30.0, 500};
  double alpha = 0.9;
  double beta = 1.0;
  double tol = 1e-8;
  std::size_t max_iters = 5000;

  void validate() const {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw UsageError("FixedPointConfig: alpha must be in [0, 1)");
    if (!(beta > 0.0)) throw UsageError("FixedPointConfig: beta must be > 0");
    if (!(tol > 0.0)) throw UsageError("FixedPointConfig: tol must be > 0");
    if (max_iters < 1) throw UsageError("FixedPointConfig: max_iters must be >= 1");
  }
};

struct FixedPointResult {
  GridDensity density;
  std::size_t iters = 0;
  double residual = 0.0;  // sup-norm change of q at the last iteration
  bool converged = false;
  std::vector<double> residuals;  // one per iteration
};

// q(theta) proportional to r(theta) exp(beta sum_i p(x_i|theta) / p(x_i)),
// with p(x_i) relaxed toward the q-predictive at rate 1 - alpha.
inline FixedPointResult fixed_point_pacpred(const Normal1D& prior, std::span<const double> data, double model_scale,
                                            const FixedPointConfig& cfg) {
  cfg.validate();
  if (!(model_scale > 0.0)) throw UsageError("fixed_point_pacpred: model_scale must be > 0");
  const Grid1D& g = cfg.grid;
  const std::size_t G = g.count();
  const std::size_t n = data.size();
  const double h = g.step();

  std::vector<double> log_r(G);
  for (std::size_t k = 0; k < G; ++k) log_r[k] = log_prob(prior, g.point(k));
  // lik[i][k] = p(x_i | theta_k)
  std::vector<std::vector<double>> lik(n, std::vector<double>(G));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < G; ++k) lik[i][k] = normal_pdf(data[i], g.point(k), model_scale);

  auto predictive = [&](const std::vector<double>& q, std::size_t i) {
    double s = 0.0;
    for (std::size_t k = 0; k < G; ++k) s += q[k] * lik[i][k];
    return s * h;
  };

  GridDensity q = normalize_log_density(g, log_r);
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = predictive(q.probs, i);

  FixedPointResult out{q, 0, 0.0, false, {}};
  std::vector<double> logits(G);
  for (std::size_t t = 1; t <= cfg.max_iters; ++t) {
    for (std::size_t k = 0; k < G; ++k) {
      double e = 0.0;
      for (std::size_t i = 0; i < n; ++i) e += lik[i][k] / p[i];
      logits[k] = log_r[k] + cfg.beta * e;
    }
    GridDensity next = normalize_log_density(g, logits);
    double res = 0.0;
    for (std::size_t k = 0; k < G; ++k) res = std::max(res, std::abs(next.probs[k] - q.probs[k]));
    q = std::move(next);
    for (std::size_t i = 0; i < n; ++i) p[i] = cfg.alpha * p[i] + (1.0 - cfg.alpha) * predictive(q.probs, i);
    out.residuals.push_back(res);
    out.iters = t;
    out.residual = res;
    if (res < cfg.tol) {
      out.converged = true;
      break;
    }
  }
  out.density = std::move(q);
  return out;
}

// m -> infinity PAC-predictive objective on the grid:
// -(1/n) sum_i log E_q p(x_i|theta) + KL[q, r] / (beta n), with r discretized
// on the same grid.
inline double pac_pred_objective(const GridDensity& q, const Normal1D& prior, std::span<const double> data,
                                 double model_scale, double beta) {
  if (data.empty()) throw UsageError("pac_pred_objective: empty data");
  const double n = static_cast<double>(data.size());
  double fit = 0.0;
  for (double x : data) fit -= log_predictive_density(q, model_scale, x);
  return fit / n + kl_grid(q, discretize(prior, q.grid)) / (beta * n);
}

// ---------------------------------------------------------------------------
// atomic empirical-predictive minimizer

struct AtomicErmConfig {
  std::size_t k = 300;
  double lr = 0.1;
  double tol = 1e-5;
  std::size_t max_steps = 200000;
  double init_jitter = 0.5;
};

struct AtomicErmResult {
  AtomicMixture mixture;
  std::size_t steps = 0;
  bool converged = false;
  std::vector<double> risks;  // risk before each step, then the final risk
};

// -(1/n) sum_i log sum_c w_c N(x_i; theta_c, model_scale)
inline double empirical_predictive_risk(const AtomicMixture& q, std::span<const double> data, double model_scale) {
  double r = 0.0;
  for (double x : data) r -= log_predictive_density(q, model_scale, x);
  return r / static_cast<double>(data.size());
}

namespace detail {
// Risk and its gradient with respect to the atom locations.
inline double atomic_risk_grad(const std::vector<double>& locs, double log_w, std::span<const double> data,
                               double model_scale, std::vector<double>& grad) {
  const std::size_t k = locs.size();
  const double n = static_cast<double>(data.size());
  const double s2 = model_scale * model_scale;
  std::fill(grad.begin(), grad.end(), 0.0);
  std::vector<double> lt(k);
  double risk = 0.0;
  for (double x : data) {
    for (std::size_t c = 0; c < k; ++c) lt[c] = log_w + normal_log_pdf(x, locs[c], model_scale);
    const double lse = log_sum_exp(lt);
    risk -= lse;
    for (std::size_t c = 0; c < k; ++c) grad[c] -= std::exp(lt[c] - lse) * (x - locs[c]) / s2;
  }
  for (double& v : grad) v /= n;
  return risk / n;
}
}  // namespace detail

// Uniform weights, trainable locations, adagrad until the largest update is
// below tol. Locations start at resampled data points plus N(0, init_jitter).
inline AtomicErmResult atomic_erm(std::span<const double> data, double model_scale, const AtomicErmConfig& cfg,
                                  Rng& rng) {
  if (cfg.k < 1) throw UsageError("atomic_erm: k must be >= 1");
  if (data.empty()) throw UsageError("atomic_erm: empty data");
  if (!(model_scale > 0.0)) throw UsageError("atomic_erm: model_scale must be > 0");
  if (!(cfg.lr > 0.0) || !(cfg.tol > 0.0)) throw UsageError("atomic_erm: lr and tol must be > 0");
  std::vector<double> locs(cfg.k);
  for (double& l : locs) l = data[rng.index(data.size())] + cfg.init_jitter * rng.normal();
  const double log_w = -std::log(static_cast<double>(cfg.k));

  std::vector<double> grad(cfg.k), accum(cfg.k, 0.0);
  AtomicErmResult out{AtomicMixture::uniform(locs, 0.0), 0, false, {}};
  for (std::size_t t = 0; t < cfg.max_steps; ++t) {
    out.risks.push_back(detail::atomic_risk_grad(locs, log_w, data, model_scale, grad));
    double biggest = 0.0;
    for (std::size_t c = 0; c < cfg.k; ++c) {
      accum[c] += grad[c] * grad[c];
      const double u = -cfg.lr * grad[c] / (std::sqrt(accum[c]) + 1e-8);
      locs[c] += u;
      biggest = std::max(biggest, std::abs(u));
    }
    out.steps = t + 1;
    if (biggest < cfg.tol) {
      out.converged = true;
      break;
    }
  }
  out.risks.push_back(detail::atomic_risk_grad(locs, log_w, data, model_scale, grad));
  out.mixture = AtomicMixture::uniform(std::move(locs), 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// optima of the true risks

struct ToyOptima {
  AtomicMixture inf_opt;   // single atom at the mean of nu
  AtomicMixture pred_opt;  // predictive equals nu
};

// pred_opt needs every nu component to share one scale s >= model_scale; the
// deconvolved components then have scale sqrt(s^2 - model_scale^2) (atoms
// when s == model_scale).
inline ToyOptima toy_optima(const MixtureNormal1D& nu, double model_scale) {
  if (!(model_scale > 0.0)) throw UsageError("toy_optima: model_scale must be > 0");
  const double s = nu.scales.front();
  for (double c : nu.scales)
    if (c != s) throw UsageError("toy_optima: predictive optimum unavailable for unequal component scales");
  if (s < model_scale) throw UsageError("toy_optima: predictive optimum unavailable when nu is narrower than the model");
  const double cs = s == model_scale ? 0.0 : std::sqrt(s * s - model_scale * model_scale);
  return {AtomicMixture({1.0}, {nu.mean()}, 0.0), AtomicMixture(nu.weights, nu.locs, cs)};
}

// ---------------------------------------------------------------------------
// the six-way comparison

struct ToySetup {
  MixtureNormal1D nu{{0.3, 0.7}, {-2.0, 2.0}, {1.0, 1.0}};
  std::size_t n = 5;
  Normal1D prior{0.0, 3.0};
  double model_scale = 1.0;
  FixedPointConfig fixed_point{};
  AtomicErmConfig atomic{};
};

struct ToyRisk {
  std::string name;     // emp-inf, pac-inf, true-inf, emp-pred, pac-pred, true-pred
  std::string solver;   // how the distribution was obtained
  double kl_nats = 0.0;  // KL[nu, predictive]
  double kl_bits = 0.0;
  bool converged = true;
};

struct ToyReport {
  std::uint64_t seed = 0;
  std::vector<double> data;
  std::vector<ToyRisk> rows;
  std::size_t fixed_point_iters = 0;
  double fixed_point_residual = 0.0;
  std::size_t atomic_steps = 0;

  const ToyRisk& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw UsageError("ToyReport: no row '" + name + "'");
  }
};

inline ToyReport run_toy(const ToySetup& setup, std::uint64_t seed) {
  Rng rng(seed);
  ToyReport rep;
  rep.seed = seed;
  rep.data = sample(setup.nu, rng, setup.n);
  const Grid1D xg = default_x_grid(setup.nu);
  const double s = setup.model_scale;
  auto add = [&](std::string name, std::string solver, double kl, bool conv) {
    rep.rows.push_back({std::move(name), std::move(solver), kl, to_bits(kl), conv});
  };

  double mean = 0.0;
  for (double x : rep.data) mean += x;
  mean /= static_cast<double>(rep.data.size());
  add("emp-inf", "maximum likelihood", kl_to_predictive(AtomicMixture({1.0}, {mean}, 0.0), setup.nu, s, xg), true);
  add("pac-inf", "conjugate posterior",
      kl_to_predictive(conjugate_posterior(setup.prior, rep.data, s), setup.nu, s, xg), true);
  const ToyOptima opt = toy_optima(setup.nu, s);
  add("true-inf", "mean of nu", kl_to_predictive(opt.inf_opt, setup.nu, s, xg), true);

  Rng erm_rng = rng.split();
  const AtomicErmResult erm = atomic_erm(rep.data, s, setup.atomic, erm_rng);
  rep.atomic_steps = erm.steps;
  add("emp-pred", "atomic erm", kl_to_predictive(erm.mixture, setup.nu, s, xg), erm.converged);

  const FixedPointResult fp = fixed_point_pacpred(setup.prior, rep.data, s, setup.fixed_point);
  rep.fixed_point_iters = fp.iters;
  rep.fixed_point_residual = fp.residual;
  add("pac-pred", "fixed point", kl_to_predictive(fp.density, setup.nu, s, xg), fp.converged);
  add("true-pred", "deconvolved nu", kl_to_predictive(opt.pred_opt, setup.nu, s, xg), true);
  return rep;
}

}  // namespace pacm
