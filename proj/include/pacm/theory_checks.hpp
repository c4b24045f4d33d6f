#pragma once

// Numerical falsification harnesses for the bound's ingredients. Each check
// returns a CheckReport; passed is true exactly when violations == 0.
// worst_slack is the smallest (allowed side - tested side) seen, so a
// negative value marks the worst violation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pacm/distributions.hpp"
#include "pacm/errors.hpp"
#include "pacm/numerics.hpp"
#include "pacm/objectives.hpp"
#include "pacm/random.hpp"

namespace pacm {

struct CheckReport {
  std::string name;
  std::size_t trials = 0;
  std::size_t violations = 0;
  double worst_slack = std::numeric_limits<double>::infinity();
  bool passed = true;
  std::string tolerance;  // human-readable gate
  std::vector<double> values;  // check-specific diagnostics (e.g. per-m means)

  // Record one comparison; slack >= -tol counts as satisfied.
  void record(double slack, double tol = 0.0) {
    ++trials;
    worst_slack = std::min(worst_slack, slack);
    if (!(slack >= -tol)) ++violations;
    passed = violations == 0;
  }
};

// ---------------------------------------------------------------------------
// monotone chain in m

// Draws an m x n log-likelihood matrix for m fresh posterior samples.
using LogLikSampler = std::function<Eigen::MatrixXd(Rng&, std::size_t m)>;

// The data term -(1/n) sum_i log mean_j p(x_i | theta_j), averaged over
// `replicates` fresh m-tuples, must not increase along m_list (3 pooled SE).
// At m = 2 and 3 each draw set is also checked exhaustively: the m-sample
// mean equals the average of its leave-one-out means, and by Jensen the
// m-sample data term is <= the average leave-one-out data term. At m = 1 the
// PAC^m and ELBO values must agree bit for bit on shared samples.
inline CheckReport check_monotone_chain(const LogLikSampler& draw, const std::vector<std::size_t>& m_list,
                                        std::size_t replicates, Rng& rng) {
  if (m_list.empty() || m_list.front() != 1) throw UsageError("check_monotone_chain: m_list must start at 1");
  for (std::size_t k = 1; k < m_list.size(); ++k)
    if (m_list[k] <= m_list[k - 1]) throw UsageError("check_monotone_chain: m_list must be ascending");
  if (replicates < 2) throw UsageError("check_monotone_chain: need at least 2 replicates");

  CheckReport rep;
  rep.name = "monotone_chain";
  rep.tolerance = "consecutive means within 3 pooled SE; leave-one-out identity 1e-12 relative; m=1 bit-exact";

  std::vector<MeanSe> stats;
  for (std::size_t m : m_list) {
    std::vector<double> terms(replicates);
    for (std::size_t r = 0; r < replicates; ++r) {
      const Eigen::MatrixXd llv = draw(rng, m);
      const LogLikMatrix ll(llv);
      terms[r] = mc_pred_term(ll);
      if (m == 1) {
        const BoundParams p = BoundParams::beta_nm(ll.n(), 1, 1.0);
        rep.record(pacm_loss(ll, 0.5, p) == elbo_loss(ll, 0.5, p) ? 0.0 : -1.0);
      }
      if (m == 2 || m == 3) {
        for (std::size_t i = 0; i < ll.n(); ++i) {
          const auto col = ll.column(i);
          double full = 0.0;
          for (double v : col) full += std::exp(v);
          full /= static_cast<double>(m);
          double loo_mean = 0.0;
          double loo_log = 0.0;
          for (std::size_t out = 0; out < m; ++out) {
            double s = 0.0;
            std::vector<double> rest;
            for (std::size_t j = 0; j < m; ++j)
              if (j != out) {
                s += std::exp(col[j]);
                rest.push_back(col[j]);
              }
            loo_mean += s / static_cast<double>(m - 1);
            loo_log += log_mean_exp(rest);
          }
          loo_mean /= static_cast<double>(m);
          loo_log /= static_cast<double>(m);
          const double scale = std::max(std::abs(full), std::numeric_limits<double>::min());
          rep.record(1e-12 - std::abs(full - loo_mean) / scale);
          rep.record(log_mean_exp(col) - loo_log, 1e-12);
        }
      }
    }
    stats.push_back(mean_and_se(terms));
    rep.values.push_back(stats.back().mean);
  }
  for (std::size_t k = 1; k < stats.size(); ++k) {
    const double pooled = std::sqrt(stats[k].se * stats[k].se + stats[k - 1].se * stats[k - 1].se);
    rep.record(stats[k - 1].mean - stats[k].mean + 3.0 * pooled);
  }
  return rep;
}

// Location model with a Normal1D posterior: ll(j, i) = log N(x_i; theta_j, s).
inline CheckReport check_monotone_chain(const Normal1D& post, std::span<const double> data, double model_scale,
                                        const std::vector<std::size_t>& m_list, std::size_t replicates, Rng& rng) {
  const std::vector<double> xs(data.begin(), data.end());
  LogLikSampler draw = [post, xs, model_scale](Rng& r, std::size_t m) {
    Eigen::MatrixXd ll(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(xs.size()));
    for (std::size_t j = 0; j < m; ++j) {
      const double th = r.normal(post.loc, post.scale);
      for (std::size_t i = 0; i < xs.size(); ++i)
        ll(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = normal_log_pdf(xs[i], th, model_scale);
    }
    return ll;
  };
  return check_monotone_chain(draw, m_list, replicates, rng);
}

// ---------------------------------------------------------------------------
// lemma suite

namespace detail {
inline std::vector<double> random_simplex(Rng& rng, std::size_t k) {
  std::vector<double> p(k);
  double s = 0.0;
  for (double& v : p) {
    v = -std::log(1.0 - rng.uniform());  // Exp(1) gives a uniform simplex draw
    s += v;
  }
  for (double& v : p) v /= s;
  return p;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t k, double scale) {
  std::vector<double> v(k);
  for (double& x : v) x = scale * rng.normal();
  return v;
}
}  // namespace detail

inline CheckReport check_compression(Rng& rng, std::size_t trials) {
  CheckReport rep;
  rep.name = "compression";
  rep.tolerance = "E_p f <= KL[p, r] + log E_r exp f, 1e-12";
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t k = 2 + rng.index(5);
    const auto p = detail::random_simplex(rng, k);
    const auto r = t == 0 ? p : detail::random_simplex(rng, k);
    const auto f = t == 0 ? std::vector<double>(k, 0.0) : detail::random_vector(rng, k, 3.0);
    double ep = 0.0;
    std::vector<double> lr(k);
    for (std::size_t i = 0; i < k; ++i) {
      ep += p[i] * f[i];
      lr[i] = std::log(r[i]) + f[i];
    }
    rep.record(kl_discrete(p, r) + log_sum_exp(lr) - ep, 1e-12);
  }
  return rep;
}

inline CheckReport check_gibbs(Rng& rng, std::size_t trials) {
  CheckReport rep;
  rep.name = "gibbs";
  rep.tolerance = "KL[p, q] >= 0, 1e-12; KL[p, p] == 0";
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t k = 2 + rng.index(5);
    const auto p = detail::random_simplex(rng, k);
    const auto q = detail::random_simplex(rng, k);
    rep.record(kl_discrete(p, q), 1e-12);
    rep.record(kl_discrete(p, p) == 0.0 ? 0.0 : -1.0);
  }
  return rep;
}

// P(log Z <= log E Z - log xi) >= 1 - xi for positive Z, tested for
// exponential and log-normal Z with known means at several xi.
inline CheckReport check_log_markov(Rng& rng, std::size_t trials) {
  CheckReport rep;
  rep.name = "log_markov";
  rep.tolerance = "empirical coverage >= 1 - xi - 3 binomial SE";
  const double xis[] = {0.05, 0.1, 0.25, 0.5, 0.9, 1.0};
  const std::size_t draws = std::max<std::size_t>(trials, 100000);
  for (int family = 0; family < 2; ++family) {
    for (double xi : xis) {
      std::size_t hits = 0;
      for (std::size_t t = 0; t < draws; ++t) {
        double z = 0.0;
        double log_mean = 0.0;
        if (family == 0) {
          z = -std::log(1.0 - rng.uniform()) * 2.0;  // Exp with mean 2
          log_mean = std::log(2.0);
        } else {
          z = std::exp(rng.normal(0.0, 1.5));
          log_mean = 0.5 * 1.5 * 1.5;
        }
        if (std::log(z) <= log_mean - std::log(xi)) ++hits;
      }
      const double cover = static_cast<double>(hits) / static_cast<double>(draws);
      const double se = std::sqrt(xi * (1.0 - xi) / static_cast<double>(draws));
      rep.record(cover - (1.0 - xi) + 3.0 * se);
    }
  }
  rep.trials = draws * 2 * std::size(xis);
  return rep;
}

// KL between m-fold tiled mean-field Gaussians equals m times the base KL.
inline CheckReport check_kl_iid(Rng& rng, std::size_t trials) {
  CheckReport rep;
  rep.name = "kl_iid";
  rep.tolerance = "|KL[q^m, r^m] - m KL[q, r]| <= 1e-12 max(1, |m KL|)";
  for (std::size_t t = 0; t < trials; ++t) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.index(5));
    const std::size_t m = 1 + rng.index(8);
    auto randvec = [&](double scale) {
      Eigen::VectorXd v(d);
      for (Eigen::Index i = 0; i < d; ++i) v[i] = scale * rng.normal();
      return v;
    };
    const MeanFieldGaussian q(randvec(1.0), randvec(0.5));
    const MeanFieldGaussian r(randvec(1.0), randvec(0.5));
    const auto md = static_cast<Eigen::Index>(m) * d;
    MeanFieldGaussian qm{Eigen::VectorXd(md), Eigen::VectorXd(md)};
    MeanFieldGaussian rm{Eigen::VectorXd(md), Eigen::VectorXd(md)};
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(m); ++j) {
      qm.locs.segment(j * d, d) = q.locs;
      qm.raw_scales.segment(j * d, d) = q.raw_scales;
      rm.locs.segment(j * d, d) = r.locs;
      rm.raw_scales.segment(j * d, d) = r.raw_scales;
    }
    const double expect = kl_iid(q, r, m);
    rep.record(1e-12 * std::max(1.0, std::abs(expect)) - std::abs(kl_divergence(qm, rm) - expect));
  }
  return rep;
}

// psi with xi = 1 on the toy model is >= 0, gated at -3 SE.
inline CheckReport check_psi_nonneg(Rng& rng, std::size_t trials) {
  CheckReport rep;
  rep.name = "psi_nonneg";
  rep.tolerance = "psi_mc(xi=1) >= -3 SE";
  const MixtureNormal1D nu({0.3, 0.7}, {-2.0, 2.0}, {1.0, 1.0});
  const Normal1D prior(0.0, 3.0);
  for (std::size_t m : {1u, 2u, 4u}) {
    for (double beta : {0.1, 1.0}) {
      BoundParams p = BoundParams::beta_nm(5, m, beta);
      const PsiEstimate est = psi_mc(nu, prior, 1.0, p, trials, rng);
      rep.record(est.value + 3.0 * est.se);
      rep.values.push_back(est.value);
    }
  }
  rep.trials = trials * rep.values.size();  // Monte-Carlo draws behind the six estimates
  return rep;
}

// Both log-average-exp bounds on random vectors, phi in {0, .25, .5, .75, 1}.
inline CheckReport check_log_avg_exp_parametric(Rng& rng, std::size_t trials) {
  CheckReport rep;
  rep.name = "log_avg_exp_parametric";
  rep.tolerance = "-lme(x) <= -(1/phi) lme(phi x) (mean at phi=0), 1e-12";
  for (std::size_t t = 0; t < trials; ++t) {
    const auto x = detail::random_vector(rng, 1 + rng.index(20), 5.0);
    const double lme = log_mean_exp(x);
    for (double phi : {0.0, 0.25, 0.5, 0.75, 1.0})
      rep.record(lme - log_avg_exp_tempered(x, phi), 1e-12);
  }
  return rep;
}

inline CheckReport check_log_avg_exp_simple(Rng& rng, std::size_t trials) {
  CheckReport rep;
  rep.name = "log_avg_exp_simple";
  rep.tolerance = "max(mean, max - log n) <= lme <= max, 1e-12";
  for (std::size_t t = 0; t < trials; ++t) {
    const auto x = detail::random_vector(rng, 1 + rng.index(20), 5.0);
    const double lme = log_mean_exp(x);
    const double mx = *std::max_element(x.begin(), x.end());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    const double lower = std::max(mean, mx - std::log(static_cast<double>(x.size())));
    rep.record(lme - lower, 1e-12);
    rep.record(mx - lme, 1e-12);
  }
  return rep;
}

inline std::vector<CheckReport> check_inequality_lemmas(Rng& rng, std::size_t trials) {
  if (trials < 100) throw UsageError("check_inequality_lemmas: trials must be >= 100");
  std::vector<CheckReport> out;
  Rng r1 = rng.split(), r2 = rng.split(), r3 = rng.split(), r4 = rng.split(), r5 = rng.split(), r6 = rng.split(),
      r7 = rng.split();
  out.push_back(check_compression(r1, trials));
  out.push_back(check_log_markov(r2, trials));
  out.push_back(check_kl_iid(r3, trials));
  out.push_back(check_gibbs(r4, trials));
  out.push_back(check_psi_nonneg(r5, trials));
  out.push_back(check_log_avg_exp_parametric(r6, trials));
  out.push_back(check_log_avg_exp_simple(r7, trials));
  return out;
}

// ---------------------------------------------------------------------------
// lambda star

// For each m > 1, scan psi_upper_bound over 1e4 log-spaced lambda in
// [1e-2, 1e2] x lambda_star with s = sqrt(2)/beta and xi = 1. The scan
// minimum must sit within one grid cell of lambda_star and the scanned
// values must be discretely convex. m = 1 only checks the constant.
inline CheckReport check_lambda_star(std::size_t n, double beta, const std::vector<std::size_t>& m_list) {
  if (n < 1 || !(beta > 0.0)) throw UsageError("check_lambda_star: need n >= 1 and beta > 0");
  CheckReport rep;
  rep.name = "lambda_star";
  rep.tolerance = "argmin within one log-grid cell; second differences >= -1e-9";
  constexpr std::size_t kPoints = 10000;
  const double s = std::sqrt(2.0) / beta;
  for (std::size_t m : m_list) {
    const double ls = lambda_star(n, beta, m);
    rep.values.push_back(ls);
    if (m <= 1) {
      const double expect = static_cast<double>(n) * beta * std::sqrt(std::log(2.0));
      rep.record(1e-12 * expect - std::abs(ls - expect));
      continue;
    }
    const double lo = std::log(1e-2 * ls);
    const double hi = std::log(1e2 * ls);
    const double dt = (hi - lo) / static_cast<double>(kPoints - 1);
    std::vector<double> f(kPoints);
    for (std::size_t k = 0; k < kPoints; ++k)
      f[k] = psi_upper_bound(std::exp(lo + dt * static_cast<double>(k)), s, n, m, 1.0);
    const auto best = static_cast<std::size_t>(std::min_element(f.begin(), f.end()) - f.begin());
    const double t_best = lo + dt * static_cast<double>(best);
    rep.record(dt - std::abs(t_best - std::log(ls)));
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k + 1 < kPoints; ++k) worst = std::min(worst, f[k + 1] - 2.0 * f[k] + f[k - 1]);
    rep.record(worst, 1e-9);
  }
  return rep;
}

}  // namespace pacm
