#pragma once

// Differentiable training losses. Each takes the m x n log-likelihood node
// ll (row j = posterior draw, column i = datum) and a scalar KL estimate.

#include "pacm/autodiff.hpp"
#include "pacm/objectives.hpp"

namespace pacm {

enum class LossKind { elbo, pacm, pac2t, iwae };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::elbo: return "elbo";
    case LossKind::pacm: return "pacm";
    case LossKind::pac2t: return "pac2t";
    case LossKind::iwae: return "iwae";
  }
  return "?";
}

inline LossKind parse_loss(const std::string& s) {
  if (s == "elbo") return LossKind::elbo;
  if (s == "pacm") return LossKind::pacm;
  if (s == "pac2t") return LossKind::pac2t;
  if (s == "iwae") return LossKind::iwae;
  throw UsageError("unknown loss '" + s + "'");
}

// Loss value split into its data and KL parts (both already scaled).
struct LossTerms {
  ad::Var total;
  ad::Var data;
  ad::Var kl_term;
};

inline LossTerms elbo_loss(const ad::Var& ll, const ad::Var& kl, const BoundParams& p) {
  p.validate();
  ad::Var data = -ad::mean(ll);
  ad::Var kt = kl / (p.beta * static_cast<double>(p.n));
  return {data + kt, data, kt};
}

inline LossTerms pacm_loss(const ad::Var& ll, const ad::Var& kl, const BoundParams& p) {
  detail::require_lambda(p, "pacm_loss");
  ad::Var data = -ad::mean(ad::log_mean_exp(ll, 0));
  ad::Var kt = (kl * static_cast<double>(p.m)) / p.lambda;
  return {data + kt, data, kt};
}

// Sample-variance term. The centering offset and the h weights are frozen.
inline ad::Var pac2t_variance(const ad::Var& ll, double smoothing) {
  if (!(smoothing > 0.0)) throw UsageError("pac2t: smoothing must be > 0");
  ad::Var lmx = ad::stop_gradient(ad::max(ll, 0) + smoothing);
  ad::Var centered = ll - lmx;
  ad::Var al = ad::log_mean_exp(centered, 0);
  ad::Var e_al = ad::exp(al);
  ad::Var one_minus = 1.0 - e_al;
  ad::Var h = 2.0 * ad::stop_gradient(al / ad::square(one_minus) + 1.0 / (e_al * one_minus));
  ad::Var ec = ad::exp(centered);
  ad::Var var1 = h * ad::exp(2.0 * centered);
  // mean over the first sample axis of h e^{c_j + c_k} = h e^{c_k} mean_j e^{c_j}
  ad::Var var2 = h * ec * ad::mean(ec, 0);
  return ad::mean(var1 - var2);
}

inline LossTerms pac2t_loss(const ad::Var& ll, const ad::Var& kl, const BoundParams& p, double smoothing = 0.1) {
  if (!(smoothing > 0.0)) throw UsageError("pac2t_loss: smoothing must be > 0");
  LossTerms e = elbo_loss(ll, kl, p);
  if (ll.rows() < 2) return e;
  ad::Var data = e.data - pac2t_variance(ll, smoothing);
  return {data + e.kl_term, data, e.kl_term};
}

// log_weight is m x 1 (one weight per draw, shared across data) or m x n.
inline LossTerms iwae_loss(const ad::Var& ll, const ad::Var& log_weight) {
  ad::Var data = -ad::mean(ad::log_mean_exp(ll + log_weight, 0));
  ad::Var zero = ll.tape()->constant(0.0);
  return {data, data, zero};
}

}  // namespace pacm
