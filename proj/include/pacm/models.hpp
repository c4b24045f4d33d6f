#pragma once

// MLP likelihood networks, variational posteriors over their flat weight
// vector, reparameterized sampling, and first-order optimizers.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "pacm/autodiff.hpp"
#include "pacm/distributions.hpp"
#include "pacm/errors.hpp"
#include "pacm/numerics.hpp"
#include "pacm/random.hpp"

namespace pacm {

enum class Activation { tanh, elu };

struct MlpArch {
  std::vector<Eigen::Index> layer_widths;  // input, hidden..., output
  Activation activation = Activation::tanh;

  MlpArch(std::vector<Eigen::Index> widths, Activation act) : layer_widths(std::move(widths)), activation(act) {
    if (layer_widths.size() < 2) throw UsageError("MlpArch: need at least input and output widths");
    for (auto w : layer_widths)
      if (w < 1) throw UsageError("MlpArch: widths must be >= 1");
  }

  std::size_t layers() const { return layer_widths.size() - 1; }
  Eigen::Index input_width() const { return layer_widths.front(); }
  Eigen::Index output_width() const { return layer_widths.back(); }

  // Sum over layers of in*out weights + out biases.
  Eigen::Index param_count() const {
    Eigen::Index d = 0;
    for (std::size_t l = 0; l < layers(); ++l) d += layer_widths[l] * layer_widths[l + 1] + layer_widths[l + 1];
    return d;
  }
};

// Dense forward pass. The parameters for one network are read row-major from
// `params` starting at flat offset `offset`: per layer an in x out weight
// block (row-major) followed by out biases. x is batch x in; the result is
// batch x out. Activation on all but the last layer.
inline ad::Var mlp_forward(const ad::Var& params, Eigen::Index offset, const MlpArch& arch, const ad::Var& x) {
  if (offset + arch.param_count() > params.value().size())
    throw UsageError("mlp_forward: parameter vector too short for architecture");
  if (x.cols() != arch.input_width()) throw UsageError("mlp_forward: input width mismatch");
  ad::Var h = x;
  Eigen::Index off = offset;
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    const Eigen::Index in = arch.layer_widths[l];
    const Eigen::Index out = arch.layer_widths[l + 1];
    ad::Var w = ad::reshape(params, off, in, out);
    off += in * out;
    ad::Var b = ad::reshape(params, off, 1, out);
    off += out;
    h = ad::matmul(h, w) + b;
    if (l + 1 < arch.layers()) h = arch.activation == Activation::tanh ? ad::tanh(h) : ad::elu(h);
  }
  return h;
}

inline ad::Var mlp_forward(const ad::Var& params, const MlpArch& arch, const ad::Var& x) {
  if (params.value().size() != arch.param_count()) throw UsageError("mlp_forward: parameter count mismatch");
  return mlp_forward(params, 0, arch, x);
}

// Plain-value forward pass with the same parameter layout as mlp_forward.
inline Eigen::MatrixXd mlp_apply(const Eigen::Ref<const Eigen::VectorXd>& theta, const MlpArch& arch,
                                 const Eigen::MatrixXd& x) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (theta.size() != arch.param_count()) throw UsageError("mlp_apply: parameter count mismatch");
  if (x.cols() != arch.input_width()) throw UsageError("mlp_apply: input width mismatch");
  const Eigen::VectorXd flat = theta;  // contiguous copy
  Eigen::MatrixXd h = x;
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    const Eigen::Index in = arch.layer_widths[l];
    const Eigen::Index out = arch.layer_widths[l + 1];
    const Eigen::Map<const RowMajor> w(flat.data() + off, in, out);
    off += in * out;
    const Eigen::Map<const Eigen::RowVectorXd> b(flat.data() + off, out);
    off += out;
    Eigen::MatrixXd z = h * w;
    z.rowwise() += b;
    if (l + 1 < arch.layers()) {
      if (arch.activation == Activation::tanh)
        z = z.array().tanh().matrix();
      else
        z = z.unaryExpr([](double v) { return v > 0.0 ? v : std::expm1(v); });
    }
    h = std::move(z);
  }
  return h;
}

// Mean-field Gaussian, or a fixed-weight mixture of mean-field Gaussians
// sampled with stratification.
struct VariationalPosterior {
  enum class Kind { mean_field, mixture };

  Kind kind = Kind::mean_field;
  std::vector<MeanFieldGaussian> components;
  std::vector<double> component_probs;

  static VariationalPosterior mean_field(MeanFieldGaussian c) {
    VariationalPosterior p;
    p.kind = Kind::mean_field;
    p.components.push_back(std::move(c));
    p.component_probs = {1.0};
    return p;
  }

  static VariationalPosterior mixture(std::vector<MeanFieldGaussian> cs) {
    if (cs.empty()) throw UsageError("VariationalPosterior: empty mixture");
    VariationalPosterior p;
    p.kind = Kind::mixture;
    p.component_probs.assign(cs.size(), 1.0 / static_cast<double>(cs.size()));
    p.components = std::move(cs);
    return p;
  }

  std::size_t num_components() const { return components.size(); }
  Eigen::Index dim() const { return components.front().dim(); }

  // Trainable parameters packed as [loc_0, raw_0, loc_1, raw_1, ...].
  Eigen::VectorXd pack() const {
    const Eigen::Index d = dim();
    Eigen::VectorXd v(2 * d * static_cast<Eigen::Index>(components.size()));
    for (std::size_t k = 0; k < components.size(); ++k) {
      const auto base = static_cast<Eigen::Index>(2 * k) * d;
      v.segment(base, d) = components[k].locs;
      v.segment(base + d, d) = components[k].raw_scales;
    }
    return v;
  }

  void unpack(const Eigen::VectorXd& v) {
    const Eigen::Index d = dim();
    if (v.size() != 2 * d * static_cast<Eigen::Index>(components.size()))
      throw UsageError("VariationalPosterior::unpack: size mismatch");
    for (std::size_t k = 0; k < components.size(); ++k) {
      const auto base = static_cast<Eigen::Index>(2 * k) * d;
      components[k].locs = v.segment(base, d);
      components[k].raw_scales = v.segment(base + d, d);
    }
  }

  void validate() const {
    if (components.empty()) throw UsageError("VariationalPosterior: no components");
    if (kind == Kind::mean_field && components.size() != 1)
      throw UsageError("VariationalPosterior: mean-field kind needs exactly one component");
    for (const auto& c : components) {
      if (c.dim() != dim()) throw UsageError("VariationalPosterior: component dimensions differ");
      if (!c.raw_scales.allFinite() || !c.scales().allFinite())
        throw UsageError("VariationalPosterior: non-finite scale");
    }
  }
};

// Leaves for the posterior parameters on a tape, one 1 x d row per loc and
// raw-scale vector.
struct PosteriorVars {
  std::vector<ad::Var> locs;
  std::vector<ad::Var> raws;

  std::vector<ad::Var> all() const {
    std::vector<ad::Var> v;
    for (std::size_t k = 0; k < locs.size(); ++k) {
      v.push_back(locs[k]);
      v.push_back(raws[k]);
    }
    return v;
  }

  // Gradient in VariationalPosterior::pack() order.
  Eigen::VectorXd packed_grad(ad::Tape& tape, const ad::Var& output) const {
    const auto vars = all();
    const auto gs = tape.grad(output, std::span<const ad::Var>(vars));
    const Eigen::Index d = locs.front().cols();
    Eigen::VectorXd g(d * static_cast<Eigen::Index>(gs.size()));
    for (std::size_t k = 0; k < gs.size(); ++k)
      g.segment(static_cast<Eigen::Index>(k) * d, d) = Eigen::Map<const Eigen::VectorXd>(gs[k].data(), d);
    return g;
  }
};

inline PosteriorVars bind(const VariationalPosterior& post, ad::Tape& tape) {
  PosteriorVars v;
  for (const auto& c : post.components) {
    v.locs.push_back(tape.variable(c.locs.transpose()));
    v.raws.push_back(tape.variable(c.raw_scales.transpose()));
  }
  return v;
}

// Standard-normal noise for m draws (m x d). For mixtures m must be divisible
// by the component count; rows [k m/K, (k+1) m/K) belong to component k.
inline Eigen::MatrixXd draw_noise(const VariationalPosterior& post, Rng& rng, std::size_t m) {
  if (m < 1) throw UsageError("posterior_sample: m must be >= 1");
  if (m % post.num_components() != 0)
    throw UsageError("posterior_sample: m must be divisible by the number of mixture components");
  Eigen::MatrixXd eps(static_cast<Eigen::Index>(m), post.dim());
  for (Eigen::Index r = 0; r < eps.rows(); ++r)
    for (Eigen::Index c = 0; c < eps.cols(); ++c) eps(r, c) = rng.normal();
  return eps;
}

struct PosteriorSample {
  ad::Var theta;      // m x d
  ad::Var log_q;      // m x 1, under the full posterior density
  ad::Var log_r;      // m x 1, under the prior
  ad::Var log_ratio;  // log_q - log_r
};

namespace detail {
// Row-wise sum of log Normal(theta; loc, exp(raw)) over coordinates (m x 1).
inline ad::Var mean_field_log_density(const ad::Var& theta, const ad::Var& loc, const ad::Var& raw) {
  ad::Var z = (theta - loc) * ad::exp(-raw);
  ad::Var per = -0.5 * ad::square(z) - raw;
  return ad::sum(per, 1) - 0.5 * kLog2Pi * static_cast<double>(theta.cols());
}
}  // namespace detail

// Reparameterized draws theta = loc + exp(raw) * eps with the given noise.
inline PosteriorSample reparameterize(const VariationalPosterior& post, const PosteriorVars& vars,
                                      const MeanFieldGaussian& prior, const Eigen::MatrixXd& eps) {
  ad::Tape& tape = *vars.locs.front().tape();
  const std::size_t K = post.num_components();
  const auto m = static_cast<std::size_t>(eps.rows());
  if (m % K != 0) throw UsageError("posterior_sample: m must be divisible by the number of mixture components");
  if (eps.cols() != post.dim() || prior.dim() != post.dim()) throw UsageError("posterior_sample: dimension mismatch");
  const auto per = static_cast<Eigen::Index>(m / K);

  std::vector<ad::Var> blocks;
  for (std::size_t k = 0; k < K; ++k) {
    ad::Var e = tape.constant(eps.middleRows(static_cast<Eigen::Index>(k) * per, per));
    blocks.push_back(vars.locs[k] + ad::exp(vars.raws[k]) * e);
  }
  ad::Var theta = K == 1 ? blocks.front() : ad::concat(std::span<const ad::Var>(blocks), 0);

  ad::Var log_q;
  if (K == 1) {
    log_q = detail::mean_field_log_density(theta, vars.locs[0], vars.raws[0]);
  } else {
    std::vector<ad::Var> comps;
    for (std::size_t k = 0; k < K; ++k)
      comps.push_back(detail::mean_field_log_density(theta, vars.locs[k], vars.raws[k]) +
                      std::log(post.component_probs[k]));
    log_q = ad::log_sum_exp(ad::concat(std::span<const ad::Var>(comps), 1), 1);
  }
  ad::Var ploc = tape.constant(prior.locs.transpose());
  ad::Var praw = tape.constant(prior.raw_scales.transpose());
  ad::Var log_r = detail::mean_field_log_density(theta, ploc, praw);
  return {theta, log_q, log_r, log_q - log_r};
}

inline PosteriorSample posterior_sample(const VariationalPosterior& post, const PosteriorVars& vars,
                                        const MeanFieldGaussian& prior, Rng& rng, std::size_t m) {
  return reparameterize(post, vars, prior, draw_noise(post, rng, m));
}

// Plain (non-differentiable) draws, m x d, stratified across components.
inline Eigen::MatrixXd posterior_draws(const VariationalPosterior& post, Rng& rng, std::size_t m) {
  const Eigen::MatrixXd eps = draw_noise(post, rng, m);
  const auto per = static_cast<Eigen::Index>(m / post.num_components());
  Eigen::MatrixXd theta(eps.rows(), eps.cols());
  for (std::size_t k = 0; k < post.num_components(); ++k) {
    const auto& c = post.components[k];
    const Eigen::RowVectorXd s = c.scales().transpose();
    for (Eigen::Index r = 0; r < per; ++r) {
      const Eigen::Index row = static_cast<Eigen::Index>(k) * per + r;
      theta.row(row) = c.locs.transpose() + (s.array() * eps.row(row).array()).matrix();
    }
  }
  return theta;
}

// ---------------------------------------------------------------------------
// initialization

struct InitResult {
  VariationalPosterior posterior;
  MeanFieldGaussian prior;
};

// Posterior locs 0 and scales 1; prior standard normal. Mixture components
// get uniform(-jitter, jitter) location offsets so they can separate.
inline InitResult init_params(const MlpArch& arch, Rng& rng, std::size_t components = 1, double jitter = 0.1) {
  const Eigen::Index d = arch.param_count();
  InitResult r;
  r.prior = MeanFieldGaussian::standard(d);
  if (components <= 1) {
    r.posterior = VariationalPosterior::mean_field(MeanFieldGaussian::standard(d));
    return r;
  }
  std::vector<MeanFieldGaussian> cs;
  for (std::size_t k = 0; k < components; ++k) {
    MeanFieldGaussian c = MeanFieldGaussian::standard(d);
    for (Eigen::Index i = 0; i < d; ++i) c.locs[i] = jitter * (2.0 * rng.uniform() - 1.0);
    cs.push_back(std::move(c));
  }
  r.posterior = VariationalPosterior::mixture(std::move(cs));
  return r;
}

// ---------------------------------------------------------------------------
// optimizers

struct OptimizerState {
  enum class Kind { adam, adagrad };

  Kind kind = Kind::adam;
  std::size_t step = 0;
  double lr0 = 0.01;
  double decay_rate = 1.0;
  double decay_steps = 1.0;
  Eigen::VectorXd first;   // adam first moment
  Eigen::VectorXd second;  // adam second moment / adagrad accumulator

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  static OptimizerState adam(double lr0, double decay_rate = 1.0, double decay_steps = 1.0) {
    OptimizerState s;
    s.kind = Kind::adam;
    s.lr0 = lr0;
    s.decay_rate = decay_rate;
    s.decay_steps = decay_steps;
    return s;
  }
  static OptimizerState adagrad(double lr0) {
    OptimizerState s;
    s.kind = Kind::adagrad;
    s.lr0 = lr0;
    return s;
  }

  // lr0 * decay_rate^(t / decay_steps), t = completed steps.
  double learning_rate() const {
    return lr0 * std::pow(decay_rate, static_cast<double>(step) / decay_steps);
  }
};

// One update in place. Returns the applied update (new - old).
inline Eigen::VectorXd optimizer_step(OptimizerState& s, Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
  if (params.size() != grads.size()) throw UsageError("optimizer_step: params/grads size mismatch");
  if (grads.hasNaN()) throw NumericalError("optimizer_step: NaN gradient");
  if (s.first.size() == 0) {
    s.first = Eigen::VectorXd::Zero(params.size());
    s.second = Eigen::VectorXd::Zero(params.size());
  }
  if (s.second.size() != params.size()) throw UsageError("optimizer_step: state does not match parameters");
  const double lr = s.learning_rate();
  Eigen::VectorXd update;
  if (s.kind == OptimizerState::Kind::adam) {
    ++s.step;
    const double t = static_cast<double>(s.step);
    s.first = OptimizerState::kBeta1 * s.first + (1.0 - OptimizerState::kBeta1) * grads;
    s.second = OptimizerState::kBeta2 * s.second + (1.0 - OptimizerState::kBeta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(OptimizerState::kBeta1, t);
    const double c2 = 1.0 - std::pow(OptimizerState::kBeta2, t);
    update = -lr * ((s.first / c1).array() / ((s.second / c2).array().sqrt() + OptimizerState::kEps)).matrix();
  } else {
    ++s.step;
    s.second += grads.cwiseAbs2();
    update = -lr * (grads.array() / (s.second.array().sqrt() + OptimizerState::kEps)).matrix();
  }
  params += update;
  return update;
}

}  // namespace pacm
