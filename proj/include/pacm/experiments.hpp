#pragma once

// Regression experiments: data generators with known truth, training of a
// Bayesian MLP under each loss, evaluation against the truth, and report
// emission.

#include <Eigen/Dense>
#include <json.hpp>
#include <malloc.h>

#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <system_error>
#include <vector>

#include "pacm/autodiff.hpp"
#include "pacm/distributions.hpp"
#include "pacm/errors.hpp"
#include "pacm/losses.hpp"
#include "pacm/models.hpp"
#include "pacm/numerics.hpp"
#include "pacm/objectives.hpp"
#include "pacm/random.hpp"
#include "pacm/toy_solver.hpp"

namespace pacm {

enum class ExperimentKind { toy, sinusoid, mixture, mixture_multimodal, mixture_wellspec, verify };
enum class LambdaMode { beta_nm, lambda_star, explicit_value };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::toy: return "toy";
    case ExperimentKind::sinusoid: return "sinusoid";
    case ExperimentKind::mixture: return "mixture";
    case ExperimentKind::mixture_multimodal: return "mixture-multimodal";
    case ExperimentKind::mixture_wellspec: return "mixture-wellspec";
    case ExperimentKind::verify: return "verify";
  }
  return "?";
}

inline ExperimentKind parse_experiment(const std::string& s) {
  for (auto k : {ExperimentKind::toy, ExperimentKind::sinusoid, ExperimentKind::mixture,
                 ExperimentKind::mixture_multimodal, ExperimentKind::mixture_wellspec, ExperimentKind::verify})
    if (s == to_string(k)) return k;
  throw UsageError("unknown experiment '" + s + "'");
}

inline const char* to_string(LambdaMode m) {
  switch (m) {
    case LambdaMode::beta_nm: return "beta-nm";
    case LambdaMode::lambda_star: return "lambda-star";
    case LambdaMode::explicit_value: return "explicit";
  }
  return "?";
}

inline LambdaMode parse_lambda_mode(const std::string& s) {
  if (s == "beta-nm") return LambdaMode::beta_nm;
  if (s == "lambda-star") return LambdaMode::lambda_star;
  if (s == "explicit") return LambdaMode::explicit_value;
  throw UsageError("unknown lambda mode '" + s + "'");
}

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::sinusoid;
  LossKind loss = LossKind::pacm;
  std::size_t m = 16;
  double beta = 1.0;
  LambdaMode lambda_mode = LambdaMode::beta_nm;
  double lambda = 0.0;  // used when lambda_mode is explicit
  std::uint64_t seed = 0;
  std::size_t n_train = 1000;
  std::size_t steps = 20000;
  double lr0 = 0.01;
  double decay_rate = 1.0;
  std::size_t decay_steps = 100000;
  std::size_t eval_samples = 500;
  std::string out_dir;
  std::size_t log_every = 100;

  // Desk-scale defaults for an experiment.
  static ExperimentConfig defaults(ExperimentKind k) {
    ExperimentConfig c;
    c.experiment = k;
    switch (k) {
      case ExperimentKind::toy:
        c.n_train = 5;
        break;
      case ExperimentKind::mixture:
      case ExperimentKind::mixture_multimodal:
      case ExperimentKind::mixture_wellspec:
        c.steps = 30000;
        c.decay_rate = 0.5;
        break;
      default:
        break;
    }
    return c;
  }

  std::size_t posterior_components() const { return experiment == ExperimentKind::mixture_multimodal ? 2 : 1; }

  void validate() const {
    if (m < 1 || n_train < 1 || steps < 1 || eval_samples < 1 || decay_steps < 1 || log_every < 1)
      throw UsageError("ExperimentConfig: counts must be >= 1");
    if (!(beta > 0.0)) throw UsageError("ExperimentConfig: beta must be > 0");
    if (!(lr0 > 0.0)) throw UsageError("ExperimentConfig: lr0 must be > 0");
    if (!(decay_rate > 0.0)) throw UsageError("ExperimentConfig: decay_rate must be > 0");
    if (lambda_mode == LambdaMode::explicit_value && !(lambda > 0.0))
      throw UsageError("ExperimentConfig: explicit lambda must be > 0");
    const std::size_t k = posterior_components();
    if (m % k != 0 || eval_samples % k != 0)
      throw UsageError("ExperimentConfig: m and eval_samples must be divisible by the posterior component count");
  }

  BoundParams bound_params() const {
    BoundParams p = BoundParams::beta_nm(n_train, m, beta);
    if (lambda_mode == LambdaMode::lambda_star) p.lambda = lambda_star(n_train, beta, m);
    if (lambda_mode == LambdaMode::explicit_value) p.lambda = lambda;
    return p;
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"experiment", to_string(c.experiment)},
          {"loss", to_string(c.loss)},
          {"m", c.m},
          {"beta", c.beta},
          {"lambda_mode", to_string(c.lambda_mode)},
          {"lambda", c.lambda},
          {"seed", c.seed},
          {"n_train", c.n_train},
          {"steps", c.steps},
          {"lr0", c.lr0},
          {"decay_rate", c.decay_rate},
          {"decay_steps", c.decay_steps},
          {"eval_samples", c.eval_samples},
          {"out_dir", c.out_dir},
          {"log_every", c.log_every}};
}

// Overlay the fields present in a flat JSON object onto the experiment's
// defaults. Unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config: expected a JSON object");
  ExperimentConfig c =
      ExperimentConfig::defaults(parse_experiment(j.value("experiment", std::string("sinusoid"))));
  for (const auto& [key, v] : j.items()) {
    if (key == "experiment") continue;
    else if (key == "loss") c.loss = parse_loss(v.get<std::string>());
    else if (key == "m") c.m = v.get<std::size_t>();
    else if (key == "beta") c.beta = v.get<double>();
    else if (key == "lambda_mode") c.lambda_mode = parse_lambda_mode(v.get<std::string>());
    else if (key == "lambda") c.lambda = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "n_train") c.n_train = v.get<std::size_t>();
    else if (key == "steps") c.steps = v.get<std::size_t>();
    else if (key == "lr0") c.lr0 = v.get<double>();
    else if (key == "decay_rate") c.decay_rate = v.get<double>();
    else if (key == "decay_steps") c.decay_steps = v.get<std::size_t>();
    else if (key == "eval_samples") c.eval_samples = v.get<std::size_t>();
    else if (key == "out_dir") c.out_dir = v.get<std::string>();
    else if (key == "log_every") c.log_every = v.get<std::size_t>();
    else throw UsageError("config: unknown field '" + key + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// data

inline double sinusoid_mean(double x) { return 7.0 * std::sin(0.75 * x) + 0.5 * x; }

// Exact conditional density p*(y | x) of a generator.
struct GenerativeTruth {
  enum class Kind { sinusoid, mixture };
  Kind kind = Kind::sinusoid;

  static constexpr double kSinusoidNoise = 10.0;
  static constexpr double kMixtureNoise = 1.0;

  double mean(double x) const { return sinusoid_mean(x); }
  // Scale of the Normal components of p*(y | x).
  double scale() const { return kind == Kind::sinusoid ? kSinusoidNoise : kMixtureNoise; }

  double log_density(double y, double x) const {
    const double mu = mean(x);
    if (kind == Kind::sinusoid) return normal_log_pdf(y, mu, kSinusoidNoise);
    const double a = normal_log_pdf(y, mu, kMixtureNoise);
    const double b = normal_log_pdf(y, -mu, kMixtureNoise);
    const double hi = std::max(a, b);
    return hi + std::log(0.5 * (std::exp(a - hi) + std::exp(b - hi)));
  }

  // Probability mass of p*(. | x) outside [lo, hi].
  double mass_outside(double x, double lo, double hi) const {
    const double mu = mean(x);
    const double s = scale();
    auto tail = [&](double c) { return normal_cdf(lo, c, s) + (1.0 - normal_cdf(hi, c, s)); };
    return kind == Kind::sinusoid ? tail(mu) : 0.5 * (tail(mu) + tail(-mu));
  }

  // y-grid covering +-8 truth scales around every component.
  Grid1D y_grid(double x, std::size_t count = 1601) const {
    const double mu = mean(x);
    const double s = scale();
    if (kind == Kind::sinusoid) return Grid1D(mu - 8.0 * s, mu + 8.0 * s, count);
    return Grid1D(-std::abs(mu) - 8.0 * s, std::abs(mu) + 8.0 * s, count);
  }
};

struct Dataset {
  std::vector<double> x;  // empty for the unconditional toy
  std::vector<double> y;
  std::string generator_tag;
  std::uint64_t seed = 0;

  std::size_t size() const { return y.size(); }
};

inline std::vector<double> even_grid(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

struct GeneratedData {
  Dataset data;
  GenerativeTruth truth;
};

inline constexpr double kInputLo = -10.5;
inline constexpr double kInputHi = 10.5;

inline GeneratedData gen_dataset(ExperimentKind kind, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  GeneratedData g;
  g.data.seed = seed;
  g.data.generator_tag = to_string(kind);
  if (kind == ExperimentKind::toy) {
    const MixtureNormal1D nu({0.3, 0.7}, {-2.0, 2.0}, {1.0, 1.0});
    g.data.y = sample(nu, rng, n);
    return g;
  }
  if (kind == ExperimentKind::verify) throw UsageError("gen_dataset: verify has no dataset");
  g.data.x = even_grid(kInputLo, kInputHi, n);
  g.data.y.resize(n);
  if (kind == ExperimentKind::sinusoid) {
    g.truth.kind = GenerativeTruth::Kind::sinusoid;
    for (std::size_t i = 0; i < n; ++i)
      g.data.y[i] = sinusoid_mean(g.data.x[i]) + GenerativeTruth::kSinusoidNoise * rng.normal();
  } else {
    g.truth.kind = GenerativeTruth::Kind::mixture;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = rng.bernoulli(0.5) ? 1.0 : -1.0;
      g.data.y[i] = z * sinusoid_mean(g.data.x[i]) + GenerativeTruth::kMixtureNoise * rng.normal();
    }
  }
  return g;
}

inline GeneratedData gen_dataset(const ExperimentConfig& cfg) { return gen_dataset(cfg.experiment, cfg.n_train, cfg.seed); }

// ---------------------------------------------------------------------------
// model

// MLP plus likelihood head: Normal(y; f(x), 1), or for the well-specified
// variant 0.5 N(y; f1(x), 1) + 0.5 N(y; f2(x), 1).
struct RegressionModel {
  MlpArch arch{{1, 20, 1}, Activation::tanh};
  bool two_component = false;
  static constexpr double kNoise = 1.0;

  static RegressionModel for_experiment(ExperimentKind k) {
    RegressionModel m;
    switch (k) {
      case ExperimentKind::sinusoid:
        break;
      case ExperimentKind::mixture:
      case ExperimentKind::mixture_multimodal:
        m.arch = MlpArch({1, 20, 20, 1}, Activation::elu);
        break;
      case ExperimentKind::mixture_wellspec:
        m.arch = MlpArch({1, 20, 20, 2}, Activation::elu);
        m.two_component = true;
        break;
      default:
        throw UsageError("RegressionModel: no network for this experiment");
    }
    return m;
  }

  // out is batch x output_width; y is batch x 1; result batch x 1.
  ad::Var log_lik(const ad::Var& out, const ad::Var& y) const {
    const double c = -0.5 * kLog2Pi - std::log(kNoise);
    if (!two_component) return -0.5 * ad::square((y - out) / kNoise) + c;
    ad::Var comps = -0.5 * ad::square((y - out) / kNoise) + (c + std::log(0.5));
    return ad::log_sum_exp(comps, 1);
  }

  double log_lik(const Eigen::Ref<const Eigen::RowVectorXd>& out, double y) const {
    const double c = -0.5 * kLog2Pi - std::log(kNoise);
    if (!two_component) return c - 0.5 * std::pow((y - out[0]) / kNoise, 2);
    const double a = c - 0.5 * std::pow((y - out[0]) / kNoise, 2);
    const double b = c - 0.5 * std::pow((y - out[1]) / kNoise, 2);
    const double hi = std::max(a, b);
    return hi + std::log(0.5 * (std::exp(a - hi) + std::exp(b - hi)));
  }
};

inline Eigen::MatrixXd column(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// m x n log-likelihood node for posterior draws theta (m x d).
inline ad::Var log_lik_matrix(const RegressionModel& model, const ad::Var& theta, const ad::Var& x, const ad::Var& y) {
  const Eigen::Index d = model.arch.param_count();
  std::vector<ad::Var> rows;
  rows.reserve(static_cast<std::size_t>(theta.rows()));
  for (Eigen::Index j = 0; j < theta.rows(); ++j) {
    ad::Var out = mlp_forward(theta, j * d, model.arch, x);
    rows.push_back(ad::transpose(model.log_lik(out, y)));
  }
  return rows.size() == 1 ? rows.front() : ad::concat(std::span<const ad::Var>(rows), 0);
}

// ---------------------------------------------------------------------------
// training

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double data_term = 0.0;
  double kl_term = 0.0;
  double lr = 0.0;
};

struct TrainState {
  VariationalPosterior posterior;
  MeanFieldGaussian prior;
  std::vector<LogRow> trace;
  bool completed = false;
  std::string diagnostic;  // set when training aborted
};

inline LossTerms make_loss(const ExperimentConfig& cfg, const ad::Var& ll, const PosteriorSample& s) {
  const BoundParams p = cfg.bound_params();
  ad::Var kl = ad::mean(s.log_ratio);  // Monte-Carlo KL[q, r]
  switch (cfg.loss) {
    case LossKind::elbo: return elbo_loss(ll, kl, p);
    case LossKind::pacm: return pacm_loss(ll, kl, p);
    case LossKind::pac2t: return pac2t_loss(ll, kl, p);
    case LossKind::iwae: return iwae_loss(ll, -s.log_ratio);
  }
  throw UsageError("unknown loss");
}

inline nlohmann::json to_json(const VariationalPosterior& post) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : post.components) {
    comps.push_back({{"locs", std::vector<double>(c.locs.data(), c.locs.data() + c.locs.size())},
                     {"raw_scales", std::vector<double>(c.raw_scales.data(), c.raw_scales.data() + c.raw_scales.size())}});
  }
  return {{"kind", post.kind == VariationalPosterior::Kind::mean_field ? "mean_field" : "mixture"},
          {"component_probs", post.component_probs},
          {"components", comps}};
}

inline void write_text(const std::filesystem::path& p, const std::string& body) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
  f << body;
  if (!f) throw std::runtime_error("write failed for " + p.string());
}

// Optimizes the configured loss with fresh m-tuples each step. A NaN aborts
// training: the last good posterior is returned (and written to
// out_dir/posterior.json when out_dir is set) with a diagnostic.
inline TrainState train(const ExperimentConfig& cfg, const Dataset& train_data,
                        const std::function<void(const LogRow&)>& on_log = nullptr) {
  cfg.validate();
  const RegressionModel model = RegressionModel::for_experiment(cfg.experiment);
  Rng rng(cfg.seed);
  Rng init_rng = rng.split();
  InitResult init = init_params(model.arch, init_rng, cfg.posterior_components());
  TrainState st{init.posterior, init.prior, {}, false, {}};

  OptimizerState opt = OptimizerState::adam(cfg.lr0, cfg.decay_rate, static_cast<double>(cfg.decay_steps));
  Eigen::VectorXd params = st.posterior.pack();
  const Eigen::MatrixXd xv = column(train_data.x);
  const Eigen::MatrixXd yv = column(train_data.y);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    try {
      ad::Tape tape;
      const PosteriorVars vars = bind(st.posterior, tape);
      const PosteriorSample s = posterior_sample(st.posterior, vars, st.prior, rng, cfg.m);
      const ad::Var ll = log_lik_matrix(model, s.theta, tape.constant(xv), tape.constant(yv));
      const LossTerms loss = make_loss(cfg, ll, s);
      const double lr = opt.learning_rate();
      const Eigen::VectorXd g = vars.packed_grad(tape, loss.total);
      if (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
        LogRow row{step, loss.total.scalar(), loss.data.scalar(), loss.kl_term.scalar(), lr};
        st.trace.push_back(row);
        if (on_log) on_log(row);
      }
      Eigen::VectorXd next = params;
      optimizer_step(opt, next, g);
      if (!next.allFinite()) throw NumericalError("non-finite parameters after update");
      params = std::move(next);
      st.posterior.unpack(params);
    } catch (const NumericalError& e) {
      st.diagnostic = "step " + std::to_string(step) + ": " + e.what();
      if (!cfg.out_dir.empty())
        write_text(std::filesystem::path(cfg.out_dir) / "posterior.json", to_json(st.posterior).dump(2) + "\n");
      return st;
    }
  }
  st.completed = true;
  return st;
}

// ---------------------------------------------------------------------------
// evaluation

struct ProbePredictive {
  double x = 0.0;
  double truth_mean = 0.0;
  std::vector<double> y;
  std::vector<double> density;
  std::vector<double> truth_density;
  double kl = 0.0;
  double mean = 0.0;
  double stddev = 0.0;

  // Predictive mass within +-half_width of c (rectangle rule on the y-grid).
  double mass_near(double c, double half_width) const {
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k)
      if (std::abs(y[k] - c) <= half_width) s += density[k];
    return y.size() > 1 ? s * (y[1] - y[0]) : 0.0;
  }
};

struct Evaluation {
  double lpp = 0.0;          // nats per test point
  double kl_to_truth = 0.0;  // nats, mean over test x
  double kl_se = 0.0;
  std::vector<ProbePredictive> probes;
};

namespace detail {
// log of the Monte-Carlo predictive on a y-grid, given the network outputs
// for each posterior draw at one x (draws x output_width).
inline std::vector<double> log_predictive_on_grid(const RegressionModel& model, const Eigen::MatrixXd& outs,
                                                  const Grid1D& g) {
  const auto S = outs.rows();
  const auto G = static_cast<Eigen::Index>(g.count());
  const double log_s = std::log(static_cast<double>(S));
  Eigen::RowVectorXd ys(G);
  for (Eigen::Index k = 0; k < G; ++k) ys[k] = g.point(static_cast<std::size_t>(k));
  const double c = -0.5 * kLog2Pi - std::log(RegressionModel::kNoise);
  // ll(j, k) = log p(y_k | draw j)
  Eigen::MatrixXd ll(S, G);
  auto sq = [&](Eigen::Index col) {
    return (-0.5 * (ys.replicate(S, 1).colwise() - outs.col(col)).array().square() /
            (RegressionModel::kNoise * RegressionModel::kNoise))
        .matrix();
  };
  if (!model.two_component) {
    ll = sq(0);
    ll.array() += c;
  } else {
    const Eigen::MatrixXd a = sq(0), b = sq(1);
    const Eigen::ArrayXXd hi = a.array().max(b.array());
    ll = (hi + ((a.array() - hi).exp() + (b.array() - hi).exp()).log() + c + std::log(0.5)).matrix();
  }
  const Eigen::RowVectorXd mx = ll.colwise().maxCoeff();
  const Eigen::RowVectorXd se = (ll.rowwise() - mx).array().exp().colwise().sum().matrix();
  std::vector<double> out(static_cast<std::size_t>(G));
  for (Eigen::Index k = 0; k < G; ++k) out[static_cast<std::size_t>(k)] = mx[k] + std::log(se[k]) - log_s;
  return out;
}
}  // namespace detail

// lpp = -mean_i log mean_j p(y_i | x_i, theta_j); kl_to_truth averages over
// test x the quadrature of p* log(p* / p_hat) on a y-grid of +-8 truth scales.
inline Evaluation evaluate_model(const VariationalPosterior& post, const RegressionModel& model,
                                 const GenerativeTruth& truth, const Dataset& test, std::size_t eval_samples,
                                 Rng& rng, const std::vector<double>& probe_x = {}) {
  if (eval_samples < 1) throw UsageError("evaluate_model: eval_samples must be >= 1");
  if (test.x.size() != test.y.size() || test.x.empty()) throw UsageError("evaluate_model: need paired x and y");
  const Eigen::MatrixXd theta = posterior_draws(post, rng, eval_samples);
  const auto S = theta.rows();
  const auto n = static_cast<Eigen::Index>(test.size());
  const Eigen::Index w = model.arch.output_width();

  auto forward_all = [&](const std::vector<double>& xs) {
    // outs[i] is S x w for input xs[i]
    const Eigen::MatrixXd xm = column(xs);
    std::vector<Eigen::MatrixXd> outs(xs.size(), Eigen::MatrixXd(S, w));
    for (Eigen::Index j = 0; j < S; ++j) {
      const Eigen::MatrixXd o = mlp_apply(theta.row(j).transpose(), model.arch, xm);
      for (std::size_t i = 0; i < xs.size(); ++i) outs[i].row(j) = o.row(static_cast<Eigen::Index>(i));
    }
    return outs;
  };
  const auto outs = forward_all(test.x);

  Evaluation ev;
  double lpp = 0.0;
  std::vector<double> lls(static_cast<std::size_t>(S));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < S; ++j)
      lls[static_cast<std::size_t>(j)] = model.log_lik(outs[static_cast<std::size_t>(i)].row(j), test.y[i]);
    lpp -= log_mean_exp(lls);
  }
  ev.lpp = lpp / static_cast<double>(n);

  auto per_x = [&](double x, const Eigen::MatrixXd& o, ProbePredictive* probe) {
    const Grid1D g = truth.y_grid(x);
    if (truth.mass_outside(x, g.lo(), g.hi()) > 1e-6) throw MassCoverageError("evaluate_model: y-grid misses truth mass");
    const auto lp = detail::log_predictive_on_grid(model, o, g);
    double kl = 0.0;
    for (std::size_t k = 0; k < g.count(); ++k) {
      const double lt = truth.log_density(g.point(k), x);
      const double pt = std::exp(lt);
      if (pt > 0.0) kl += pt * (lt - lp[k]);
    }
    kl *= g.step();
    if (probe) {
      // The summary grid also spans every draw's output so that predictive
      // mass far from the truth is not cut off.
      const double pad = 8.0 * RegressionModel::kNoise;
      const double lo = std::min(g.lo(), o.minCoeff() - pad);
      const double hi = std::max(g.hi(), o.maxCoeff() + pad);
      const Grid1D pg(lo, hi, static_cast<std::size_t>(std::ceil((hi - lo) / g.step())) + 1);
      const auto plp = detail::log_predictive_on_grid(model, o, pg);
      probe->x = x;
      probe->truth_mean = truth.mean(x);
      probe->kl = kl;
      probe->y = pg.points();
      probe->density.resize(pg.count());
      probe->truth_density.resize(pg.count());
      double mass = 0.0, m1 = 0.0;
      for (std::size_t k = 0; k < pg.count(); ++k) {
        probe->density[k] = std::exp(plp[k]);
        probe->truth_density[k] = std::exp(truth.log_density(pg.point(k), x));
        mass += probe->density[k];
        m1 += probe->density[k] * probe->y[k];
      }
      probe->mean = m1 / mass;
      double m2 = 0.0;
      for (std::size_t k = 0; k < pg.count(); ++k) m2 += probe->density[k] * std::pow(probe->y[k] - probe->mean, 2);
      probe->stddev = std::sqrt(m2 / mass);
    }
    return kl;
  };

  std::vector<double> kls(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    kls[static_cast<std::size_t>(i)] = per_x(test.x[static_cast<std::size_t>(i)], outs[static_cast<std::size_t>(i)], nullptr);
  const MeanSe ms = mean_and_se(kls);
  ev.kl_to_truth = ms.mean;
  ev.kl_se = ms.se;

  if (!probe_x.empty()) {
    const auto pouts = forward_all(probe_x);
    for (std::size_t p = 0; p < probe_x.size(); ++p) {
      ProbePredictive pr;
      per_x(probe_x[p], pouts[p], &pr);
      ev.probes.push_back(std::move(pr));
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// full run and report

struct RunResult {
  ExperimentConfig config;
  TrainState state;
  Evaluation eval;
  double wall_seconds = 0.0;
};

inline std::vector<double> default_probes() { return even_grid(kInputLo, kInputHi, 9); }

// The tape allocates and frees the same large buffers every step; keeping them on
// the heap instead of fresh mmap pages removes most of the kernel time.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const std::function<void(const LogRow&)>& on_log = nullptr) {
  if (cfg.experiment == ExperimentKind::toy || cfg.experiment == ExperimentKind::verify)
    throw UsageError("run_experiment: use the toy or verify entry points for this experiment");
  const auto t0 = std::chrono::steady_clock::now();
  const GeneratedData tr = gen_dataset(cfg.experiment, cfg.n_train, cfg.seed);
  const GeneratedData te = gen_dataset(cfg.experiment, cfg.n_train, cfg.seed + 1);
  RunResult r{cfg, train(cfg, tr.data, on_log), {}, 0.0};
  Rng eval_rng(cfg.seed + 2);
  r.eval = evaluate_model(r.state.posterior, RegressionModel::for_experiment(cfg.experiment), te.truth, te.data,
                          cfg.eval_samples, eval_rng, default_probes());
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// Shortest round-trip decimal form.
inline std::string fmt_num(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

// RFC-4180 field quoting.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string metrics_csv(const std::vector<LogRow>& trace) {
  std::string s = "step,loss,data_term_nats,kl_term_nats,lr\r\n";
  for (const auto& r : trace)
    s += std::to_string(r.step) + "," + fmt_num(r.loss) + "," + fmt_num(r.data_term) + "," + fmt_num(r.kl_term) +
         "," + fmt_num(r.lr) + "\r\n";
  return s;
}

inline std::string predictive_csv(const std::vector<ProbePredictive>& probes) {
  std::string s = "x,y,predictive_density,truth_density\r\n";
  for (const auto& p : probes)
    for (std::size_t k = 0; k < p.y.size(); ++k)
      s += fmt_num(p.x) + "," + fmt_num(p.y[k]) + "," + fmt_num(p.density[k]) + "," + fmt_num(p.truth_density[k]) +
           "\r\n";
  return s;
}

inline nlohmann::json summary_json(const RunResult& r) {
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : r.eval.probes) {
    const double mu = p.truth_mean;
    probes.push_back({{"x", p.x},
                      {"truth_mean", mu},
                      {"kl_nats", p.kl},
                      {"predictive_mean", p.mean},
                      {"predictive_std", p.stddev},
                      {"mass_near_plus_mean", p.mass_near(mu, 2.0)},
                      {"mass_near_minus_mean", p.mass_near(-mu, 2.0)}});
  }
  return {{"config", to_json(r.config)},
          {"seed", r.config.seed},
          {"lpp_nats", r.eval.lpp},
          {"lpp_bits", to_bits(r.eval.lpp)},
          {"kl_to_truth_nats", r.eval.kl_to_truth},
          {"kl_to_truth_bits", to_bits(r.eval.kl_to_truth)},
          {"kl_to_truth_se_nats", r.eval.kl_se},
          {"training_completed", r.state.completed},
          {"diagnostic", r.state.diagnostic},
          {"wall_seconds", r.wall_seconds},
          {"probes", probes}};
}

inline void emit_report(const RunResult& r, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "metrics.csv", metrics_csv(r.state.trace));
  write_text(out_dir / "predictive.csv", predictive_csv(r.eval.probes));
  write_text(out_dir / "summary.json", summary_json(r).dump(2) + "\n");
  write_text(out_dir / "posterior.json", to_json(r.state.posterior).dump(2) + "\n");
}

inline nlohmann::json toy_json(const ToyReport& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"risk", r.name},
                    {"solver", r.solver},
                    {"kl_nats", r.kl_nats},
                    {"kl_bits", r.kl_bits},
                    {"converged", r.converged}});
  return {{"experiment", "toy"},
          {"seed", t.seed},
          {"data", t.data},
          {"rows", rows},
          {"fixed_point_iters", t.fixed_point_iters},
          {"fixed_point_residual", t.fixed_point_residual},
          {"atomic_steps", t.atomic_steps}};
}

inline void emit_toy_report(const ToyReport& t, const std::filesystem::path& out_dir) {
  std::string csv = "risk,solver,kl_nats,kl_bits,converged\r\n";
  for (const auto& r : t.rows)
    csv += csv_field(r.name) + "," + csv_field(r.solver) + "," + fmt_num(r.kl_nats) + "," + fmt_num(r.kl_bits) + "," +
           (r.converged ? "true" : "false") + "\r\n";
  write_text(out_dir / "toy_risks.csv", csv);
  write_text(out_dir / "summary.json", toy_json(t).dump(2) + "\n");
}

}  // namespace pacm
