#include <gtest/gtest.h>

#include <cmath>

#include "pacm/models.hpp"
#include "pacm/random.hpp"

using namespace pacm;
using ad::Tape;
using ad::Var;

namespace {

Eigen::VectorXd random_vec(Rng& rng, Eigen::Index n, double scale) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal(0.0, scale);
  return v;
}

MeanFieldGaussian random_mfg(Rng& rng, Eigen::Index d) {
  return {random_vec(rng, d, 1.0), random_vec(rng, d, 0.3)};
}

}  // namespace

TEST(Mlp, ParamCount) {
  EXPECT_EQ(MlpArch({1, 20, 1}, Activation::tanh).param_count(), 61);
  EXPECT_EQ(MlpArch({1, 20, 20, 1}, Activation::elu).param_count(), 481);
  EXPECT_EQ(MlpArch({1, 20, 20, 2}, Activation::elu).param_count(), 502);
  EXPECT_THROW(MlpArch({1}, Activation::tanh), UsageError);
}

TEST(Mlp, HandComputedForward) {
  // 1 -> 2 -> 1, tanh: w1 = [1, -1], b1 = [0, 0.5], w2 = [2, 3], b2 = [0.1]
  const MlpArch arch({1, 2, 1}, Activation::tanh);
  Eigen::VectorXd theta(7);
  theta << 1.0, -1.0, 0.0, 0.5, 2.0, 3.0, 0.1;
  Eigen::MatrixXd x(1, 1);
  x << 0.3;
  const double want = 2.0 * std::tanh(0.3) + 3.0 * std::tanh(-0.3 + 0.5) + 0.1;
  EXPECT_NEAR(mlp_apply(theta, arch, x)(0, 0), want, 1e-15);
  Tape t;
  EXPECT_NEAR(mlp_forward(t.constant(Eigen::MatrixXd(theta.transpose())), arch, t.constant(x)).scalar(), want, 1e-15);
}

TEST(Mlp, TapeAndPlainForwardAgree) {
  Rng rng(1);
  for (Activation act : {Activation::tanh, Activation::elu}) {
    const MlpArch arch({1, 7, 5, 2}, act);
    const Eigen::VectorXd theta = random_vec(rng, arch.param_count(), 0.8);
    Eigen::MatrixXd x(9, 1);
    for (Eigen::Index i = 0; i < 9; ++i) x(i, 0) = rng.normal(0.0, 3.0);
    Tape t;
    const Eigen::MatrixXd a = mlp_forward(t.constant(Eigen::MatrixXd(theta.transpose())), arch, t.constant(x)).value();
    const Eigen::MatrixXd b = mlp_apply(theta, arch, x);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Mlp, OffsetReadsSecondNetwork) {
  Rng rng(2);
  const MlpArch arch({1, 4, 1}, Activation::elu);
  const Eigen::Index d = arch.param_count();
  const Eigen::VectorXd a = random_vec(rng, d, 1.0), b = random_vec(rng, d, 1.0);
  Eigen::MatrixXd both(2, d);
  both.row(0) = a.transpose();
  both.row(1) = b.transpose();
  Eigen::MatrixXd x(3, 1);
  x << -1.0, 0.0, 2.0;
  Tape t;
  const Eigen::MatrixXd out = mlp_forward(t.constant(both), d, arch, t.constant(x)).value();
  EXPECT_LT((out - mlp_apply(b, arch, x)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(mlp_forward(t.constant(both), d + 1, arch, t.constant(x)), UsageError);
}

TEST(Posterior, PackUnpackRoundTrip) {
  Rng rng(3);
  VariationalPosterior p = VariationalPosterior::mixture({random_mfg(rng, 4), random_mfg(rng, 4)});
  const Eigen::VectorXd v = p.pack();
  VariationalPosterior q = VariationalPosterior::mixture({MeanFieldGaussian::standard(4), MeanFieldGaussian::standard(4)});
  q.unpack(v);
  EXPECT_EQ(q.pack(), v);
  EXPECT_THROW(q.unpack(Eigen::VectorXd::Zero(3)), UsageError);
}

TEST(Posterior, MeanFieldLogDensitiesMatchClosedForm) {
  Rng rng(4);
  const MeanFieldGaussian c = random_mfg(rng, 5);
  const MeanFieldGaussian prior = random_mfg(rng, 5);
  const VariationalPosterior post = VariationalPosterior::mean_field(c);
  Tape t;
  const PosteriorVars vars = bind(post, t);
  const PosteriorSample s = posterior_sample(post, vars, prior, rng, 6);
  for (Eigen::Index j = 0; j < 6; ++j) {
    const Eigen::VectorXd th = s.theta.value().row(j).transpose();
    EXPECT_NEAR(s.log_q.value()(j, 0), log_prob(c, th), 1e-12);
    EXPECT_NEAR(s.log_r.value()(j, 0), log_prob(prior, th), 1e-12);
  }
}

TEST(Posterior, MixtureLogDensityAndStratification) {
  Rng rng(5);
  MeanFieldGaussian a = random_mfg(rng, 3), b = random_mfg(rng, 3);
  b.locs.array() += 20.0;
  const VariationalPosterior post = VariationalPosterior::mixture({a, b});
  Tape t;
  const PosteriorVars vars = bind(post, t);
  const PosteriorSample s = posterior_sample(post, vars, MeanFieldGaussian::standard(3), rng, 4);
  for (Eigen::Index j = 0; j < 4; ++j) {
    const Eigen::VectorXd th = s.theta.value().row(j).transpose();
    const double la = std::log(0.5) + log_prob(a, th), lb = std::log(0.5) + log_prob(b, th);
    const double hi = std::max(la, lb);
    EXPECT_NEAR(s.log_q.value()(j, 0), hi + std::log(std::exp(la - hi) + std::exp(lb - hi)), 1e-12);
  }
  // rows 0-1 from component a, rows 2-3 from component b
  EXPECT_LT(s.theta.value().row(1).mean(), 10.0);
  EXPECT_GT(s.theta.value().row(2).mean(), 10.0);
  EXPECT_THROW(draw_noise(post, rng, 3), UsageError);
}

TEST(Posterior, PlainDrawsMatchTapeDraws) {
  Rng r1(6), r2(6);
  Rng g(1);
  const VariationalPosterior post = VariationalPosterior::mixture({random_mfg(g, 3), random_mfg(g, 3)});
  Tape t;
  const Eigen::MatrixXd a = posterior_sample(post, bind(post, t), MeanFieldGaussian::standard(3), r1, 4).theta.value();
  const Eigen::MatrixXd b = posterior_draws(post, r2, 4);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Posterior, ReparameterizationGradient) {
  Rng rng(7);
  const MeanFieldGaussian prior = MeanFieldGaussian::standard(3);
  Eigen::MatrixXd eps(5, 3);
  for (Eigen::Index k = 0; k < eps.size(); ++k) eps(k) = rng.normal();
  const ad::ScalarFn f = [&](Tape&, const Var& packed) {
    const VariationalPosterior post = VariationalPosterior::mean_field(MeanFieldGaussian::standard(3));
    PosteriorVars v;
    v.locs.push_back(ad::transpose(ad::block(packed, 0, 0, 3, 1)));
    v.raws.push_back(ad::transpose(ad::block(packed, 3, 0, 3, 1)));
    const PosteriorSample s = reparameterize(post, v, prior, eps);
    return ad::mean(s.log_ratio) + ad::sum(ad::tanh(s.theta));
  };
  EXPECT_LT(ad::finite_diff_check(f, random_vec(rng, 6, 0.5), 1e-5), 1e-5);
}

TEST(Init, DefaultsAndJitter) {
  Rng rng(8);
  const MlpArch arch({1, 20, 1}, Activation::tanh);
  const InitResult one = init_params(arch, rng);
  EXPECT_EQ(one.posterior.num_components(), 1u);
  EXPECT_EQ(one.posterior.components[0].locs.norm(), 0.0);
  EXPECT_EQ(one.prior.raw_scales.norm(), 0.0);
  const InitResult two = init_params(arch, rng, 2, 0.1);
  EXPECT_EQ(two.posterior.num_components(), 2u);
  EXPECT_LE(two.posterior.components[0].locs.cwiseAbs().maxCoeff(), 0.1);
  EXPECT_GT((two.posterior.components[0].locs - two.posterior.components[1].locs).norm(), 0.0);
}

TEST(Optimizer, AdamFirstStepIsSignedLearningRate) {
  OptimizerState s = OptimizerState::adam(0.01);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd g(3);
  g << 2.0, -0.5, 1e-3;
  const Eigen::VectorXd u = optimizer_step(s, p, g);
  EXPECT_NEAR(u[0], -0.01, 1e-9);
  EXPECT_NEAR(u[1], 0.01, 1e-9);
  EXPECT_NEAR(u[2], -0.01, 1e-7);
  EXPECT_EQ(p, u);
}

TEST(Optimizer, AdagradAndDecay) {
  OptimizerState s = OptimizerState::adagrad(0.1);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(1);
  const Eigen::VectorXd g = Eigen::VectorXd::Constant(1, 3.0);
  optimizer_step(s, p, g);
  EXPECT_NEAR(p[0], -0.1, 1e-9);
  optimizer_step(s, p, g);
  EXPECT_NEAR(p[0], -0.1 - 0.1 * 3.0 / std::sqrt(18.0), 1e-9);

  OptimizerState a = OptimizerState::adam(0.01, 0.5, 100.0);
  a.step = 100;
  EXPECT_NEAR(a.learning_rate(), 0.005, 1e-15);
  a.step = 50;
  EXPECT_NEAR(a.learning_rate(), 0.01 / std::sqrt(2.0), 1e-15);
}

TEST(Optimizer, MinimizesQuadratic) {
  OptimizerState s = OptimizerState::adam(0.05);
  Eigen::VectorXd p = Eigen::VectorXd::Constant(2, 3.0);
  for (int t = 0; t < 3000; ++t) optimizer_step(s, p, 2.0 * (p - Eigen::VectorXd::Constant(2, -1.0)));
  EXPECT_NEAR(p[0], -1.0, 1e-3);
}

TEST(Optimizer, NanGradientThrows) {
  OptimizerState s = OptimizerState::adam(0.01);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(2);
  Eigen::VectorXd g(2);
  g << 1.0, std::nan("");
  EXPECT_THROW(optimizer_step(s, p, g), NumericalError);
  EXPECT_THROW(optimizer_step(s, p, Eigen::VectorXd::Zero(3)), UsageError);
}
