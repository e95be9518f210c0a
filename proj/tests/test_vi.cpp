#include <gtest/gtest.h>

#include <cmath>

#include "bnn/error.hpp"
#include "bnn/vi.hpp"
#include "test_util.hpp"

using namespace bnn;
using bnn::testing::max_rel_err;
using bnn::testing::moments;
using bnn::testing::random_tensor;
using bnn::testing::variance_se;

namespace {

NetworkSpec single_weight() { return NetworkSpec::mlp(1, {}, 1, {ActivationKind::identity}, Task::regression); }

// y = w x + N(0, noise^2), w ~ N(0, s0^2): closed-form posterior, evidence
// and the exact ELBO of a Gaussian q.
struct LinearGaussian {
  std::vector<double> x, y;
  double noise, s0;

  double sxx() const {
    double s = 0;
    for (double v : x) s += v * v;
    return s;
  }
  double sxy() const {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
  }
  double post_prec() const { return 1.0 / (s0 * s0) + sxx() / (noise * noise); }
  double post_mean() const { return sxy() / (noise * noise) / post_prec(); }
  double post_sd() const { return 1.0 / std::sqrt(post_prec()); }
  double log_evidence() const {
    const double n = static_cast<double>(x.size()), s2 = noise * noise, a = s0 * s0 / s2;
    double yy = 0;
    for (double v : y) yy += v * v;
    const double quad = (yy - a * sxy() * sxy() / (1.0 + a * sxx())) / s2;
    const double logdet = n * std::log(s2) + std::log1p(a * sxx());
    return -0.5 * (n * std::log(2 * M_PI) + logdet + quad);
  }
  double exact_elbo(double m, double s) const {
    const double n = static_cast<double>(x.size()), s2 = noise * noise;
    double rss = 0;
    for (std::size_t i = 0; i < x.size(); ++i) rss += (y[i] - m * x[i]) * (y[i] - m * x[i]);
    const double ell = -0.5 * n * std::log(2 * M_PI * s2) - (rss + s * s * sxx()) / (2 * s2);
    const double kl = std::log(s0 / s) + (s * s + m * m) / (2 * s0 * s0) - 0.5;
    return ell - kl;
  }
  Tensor xs() const { return Tensor(Shape{x.size(), 1}, x); }
  Tensor ys() const { return Tensor(Shape{y.size(), 1}, y); }
};

LinearGaussian make_linear(std::uint64_t seed, std::size_t n = 20) {
  Rng rng(seed);
  LinearGaussian lg{{}, {}, 0.5, 1.0};
  std::normal_distribution<double> e(0, lg.noise);
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t i = 0; i < n; ++i) {
    lg.x.push_back(u(rng));
    lg.y.push_back(1.3 * lg.x.back() + e(rng));
  }
  return lg;
}

}  // namespace

TEST(Softplus, PositiveAndInvertible) {
  for (double r = -1e4; r <= 700; r += 0.37) EXPECT_GT(softplus(r), 0.0) << r;
  for (double y : {1e-6, 0.05, 1.0, 3.0, 40.0}) EXPECT_NEAR(softplus(softplus_inverse(y)), y, 1e-12 * (1 + y));
  EXPECT_THROW(softplus_inverse(0.0), InvalidArgument);
}

TEST(SampleWeights, VanishingSigmaReturnsMean) {
  const auto spec = NetworkSpec::mlp(3, {4}, 2, {ActivationKind::tanh}, Task::regression, true);
  Rng rng(1);
  VariationalPosterior vp = VariationalPosterior::init(spec, rng);
  vp.rho = ParameterSet::filled(spec, -1e4);
  const ParameterSet w = sample_weights(vp, rng);
  const auto a = w.flatten(), b = vp.mu.flatten();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(SampleWeights, DeterministicForSeed) {
  const auto spec = NetworkSpec::mlp(3, {4}, 2, {ActivationKind::tanh}, Task::regression, true);
  Rng r0(2);
  const VariationalPosterior vp = VariationalPosterior::init(spec, r0);
  Rng a(99), b(99);
  EXPECT_EQ(sample_weights(vp, a).flatten(), sample_weights(vp, b).flatten());
}

TEST(SampleWeights, ScalarMomentsMatch) {
  const auto spec = single_weight();
  const VariationalPosterior vp = VariationalPosterior::constant(spec, 1.0, 2.0);
  Rng rng(3);
  std::vector<double> s(100000);
  for (double& v : s) v = sample_weights(vp, rng).flatten()[0];
  const auto m = moments(s);
  EXPECT_NEAR(m.mean, 1.0, 0.02);
  EXPECT_NEAR(std::sqrt(m.var), 2.0, 0.02);
}

TEST(Elbo, MatchedPriorWithoutDataIsZero) {
  const auto spec = NetworkSpec::mlp(2, {3}, 1, {ActivationKind::tanh}, Task::regression);
  const VariationalPosterior vp = VariationalPosterior::constant(spec, 0.2, 0.7);
  Rng rng(4);
  const auto est = elbo_estimate(vp, PriorSpec::gaussian(0.2, 0.7), LikelihoodSpec::gaussian(1.0), spec,
                                 Tensor(Shape{1, 2}, 0.0), Tensor(Shape{1, 1}, 0.0), 0, 10000, rng);
  EXPECT_LE(std::abs(est.value), 3.0 * est.se + 1e-10);
}

TEST(Elbo, EmptyBatchRejected) {
  const auto spec = single_weight();
  Rng rng(0);
  const auto vp = VariationalPosterior::init(spec, rng);
  EXPECT_THROW(elbo_estimate(vp, PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(1), spec, Tensor(Shape{0, 1}),
                             Tensor(Shape{0, 1}), 10, 1, rng),
               Error);
}

TEST(Elbo, ExactPosteriorAttainsEvidence) {
  const LinearGaussian lg = make_linear(5);
  const auto spec = single_weight();
  const auto vp = VariationalPosterior::constant(spec, lg.post_mean(), lg.post_sd());
  Rng rng(6);
  const auto est = elbo_estimate(vp, PriorSpec::gaussian(0, lg.s0), LikelihoodSpec::gaussian(lg.noise), spec, lg.xs(),
                                 lg.ys(), lg.x.size(), 200, rng);
  // ln p(D, w) - ln q(w) is constant when q is the exact posterior.
  EXPECT_NEAR(est.value, lg.log_evidence(), 1e-9);
  EXPECT_LT(est.se, 1e-9);
}

TEST(Elbo, FullBatchEqualsUnbatchedObjective) {
  Rng rng(7);
  const auto spec = NetworkSpec::mlp(2, {5}, 1, {ActivationKind::tanh}, Task::regression, true);
  const auto prior = PriorSpec::spike_slab(0.5, 1.0, 0.0625);
  const auto lik = LikelihoodSpec::gaussian(0.3);
  const auto vp = VariationalPosterior::init(spec, rng, 0.5, 0.2);
  const Tensor x = random_tensor({8, 2}, rng), y = random_tensor({8, 1}, rng);
  Rng a(11), b(11);
  const double batched = elbo_estimate(vp, prior, lik, spec, x, y, 8, 1, a).value;
  const ParameterSet w = sample_weights(vp, b);
  const auto mu = vp.mu.flatten(), sg = vp.sigma().flatten(), wf = w.flatten();
  double log_q = 0.0;
  for (std::size_t i = 0; i < wf.size(); ++i) {
    const double z = (wf[i] - mu[i]) / sg[i];
    log_q += -0.5 * kLog2Pi - std::log(sg[i]) - 0.5 * z * z;
  }
  const double unbatched = -(log_q - log_prior(prior, w)) + log_likelihood(lik, mlp_forward(spec, w, x), y);
  EXPECT_NEAR(batched, unbatched, 1e-10 * std::abs(unbatched));
}

// Common random numbers: replaying the seed fixes eps, so the estimate is a
// smooth function of (mu, rho).
TEST(Elbo, GradientMatchesCommonRandomNumberDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const bool local : {false, true}) {
      Rng rng(seed);
      const auto spec = NetworkSpec::mlp(2, {4}, 1, {ActivationKind::tanh}, Task::regression, true);
      const auto prior = PriorSpec::spike_slab(0.5, 1.0, 0.0625);
      const auto lik = LikelihoodSpec::gaussian(0.4);
      const auto vp = VariationalPosterior::init(spec, rng, 0.5, 0.3);
      const Tensor x = random_tensor({6, 2}, rng), y = random_tensor({6, 1}, rng);
      const ElboOptions opts{local};
      Rng r0(100 + seed);
      const auto est = elbo_estimate(vp, prior, lik, spec, x, y, 12, 2, r0, opts);
      auto value_at = [&](const VariationalPosterior& q) {
        Rng r(100 + seed);
        return elbo_estimate(q, prior, lik, spec, x, y, 12, 2, r, opts).value;
      };
      const auto fd_mu = finite_diff_grad(
          [&](const ParameterSet& m) {
            VariationalPosterior q = vp;
            q.mu = m;
            return value_at(q);
          },
          vp.mu, 1e-6);
      const auto fd_rho = finite_diff_grad(
          [&](const ParameterSet& r) {
            VariationalPosterior q = vp;
            q.rho = r;
            return value_at(q);
          },
          vp.rho, 1e-6);
      EXPECT_LT(max_rel_err(est.grad_mu.flatten(), fd_mu), 1e-5) << "seed " << seed << " local " << local;
      EXPECT_LT(max_rel_err(est.grad_rho.flatten(), fd_rho), 1e-5) << "seed " << seed << " local " << local;
    }
  }
}

TEST(BbbTrain, ZeroEpochsIsNoOp) {
  const LinearGaussian lg = make_linear(8);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 5;
  Rng rng(1);
  const auto init = VariationalPosterior::init(single_weight(), rng);
  const auto res = bbb_train(single_weight(), PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(lg.noise), lg.xs(),
                             lg.ys(), cfg, {}, &init);
  EXPECT_TRUE(res.trace.empty());
  EXPECT_EQ(res.posterior.mu.flatten(), init.mu.flatten());
  EXPECT_EQ(res.posterior.rho.flatten(), init.rho.flatten());
}

TEST(BbbTrain, RecoversConjugatePosterior) {
  const LinearGaussian lg = make_linear(9);
  TrainConfig cfg;
  cfg.epochs = 3000;
  cfg.batch_size = lg.x.size();
  cfg.mc_samples = 4;
  cfg.learning_rate = 0.01;
  cfg.optimizer = OptimizerKind::adam;
  cfg.seed = 3;
  const auto res = bbb_train(single_weight(), PriorSpec::gaussian(0, lg.s0), LikelihoodSpec::gaussian(lg.noise), lg.xs(),
                             lg.ys(), cfg);
  ASSERT_FALSE(res.diverged);
  const double mu = res.posterior.mu.flatten()[0], sigma = res.posterior.sigma().flatten()[0];
  EXPECT_NEAR(mu, lg.post_mean(), 0.05 * std::abs(lg.post_mean()));
  EXPECT_NEAR(sigma, lg.post_sd(), 0.2 * lg.post_sd());
  const double elbo = lg.exact_elbo(mu, sigma);
  EXPECT_LE(elbo, lg.log_evidence() + 1e-6);
  EXPECT_LT(lg.log_evidence() - elbo, 0.01);
}

TEST(BbbTrain, InvalidConfigRejected) {
  const LinearGaussian lg = make_linear(10, 5);
  TrainConfig cfg;
  cfg.batch_size = 6;
  EXPECT_THROW(bbb_train(single_weight(), PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(1), lg.xs(), lg.ys(), cfg),
               ConfigError);
}

TEST(BbbTrain, DivergenceStopsWithTrace) {
  const LinearGaussian lg = make_linear(11);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = lg.x.size();
  cfg.learning_rate = 1e6;
  const auto res = bbb_train(single_weight(), PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(0.01), lg.xs(),
                             lg.ys(), cfg);
  EXPECT_TRUE(res.diverged);
  EXPECT_LT(res.trace.size(), 50u);
}

// ---------------------------------------------------------------------------

namespace {

ad::Var square_fn(ad::Var w) { return ad::sum(ad::square(w)); }

}  // namespace

TEST(ScoreFunction, ConstantHasZeroMeanGradient) {
  Rng rng(12);
  const std::vector<double> mu{0.3}, sigma{1.2};
  const auto g = score_function_grad([](ad::Var w) { return ad::add_scalar(ad::scale(ad::sum(w), 0.0), 1.0); }, mu,
                                     sigma, 100000, rng);
  EXPECT_LT(std::abs(g.d_mu[0]), 3 * g.se_mu[0]);
}

TEST(ScoreFunction, LinearMeanGradientIsOne) {
  Rng rng(13);
  const std::vector<double> mu{0.5}, sigma{1.0};
  const auto g = score_function_grad([](ad::Var w) { return ad::sum(w); }, mu, sigma, 100000, rng);
  EXPECT_LT(std::abs(g.d_mu[0] - 1.0), 3 * g.se_mu[0]);
}

TEST(Estimators, BothUnbiasedOnSquare) {
  Rng rng(14);
  const std::vector<double> mu{0.8}, sigma{0.6};
  const auto sf = score_function_grad(square_fn, mu, sigma, 100000, rng);
  const auto pw = pathwise_grad(square_fn, mu, sigma, 100000, rng);
  EXPECT_LT(std::abs(sf.d_mu[0] - 1.6), 3 * sf.se_mu[0]);
  EXPECT_LT(std::abs(pw.d_mu[0] - 1.6), 3 * pw.se_mu[0] + 1e-12);
  // d/dsigma E[w^2] = 2 sigma
  EXPECT_NEAR(pw.d_sigma[0], 1.2, 0.02);
}

TEST(Estimators, ScoreFunctionHasLargerVariance) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::vector<double> mu{0.8}, sigma{0.6};
    const auto sf = score_function_grad(square_fn, mu, sigma, 1000, rng);
    const auto pw = pathwise_grad(square_fn, mu, sigma, 1000, rng);
    wins += sf.var_mu[0] > pw.var_mu[0];
  }
  EXPECT_GE(wins, 18);
}

TEST(GaussianIdentities, QuadraticMatchesAnalytic) {
  Rng rng(15);
  const double a = 1.7;
  const std::vector<double> mu{0.4, -1.1}, sigma{0.5, 0.9};
  const auto r =
      gaussian_identity_check([a](ad::Var w) { return ad::scale(ad::sum(ad::square(w)), a); }, mu, sigma, 20000, rng);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_NEAR(r.mean_rhs[j], 2 * a * mu[j], 3 * 2 * a * sigma[j] / std::sqrt(20000.0));
    EXPECT_NEAR(r.cov_rhs[j], a, 1e-5);
  }
  EXPECT_LT(r.max_z(), 3.0);
}

TEST(GaussianIdentities, LinearHasZeroCurvature) {
  Rng rng(16);
  const std::vector<double> mu{0.4, -1.1}, sigma{0.5, 0.9};
  const auto r = gaussian_identity_check(
      [](ad::Var w) { return ad::sum(w * w.tape().constant(Tensor::vector({2.0, -3.0}))); }, mu, sigma, 20000, rng);
  for (double v : r.cov_rhs) EXPECT_EQ(v, 0.0);
  EXPECT_LT(r.max_z_cov, 3.0);
  EXPECT_LT(r.max_z_mean, 3.0);
}

TEST(GaussianIdentities, SmallMlpLogLikelihood) {
  Rng rng(17);
  const Tensor x = random_tensor({5, 2}, rng), y = random_tensor({5, 1}, rng);
  // w = [W1 (2x3) | W2 (3x1)] flattened.
  auto f = [&](ad::Var w) {
    ad::Tape& t = w.tape();
    ad::Var w1 = ad::reshape(ad::slice(w, 0, 0, 6), {2, 3});
    ad::Var w2 = ad::reshape(ad::slice(w, 0, 6, 9), {3, 1});
    ad::Var out = ad::matmul(ad::tanh(ad::matmul(t.constant(x), w1)), w2);
    return log_likelihood(LikelihoodSpec::gaussian(0.5), out, y);
  };
  std::vector<double> mu(9), sigma(9, 0.3);
  for (double& m : mu) m = standard_normal(rng) * 0.5;
  const auto r = gaussian_identity_check(f, mu, sigma, 20000, rng);
  EXPECT_LT(r.max_z(), 4.0);
}

// ---------------------------------------------------------------------------

TEST(Dropout, ZeroRateEqualsPlainForward) {
  Rng rng(18);
  const auto spec = NetworkSpec::mlp(3, {6}, 2, {ActivationKind::tanh}, Task::regression, true);
  const auto dp = DropoutPosterior::uniform(spec, ParameterSet::normal(spec, rng, 0, 1), 0.0, 0.0);
  const Tensor x = random_tensor({4, 3}, rng);
  EXPECT_EQ(dropout_forward(spec, dp, x, rng, true), mlp_forward(spec, dp.mean, x));
  EXPECT_EQ(dropout_forward(spec, dp, x, rng, false), mlp_forward(spec, dp.mean, x));
}

TEST(Dropout, FullMaskGivesActivationOfZero) {
  Rng rng(19);
  const auto spec = NetworkSpec::mlp(3, {4}, 1, {ActivationKind::sigmoid}, Task::regression);
  DropoutPosterior dp = DropoutPosterior::uniform(spec, ParameterSet::normal(spec, rng, 0, 1), 0.5, 0.0);
  const Tensor x = random_tensor({2, 3}, rng);
  DropoutMasks masks{{0, Tensor(Shape{2, 3}, 0.0)}, {2, Tensor(Shape{2, 4}, 1.0)}};
  const Tensor y = dropout_forward(spec, dp, x, masks);
  double expect = 0.0;
  for (std::size_t j = 0; j < 4; ++j) expect += 0.5 * dp.mean.at(2).weight[j];
  EXPECT_NEAR(y[0], expect, 1e-15);
  EXPECT_NEAR(y[1], expect, 1e-15);
}

TEST(Dropout, MeanPreactivationIsScaled) {
  Rng rng(20);
  const auto spec = NetworkSpec::mlp(3, {}, 2, {ActivationKind::identity}, Task::regression);
  const double p = 0.3;
  const auto dp = DropoutPosterior::uniform(spec, ParameterSet::normal(spec, rng, 0, 1), p, 0.0);
  const std::vector<double> x0{0.5, -1.2, 2.0};
  const std::size_t n = 100000;
  Tensor x(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j) x.at(i, j) = x0[j];
  const Tensor out = dropout_forward(spec, dp, x, rng, true);
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = out.at(i, k);
    const auto m = moments(col);
    double expect = 0.0;
    for (std::size_t j = 0; j < 3; ++j) expect += (1 - p) * x0[j] * dp.mean.at(0).weight.at(j, k);
    EXPECT_LT(std::abs(m.mean - expect), 3 * m.se);
  }
  // Deterministic mode gives exactly the scaled value.
  const Tensor det = dropout_forward(spec, dp, x.rows(0, 1), rng, false);
  for (std::size_t k = 0; k < 2; ++k) {
    double expect = 0.0;
    for (std::size_t j = 0; j < 3; ++j) expect += (1 - p) * x0[j] * dp.mean.at(0).weight.at(j, k);
    EXPECT_NEAR(det[k], expect, 1e-14);
  }
}

TEST(Dropout, InvalidRateRejected) {
  const auto spec = NetworkSpec::mlp(3, {}, 2, {ActivationKind::identity}, Task::regression);
  EXPECT_THROW(DropoutPosterior::uniform(spec, ParameterSet::zeros(spec), 1.0, 0.0), InvalidArgument);
  EXPECT_THROW(DropoutPosterior::uniform(spec, ParameterSet::zeros(spec), 0.5, -1.0), InvalidArgument);
}

namespace {

struct Toy {
  Tensor x, y;
};

Toy sine_data(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  Toy t{Tensor(Shape{n, 1}), Tensor(Shape{n, 1})};
  for (std::size_t i = 0; i < n; ++i) {
    t.x[i] = -2.0 + 4.0 * uniform01(rng);
    t.y[i] = std::sin(2.0 * t.x[i]) + 0.1 * standard_normal(rng);
  }
  return t;
}

double train_nll(const NetworkSpec& spec, const ParameterSet& p, const Toy& d, double sigma) {
  return -log_likelihood(LikelihoodSpec::gaussian(sigma), mlp_forward(spec, p, d.x), d.y);
}

}  // namespace

TEST(McDropout, VanishingRateMatchesMapTraining) {
  const Toy d = sine_data(21, 64);
  const auto spec = NetworkSpec::mlp(1, {16}, 1, {ActivationKind::tanh}, Task::regression, true);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.optimizer = OptimizerKind::adam;
  cfg.seed = 5;
  const auto lik = LikelihoodSpec::gaussian(0.1);
  const auto drop = mc_dropout_train(spec, lik, d.x, d.y, cfg, 1e-9, 0.0);
  const auto map = map_train(spec, lik, d.x, d.y, cfg, 0.0);
  const double a = train_nll(spec, drop.posterior.mean, d, 0.1), b = train_nll(spec, map.posterior.mean, d, 0.1);
  EXPECT_NEAR(a, b, 0.01 * std::abs(b));
}

TEST(McDropout, LossDecreases) {
  const Toy d = sine_data(22, 64);
  const auto spec = NetworkSpec::mlp(1, {32}, 1, {ActivationKind::relu}, Task::regression, true);
  TrainConfig cfg;
  cfg.epochs = 600;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.005;
  cfg.optimizer = OptimizerKind::adam;
  const auto res = mc_dropout_train(spec, LikelihoodSpec::gaussian(0.1), d.x, d.y, cfg, 0.1, 1e-3);
  std::vector<double> loss;
  for (const auto& r : res.trace) loss.push_back(-r.elbo);
  const auto ma = moving_average(loss, 200);
  ASSERT_FALSE(ma.empty());
  EXPECT_LT(ma.back(), ma.front());
}

TEST(McDropout, ReplicatedPointGivesConfidentPrediction) {
  Toy d{Tensor(Shape{10, 1}, 0.5), Tensor(Shape{10, 1}, 1.0)};
  const auto spec = NetworkSpec::mlp(1, {16}, 1, {ActivationKind::relu}, Task::regression, true);
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 10;
  cfg.learning_rate = 0.01;
  cfg.optimizer = OptimizerKind::adam;
  const auto res = mc_dropout_train(spec, LikelihoodSpec::gaussian(0.1), d.x, d.y, cfg, 0.1, 1e-4);
  Rng rng(1);
  const auto s = mc_dropout_predict(spec, res.posterior, Tensor::matrix(1, 1, {0.5}), 200, 0.0, rng);
  EXPECT_LT(std::sqrt(s.variance[0]), 1.0);
  EXPECT_NEAR(s.mean[0], 1.0, 0.5);
}

TEST(McDropoutPredict, ZeroRateVarianceIsNoise) {
  Rng rng(23);
  const auto spec = NetworkSpec::mlp(2, {5}, 1, {ActivationKind::tanh}, Task::regression, true);
  const auto dp = DropoutPosterior::uniform(spec, ParameterSet::normal(spec, rng, 0, 1), 0.0, 0.0);
  const auto s = mc_dropout_predict(spec, dp, random_tensor({7, 2}, rng), 10, 0.3, rng);
  for (double v : s.variance.values()) EXPECT_EQ(v, 0.3 * 0.3);
  EXPECT_THROW(mc_dropout_predict(spec, dp, random_tensor({7, 2}, rng), 1, 0.3, rng), InvalidArgument);
}

TEST(McDropoutPredict, StandardErrorShrinksAsRootT) {
  Rng rng(24);
  const auto spec = NetworkSpec::mlp(2, {20}, 1, {ActivationKind::tanh}, Task::regression, true);
  const auto dp = DropoutPosterior::uniform(spec, ParameterSet::normal(spec, rng, 0, 1), 0.3, 0.0);
  const Tensor x = random_tensor({20, 2}, rng);
  const auto a = mc_dropout_predict(spec, dp, x, 100, 0.1, rng);
  const auto b = mc_dropout_predict(spec, dp, x, 10000, 0.1, rng);
  double ra = 0, rb = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    ra += a.mean_se[i];
    rb += b.mean_se[i];
    EXPECT_GE(a.variance[i], 0.0);
  }
  EXPECT_GE(ra / rb, 8.0);
  EXPECT_LE(ra / rb, 12.0);
}

// ---------------------------------------------------------------------------

TEST(LocalReparam, ZeroSigmaIsDeterministic) {
  Rng rng(25);
  const Tensor mu = random_tensor({4, 3}, rng), x = random_tensor({5, 4}, rng);
  const Tensor phi = local_reparam_forward(mu, Tensor(Shape{4, 3}, 0.0), x, rng);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 3; ++j) {
      double g = 0.0;
      for (std::size_t i = 0; i < 4; ++i) g += x.at(r, i) * mu.at(i, j);
      EXPECT_NEAR(phi.at(r, j), g, 1e-14);
    }
}

TEST(LocalReparam, SingleInputMoments) {
  Rng rng(26);
  const std::size_t n = 100000;
  const Tensor phi = local_reparam_forward(Tensor::matrix(1, 1, {0.7}), Tensor::matrix(1, 1, {1.5}),
                                           Tensor(Shape{n, 1}, 1.0), rng);
  const auto m = moments(phi.data());
  EXPECT_LT(std::abs(m.mean - 0.7), 3 * m.se);
  EXPECT_LT(std::abs(m.var - 2.25), 3 * variance_se(m, n));
}

TEST(LocalReparam, MatchesNaiveWeightSampling) {
  Rng rng(27);
  const Tensor mu = random_tensor({5, 1}, rng), sigma = random_tensor({5, 1}, rng, 0.1, 1.0);
  const Tensor x0 = random_tensor({1, 5}, rng);
  const std::size_t n = 10000;
  std::vector<double> naive(n);
  for (std::size_t t = 0; t < n; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += x0[i] * (mu[i] + sigma[i] * standard_normal(rng));
    naive[t] = s;
  }
  Tensor x(Shape{n, 5});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < 5; ++i) x.at(t, i) = x0[i];
  const Tensor local = local_reparam_forward(mu, sigma, x, rng);
  const auto a = moments(naive), b = moments(local.data());
  EXPECT_LT(std::abs(a.mean - b.mean), 4 * std::hypot(a.se, b.se));
  EXPECT_LT(std::abs(a.var - b.var), 4 * std::hypot(variance_se(a, n), variance_se(b, n)));
}

TEST(LocalReparam, ReducesGradientVariance) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto spec = NetworkSpec::mlp(4, {}, 1, {ActivationKind::identity}, Task::regression);
    const auto vp = VariationalPosterior::init(spec, rng, 0.5, 0.5);
    const Tensor x = random_tensor({32, 4}, rng), y = random_tensor({32, 1}, rng);
    const auto prior = PriorSpec::gaussian(0, 1);
    const auto lik = LikelihoodSpec::gaussian(0.5);
    auto grad_var = [&](bool local) {
      std::vector<std::vector<double>> g(4);
      Rng r(1000 + seed);
      for (int t = 0; t < 300; ++t) {
        const auto est = elbo_estimate(vp, prior, lik, spec, x, y, 320, 1, r, ElboOptions{local});
        const auto gm = est.grad_mu.flatten();
        for (std::size_t j = 0; j < 4; ++j) g[j].push_back(gm[j]);
      }
      double v = 0.0;
      for (const auto& col : g) v += moments(col).var;
      return v;
    };
    wins += grad_var(true) <= grad_var(false);
  }
  EXPECT_GE(wins, 9);
}
