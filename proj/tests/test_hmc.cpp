#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bnn/error.hpp"
#include "bnn/hmc.hpp"
#include "test_util.hpp"

using namespace bnn;
using bnn::testing::max_rel_err;
using bnn::testing::moments;
using bnn::testing::random_tensor;

namespace {

// U = 1/2 w^T P w for a precision matrix P (row-major, d x d).
PotentialFn gaussian_potential(std::vector<double> prec, std::size_t d) {
  return [prec = std::move(prec), d](std::span<const double> w) {
    Energy e;
    e.grad.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) e.grad[i] += prec[i * d + j] * w[j];
    for (std::size_t i = 0; i < d; ++i) e.value += 0.5 * w[i] * e.grad[i];
    return e;
  };
}

// Precision of [[1, r], [r, 1]].
std::vector<double> corr_precision(double r) {
  const double det = 1 - r * r;
  return {1 / det, -r / det, -r / det, 1 / det};
}

ChainState start_state(const PotentialFn& u, std::vector<double> w, std::vector<double> v) {
  ChainState s;
  s.position = std::move(w);
  s.momentum = std::move(v);
  Energy e = u(s.position);
  s.potential = e.value;
  s.grad = e.grad;
  s.kinetic = kinetic_energy(s.momentum, std::vector<double>(s.momentum.size(), 1.0));
  return s;
}

}  // namespace

TEST(KineticEnergy, ReferenceValues) {
  EXPECT_EQ(kinetic_energy(std::vector<double>{0.0, 0.0}, std::vector<double>{1.0, 2.0}), 0.0);
  EXPECT_EQ(kinetic_energy(std::vector<double>{2.0}, std::vector<double>{1.0}), 2.0);
  EXPECT_THROW(kinetic_energy(std::vector<double>{2.0}, std::vector<double>{0.0}), InvalidArgument);
}

TEST(KineticEnergy, Equipartition) {
  Rng rng(1);
  const std::vector<double> mass{0.5, 1.0, 2.0, 3.0, 7.0};
  std::vector<double> k(100000);
  for (double& v : k) v = kinetic_energy(sample_momentum(mass, rng), mass);
  const auto m = moments(k);
  EXPECT_LT(std::abs(m.mean - 2.5), 3 * m.se);
}

TEST(PotentialEnergy, EqualsNegativeLogPosterior) {
  Rng rng(2);
  const auto spec = NetworkSpec::mlp(2, {5}, 1, {ActivationKind::tanh}, Task::regression, true);
  const auto prior = PriorSpec::spike_slab(0.5, 1.0, 0.0625);
  const auto lik = LikelihoodSpec::gaussian(0.3);
  const ParameterSet p = ParameterSet::normal(spec, rng, 0, 0.5);
  const Tensor x = random_tensor({10, 2}, rng), y = random_tensor({10, 1}, rng);
  const Energy e = potential_energy(prior, lik, spec, x, y, p.flatten());
  EXPECT_EQ(e.value, -log_posterior_unnorm(prior, lik, spec, p, x, y));
  const auto fd = finite_diff_grad([&](const ParameterSet& q) { return -log_posterior_unnorm(prior, lik, spec, q, x, y); },
                                   p, 1e-6);
  EXPECT_LT(max_rel_err(e.grad, fd), 1e-5);
}

TEST(PotentialEnergy, LinearModelNormalEquations) {
  Rng rng(3);
  const auto spec = NetworkSpec::mlp(3, {}, 1, {ActivationKind::identity}, Task::regression);
  const double s = 0.8, sigma = 0.4;
  const Tensor x = random_tensor({12, 3}, rng), y = random_tensor({12, 1}, rng);
  const std::vector<double> w{0.3, -0.7, 1.1};
  const Energy e = potential_energy(PriorSpec::gaussian(0, s), LikelihoodSpec::gaussian(sigma), spec, x, y, w);
  // grad U = w / s^2 - X^T (y - X w) / sigma^2
  std::vector<double> expect(3);
  for (std::size_t j = 0; j < 3; ++j) {
    double g = w[j] / (s * s);
    for (std::size_t i = 0; i < 12; ++i) {
      const double r = y[i] - (x.at(i, 0) * w[0] + x.at(i, 1) * w[1] + x.at(i, 2) * w[2]);
      g -= x.at(i, j) * r / (sigma * sigma);
    }
    expect[j] = g;
  }
  EXPECT_LT(max_rel_err(e.grad, expect), 1e-8);
}

TEST(PotentialEnergy, StationaryAtZeroForZeroTargets) {
  Rng rng(4);
  const auto spec = NetworkSpec::mlp(2, {4}, 1, {ActivationKind::tanh}, Task::regression, true);
  const Tensor x = random_tensor({8, 2}, rng);
  const Energy e = potential_energy(PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(0.5), spec, x,
                                    Tensor(Shape{8, 1}, 0.0), std::vector<double>(spec.parameter_count(), 0.0));
  for (double g : e.grad) EXPECT_EQ(g, 0.0);
}

TEST(PotentialEnergy, NonFinitePositionRejected) {
  const auto spec = NetworkSpec::mlp(1, {}, 1, {ActivationKind::identity}, Task::regression);
  const std::vector<double> w{std::nan("")};
  EXPECT_THROW(potential_energy(PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(1), spec, Tensor(Shape{1, 1}, 1.0),
                                Tensor(Shape{1, 1}, 1.0), w),
               NumericalError);
}

TEST(Leapfrog, ReversibleOnNetworkPosterior) {
  Rng rng(5);
  const auto spec = NetworkSpec::mlp(1, {5}, 1, {ActivationKind::tanh}, Task::regression, true);
  const Tensor x = random_tensor({20, 1}, rng), y = random_tensor({20, 1}, rng);
  PotentialFn u = [&](std::span<const double> w) {
    return potential_energy(PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(0.3), spec, x, y, w);
  };
  const std::vector<double> mass(spec.parameter_count(), 1.0);
  const ChainState s0 =
      start_state(u, ParameterSet::normal(spec, rng, 0, 0.5).flatten(), sample_momentum(mass, rng));
  const auto fwd = leapfrog(s0, 0.01, 25, u, mass);
  ASSERT_FALSE(fwd.diverged);
  ChainState back = fwd.proposal;
  for (double& v : back.momentum) v = -v;
  const auto rev = leapfrog(back, 0.01, 25, u, mass);
  for (std::size_t i = 0; i < s0.position.size(); ++i) {
    EXPECT_NEAR(rev.proposal.position[i], s0.position[i], 1e-8);
    EXPECT_NEAR(-rev.proposal.momentum[i], s0.momentum[i], 1e-8);
  }
}

namespace {

struct HarmonicErrors {
  double position;
  double energy;
};

// U = w^2 / 2 from (w, v) = (1, 0) to time T; exact w(T) = cos T.
HarmonicErrors harmonic(double eps, double t_end) {
  const PotentialFn u = gaussian_potential({1.0}, 1);
  const auto steps = static_cast<std::size_t>(std::llround(t_end / eps));
  const ChainState s = start_state(u, {1.0}, {0.0});
  const auto r = leapfrog(s, eps, steps, u, std::vector<double>{1.0});
  return {std::abs(r.proposal.position[0] - std::cos(t_end)), std::abs(r.proposal.hamiltonian() - s.hamiltonian())};
}

}  // namespace

TEST(Leapfrog, SecondOrderOnHarmonicOscillator) {
  const auto a = harmonic(0.1, 2.0), b = harmonic(0.05, 2.0);
  EXPECT_GE(a.position / b.position, 3.5);
  EXPECT_LE(a.position / b.position, 4.5);
  EXPECT_GE(a.energy / b.energy, 3.5);
  EXPECT_LE(a.energy / b.energy, 4.5);
  EXPECT_LT(a.energy, 1e-2);
}

TEST(HmcSample, CorrelatedGaussianCovariance) {
  HMCConfig cfg;
  cfg.step_size = 0.15;
  cfg.leapfrog_steps = 15;
  cfg.n_samples = 10000;
  cfg.burn_in = 500;
  cfg.seed = 7;
  const auto res = hmc_sample(gaussian_potential(corr_precision(0.9), 2), {0.0, 0.0}, cfg);
  double c00 = 0, c01 = 0, c11 = 0, m0 = 0, m1 = 0;
  const double n = static_cast<double>(res.samples.size());
  for (const auto& s : res.samples) {
    m0 += s[0] / n;
    m1 += s[1] / n;
  }
  for (const auto& s : res.samples) {
    c00 += (s[0] - m0) * (s[0] - m0) / n;
    c01 += (s[0] - m0) * (s[1] - m1) / n;
    c11 += (s[1] - m1) * (s[1] - m1) / n;
  }
  EXPECT_NEAR(c00, 1.0, 0.1);
  EXPECT_NEAR(c11, 1.0, 0.1);
  EXPECT_NEAR(c01, 0.9, 0.09);
  EXPECT_GT(res.acceptance_rate, 0.5);
}

TEST(HmcSample, TinyStepAcceptsAlmostEverything) {
  HMCConfig cfg;
  cfg.step_size = 1e-5;
  cfg.leapfrog_steps = 1;
  cfg.n_samples = 5000;
  cfg.burn_in = 0;
  const auto res = hmc_sample(gaussian_potential({1.0}, 1), {0.5}, cfg);
  EXPECT_GE(res.acceptance_rate, 0.999);
}

TEST(HmcSample, ConjugateNormalMean) {
  // w ~ N(0, 1), y_i ~ N(w, 0.5^2): posterior mean sum(y) / (n + 1/0.25 ... )
  const std::vector<double> y{0.8, 1.4, 0.9, 1.1, 1.3};
  const double s2 = 0.25, prec = 1.0 + 5.0 / s2;
  double sy = 0;
  for (double v : y) sy += v;
  const double post_mean = sy / s2 / prec;
  PotentialFn u = [&](std::span<const double> w) {
    Energy e;
    e.value = 0.5 * w[0] * w[0];
    double g = w[0];
    for (double v : y) {
      e.value += 0.5 * (v - w[0]) * (v - w[0]) / s2;
      g -= (v - w[0]) / s2;
    }
    e.grad = {g};
    return e;
  };
  HMCConfig cfg;
  cfg.step_size = 0.1;
  cfg.leapfrog_steps = 10;
  cfg.n_samples = 5000;
  cfg.burn_in = 200;
  const auto res = hmc_sample(u, {0.0}, cfg);
  std::vector<double> w;
  for (const auto& s : res.samples) w.push_back(s[0]);
  const auto m = moments(w);
  const double se = std::sqrt(m.var / res.ess[0]);
  EXPECT_LT(std::abs(m.mean - post_mean), 3 * se);
  EXPECT_NEAR(m.var, 1.0 / prec, 0.1 / prec);
}

TEST(HmcSample, DetailedBalanceOnDiscretisedTarget) {
  HMCConfig cfg;
  cfg.step_size = 0.3;
  cfg.leapfrog_steps = 3;
  cfg.n_samples = 1000000;
  cfg.burn_in = 100;
  cfg.seed = 11;
  const auto res = hmc_sample(gaussian_potential({1.0}, 1), {0.0}, cfg);
  auto state = [](double w) { return w < -0.5 ? 0 : (w < 0.5 ? 1 : 2); };
  long flow[3][3] = {};
  for (std::size_t t = 1; t < res.samples.size(); ++t) ++flow[state(res.samples[t - 1][0])][state(res.samples[t][0])];
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) {
      const double a = static_cast<double>(flow[i][j]), b = static_cast<double>(flow[j][i]);
      EXPECT_LT(std::abs(a - b) / (0.5 * (a + b)), 0.02) << i << "->" << j;
    }
}

TEST(HmcSample, InvalidConfigRejected) {
  HMCConfig cfg;
  cfg.step_size = 0.0;
  EXPECT_THROW(hmc_sample(gaussian_potential({1.0}, 1), {0.0}, cfg), ConfigError);
  cfg.step_size = 0.1;
  cfg.mass = {1.0, 2.0};
  EXPECT_THROW(hmc_sample(gaussian_potential({1.0}, 1), {0.0}, cfg), ConfigError);
}

TEST(HmcSample, LowAcceptanceWarns) {
  HMCConfig cfg;
  cfg.step_size = 5.0;
  cfg.leapfrog_steps = 30;
  cfg.n_samples = 100;
  cfg.burn_in = 200;
  const auto res = hmc_sample(gaussian_potential({100.0}, 1), {0.0}, cfg);
  EXPECT_FALSE(res.warning.empty());
}

TEST(HmcSample, NetworkWithGibbsRuns) {
  Rng rng(12);
  const auto spec = NetworkSpec::mlp(1, {5}, 1, {ActivationKind::tanh}, Task::regression, true);
  Tensor x(Shape{20, 1}), y(Shape{20, 1});
  for (std::size_t i = 0; i < 20; ++i) {
    x[i] = -2.0 + 0.2 * static_cast<double>(i);
    y[i] = std::sin(x[i]) + 0.1 * standard_normal(rng);
  }
  HMCConfig cfg;
  cfg.step_size = 0.005;
  cfg.leapfrog_steps = 20;
  cfg.n_samples = 300;
  cfg.burn_in = 100;
  const auto res = hmc_sample(spec, PriorSpec::gaussian(0, 1), LikelihoodSpec::gaussian(0.1), x, y, HyperPriorSpec{},
                              cfg);
  EXPECT_EQ(res.samples.size(), 300u);
  EXPECT_GT(res.acceptance_rate, 0.3);
  for (const auto& g : res.precisions) {
    EXPECT_GT(g.tau_prior, 0.0);
    EXPECT_GT(g.tau_noise, 0.0);
  }
  const std::string csv = chain_csv(res, true);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 301);
}

TEST(Gibbs, ZeroStatisticsDrawFromShiftedPrior) {
  Rng rng(13);
  HyperPriorSpec h{2.0, 0.5, 3.0, 0.25};
  const std::vector<double> w(4, 0.0), r(6, 0.0);
  std::vector<double> tp, tn;
  for (int i = 0; i < 100000; ++i) {
    const auto g = gibbs_update_precisions(w, r, h, rng);
    tp.push_back(g.tau_prior);
    tn.push_back(g.tau_noise);
  }
  const auto mp = moments(tp), mn = moments(tn);
  EXPECT_LT(std::abs(mp.mean - (2.0 + 2.0) / 0.5), 3 * mp.se);
  EXPECT_LT(std::abs(mn.mean - (3.0 + 3.0) / 0.25), 3 * mn.se);
}

TEST(Gibbs, MeanAndDistributionMatchConditional) {
  Rng rng(14);
  HyperPriorSpec h;
  const std::vector<double> w{0.4, -1.2, 0.9, 0.1, 2.0};
  double ww = 0;
  for (double v : w) ww += v * v;
  const double shape = h.a_prior + 2.5, rate = h.b_prior + 0.5 * ww;
  std::vector<double> tp(100000);
  for (double& t : tp) t = gibbs_update_precisions(w, {}, h, rng).tau_prior;
  const auto m = moments(tp);
  EXPECT_LT(std::abs(m.mean - shape / rate), 3 * m.se);

  // Brute-force grid posterior of tau: prior Gamma(a, b) times N(w | 0, 1/tau).
  const std::size_t g = 20001;
  const double hi = 20.0 * shape / rate;
  std::vector<double> grid(g), logd(g), cdf(g, 0.0);
  for (std::size_t i = 0; i < g; ++i) {
    grid[i] = hi * static_cast<double>(i) / static_cast<double>(g - 1);
    const double t = std::max(grid[i], 1e-300);
    logd[i] = (h.a_prior - 1) * std::log(t) - h.b_prior * t + 2.5 * std::log(t) - 0.5 * t * ww;
  }
  const double mx = *std::max_element(logd.begin(), logd.end());
  for (std::size_t i = 1; i < g; ++i)
    cdf[i] = cdf[i - 1] + 0.5 * (grid[i] - grid[i - 1]) * (std::exp(logd[i] - mx) + std::exp(logd[i - 1] - mx));
  for (double& c : cdf) c /= cdf.back();
  std::sort(tp.begin(), tp.end());
  double ks = 0.0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    const auto it = std::lower_bound(grid.begin(), grid.end(), tp[k]);
    const std::size_t j = std::min<std::size_t>(static_cast<std::size_t>(it - grid.begin()), g - 1);
    const double f = j == 0 ? 0.0
                            : cdf[j - 1] + (cdf[j] - cdf[j - 1]) * (tp[k] - grid[j - 1]) / (grid[j] - grid[j - 1]);
    const double n = static_cast<double>(tp.size());
    ks = std::max({ks, std::abs(f - static_cast<double>(k) / n), std::abs(f - static_cast<double>(k + 1) / n)});
  }
  EXPECT_LT(ks, 0.01);
}

TEST(RandomWalk, SymmetricTargetMean) {
  Rng rng(15);
  const PotentialFn u = gaussian_potential({1.0, 0.0, 0.0, 4.0}, 2);
  const auto res = random_walk_mh([&](std::span<const double> w) { return u(w).value; }, {0.0, 0.0}, 0.8, 50000, 1000, rng);
  for (std::size_t j = 0; j < 2; ++j) {
    std::vector<double> col;
    for (const auto& s : res.samples) col.push_back(s[j]);
    const auto m = moments(col);
    EXPECT_LT(std::abs(m.mean), 3 * std::sqrt(m.var / res.ess[j]));
  }
}

TEST(RandomWalk, TinyProposalAlwaysAccepts) {
  Rng rng(16);
  const PotentialFn u = gaussian_potential({1.0}, 1);
  const auto res = random_walk_mh([&](std::span<const double> w) { return u(w).value; }, {0.3}, 1e-8, 2000, 0, rng);
  EXPECT_GE(res.acceptance_rate, 0.999);
  EXPECT_THROW(random_walk_mh([&](std::span<const double> w) { return u(w).value; }, {0.3}, 0.0, 10, 0, rng),
               InvalidArgument);
}

TEST(RandomWalk, LowerEssThanHmcAtMatchedBudget) {
  const PotentialFn u = gaussian_potential(corr_precision(0.9), 2);
  HMCConfig cfg;
  cfg.step_size = 0.15;
  cfg.leapfrog_steps = 10;
  cfg.n_samples = 2000;
  cfg.burn_in = 200;
  const auto h = hmc_sample(u, {0.0, 0.0}, cfg);
  Rng rng(17);
  const std::size_t budget = h.grad_evals;
  const auto r = random_walk_mh([&](std::span<const double> w) { return u(w).value; }, {0.0, 0.0}, 0.5,
                                budget - 200, 200, rng);
  EXPECT_LT(r.mean_ess() / static_cast<double>(r.density_evals), h.mean_ess() / static_cast<double>(h.grad_evals));
}

TEST(Ess, IndependentAndAutoregressiveChains) {
  Rng rng(18);
  const std::size_t n = 20000;
  std::vector<double> iid(n), ar(n);
  const double phi = 0.8;
  double prev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    iid[i] = standard_normal(rng);
    prev = phi * prev + standard_normal(rng);
    ar[i] = prev;
  }
  EXPECT_NEAR(effective_sample_size(iid) / static_cast<double>(n), 1.0, 0.1);
  const double expect = static_cast<double>(n) * (1 - phi) / (1 + phi);
  EXPECT_NEAR(effective_sample_size(ar) / expect, 1.0, 0.15);
}

TEST(Histogram, CountsEveryValue) {
  const std::vector<double> v{0.0, 0.1, 0.5, 0.9, 1.0};
  const auto h = histogram(v, 2);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0].count + h[1].count, 5u);
  EXPECT_EQ(h[0].count, 2u);
}
