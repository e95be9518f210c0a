#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "bnn/error.hpp"
#include "bnn/gp.hpp"
#include "test_util.hpp"

using namespace bnn;
using bnn::testing::random_tensor;

namespace {

std::span<const double> row_of(const Tensor& t, std::size_t i) {
  return {t.values().data() + i * t.shape()[1], t.shape()[1]};
}

Tensor column(const std::vector<double>& v) { return Tensor(Shape{v.size(), 1}, v); }

struct Toy {
  Tensor x;
  std::vector<double> y;
};

Toy make_toy(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  Toy t{random_tensor({n, 1}, rng, -2.0, 2.0), {}};
  std::normal_distribution<double> e(0, 0.1);
  for (std::size_t i = 0; i < n; ++i) t.y.push_back(std::sin(2 * t.x[i]) + e(rng));
  return t;
}

}  // namespace

TEST(Kernel, ReferenceValues) {
  const KernelSpec k{KernelKind::matern52, 0.7, 2.5};
  const std::vector<double> a{0.3, -1.0}, b{1.1, 0.4};
  EXPECT_EQ(kernel_eval(k, a, a), 2.5);
  EXPECT_EQ(kernel_eval(k, a, b), kernel_eval(k, b, a));
  const double r = std::sqrt(0.8 * 0.8 + 1.4 * 1.4), s = std::sqrt(5.0) * r / 0.7;
  EXPECT_NEAR(kernel_eval(k, a, b), 2.5 * (1 + s + s * s / 3) * std::exp(-s), 1e-14);
  const KernelSpec rbf{KernelKind::rbf, 0.7, 2.5};
  EXPECT_NEAR(kernel_eval(rbf, a, b), 2.5 * std::exp(-r * r / (2 * 0.49)), 1e-14);
  EXPECT_THROW((KernelSpec{KernelKind::rbf, 0.0, 1.0}.validate()), InvalidArgument);
  EXPECT_EQ(parse_kernel("matern52"), KernelKind::matern52);
  EXPECT_THROW(parse_kernel("linear"), ConfigError);
}

TEST(Kernel, MatrixIsPositiveSemidefinite) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const Tensor x = random_tensor({10, 2}, rng);
    for (auto kind : {KernelKind::matern52, KernelKind::rbf}) {
      const Tensor k = kernel_matrix({kind, 0.8, 1.3}, x, x);
      Eigen::MatrixXd m(10, 10);
      for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j) m(i, j) = k.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
      EXPECT_GT(eig.eigenvalues().minCoeff(), -1e-10);
    }
  }
}

TEST(GaussianProcess, InterpolatesWithoutNoise) {
  const Toy t = make_toy(1, 10);
  const auto m = gp_fit({KernelKind::matern52, 0.5, 1.0}, 0.0, t.x, t.y);
  const auto s = gp_predict(m, t.x);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(s.mean[i], t.y[i], 1e-6);
}

TEST(GaussianProcess, MatchesExplicitInverse) {
  const Toy t = make_toy(2, 20);
  const KernelSpec k{KernelKind::matern52, 0.6, 1.4};
  const double noise = 0.05;
  const auto m = gp_fit(k, noise, t.x, t.y);
  Rng rng(3);
  const Tensor xs = random_tensor({15, 1}, rng, -3.0, 3.0);
  const auto s = gp_predict(m, xs);

  Eigen::MatrixXd kk(20, 20), ks(20, 15);
  Eigen::VectorXd y(20);
  for (int i = 0; i < 20; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    y[i] = t.y[ui];
    for (int j = 0; j < 20; ++j) kk(i, j) = kernel_eval(k, row_of(t.x, ui), row_of(t.x, static_cast<std::size_t>(j)));
    for (int j = 0; j < 15; ++j) ks(i, j) = kernel_eval(k, row_of(t.x, ui), row_of(xs, static_cast<std::size_t>(j)));
  }
  const Eigen::MatrixXd inv = (kk + noise * Eigen::MatrixXd::Identity(20, 20)).inverse();
  const Eigen::VectorXd mean = ks.transpose() * inv * y;
  for (int j = 0; j < 15; ++j) {
    const auto uj = static_cast<std::size_t>(j);
    const double var = k.variance - (ks.col(j).transpose() * inv * ks.col(j))(0, 0) + noise;
    EXPECT_NEAR(s.mean[uj], mean[j], 1e-8);
    EXPECT_NEAR(s.variance[uj], var, 1e-8);
  }
}

TEST(GaussianProcess, VarianceGrowsAwayFromData) {
  const Toy t = make_toy(4, 12);
  const auto m = gp_fit({KernelKind::matern52, 0.5, 1.0}, 0.01, t.x, t.y);
  const auto near = gp_predict(m, t.x);
  const auto far = gp_predict(m, column({10.0}));
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_LE(near.variance[i], far.variance[0]);
    EXPECT_GE(near.variance[i], 0.0);
    const double sd = std::sqrt(near.variance[i]);
    EXPECT_LE(near.lower[i], near.mean[i] - sd);
    EXPECT_GE(near.upper[i], near.mean[i] + sd);
  }
}

TEST(GaussianProcess, DeterministicPrediction) {
  const Toy t = make_toy(5, 20);
  const auto m = gp_fit({KernelKind::rbf, 0.5, 1.0}, 0.01, t.x, t.y);
  Rng rng(6);
  const Tensor xs = random_tensor({30, 1}, rng, -3, 3);
  const auto a = gp_predict(m, xs), b = gp_predict(m, xs);
  EXPECT_EQ(a.mean.values(), b.mean.values());
  EXPECT_EQ(a.variance.values(), b.variance.values());
}

TEST(GaussianProcess, DuplicateInputsNeedJitter) {
  const auto m = gp_fit({KernelKind::rbf, 1.0, 1.0}, 0.0, column({0.5, 0.5, 1.0}), std::vector<double>{1.0, 1.0, 2.0});
  EXPECT_GT(m.jitter, 0.0);
  EXPECT_LE(m.jitter, 1e-6);
}

TEST(NnPrior, SingleUnitIsHeavyTailed) {
  Rng rng(7);
  const auto f = nn_prior_sample_outputs({1}, 10000, std::vector<double>{0.2, -0.4}, rng);
  const auto st = normality_statistic(f);
  EXPECT_GT(std::abs(st.excess_kurtosis[0]), 0.5);
}

TEST(NnPrior, WideLayerIsNearlyGaussian) {
  Rng rng(8);
  const auto f = nn_prior_sample_outputs({100}, 10000, std::vector<double>{0.2, -0.4}, rng);
  const auto st = normality_statistic(f);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_LT(std::abs(st.skewness[j]), 0.1);
    EXPECT_LT(std::abs(st.excess_kurtosis[j]), 0.2);
  }
}

TEST(NnPrior, OutputVarianceStableUnderScaling) {
  Rng rng(9);
  const auto a = nn_prior_sample_outputs({10}, 10000, std::vector<double>{0.2}, rng);
  const auto b = nn_prior_sample_outputs({100}, 10000, std::vector<double>{0.2}, rng);
  const double ratio = bnn::testing::moments(b.values()).var / bnn::testing::moments(a.values()).var;
  EXPECT_GE(ratio, 0.8);
  EXPECT_LE(ratio, 1.25);
}

TEST(NnPrior, KurtosisShrinksWithWidth) {
  Rng rng(10);
  std::vector<double> kurt;
  for (std::size_t h : {1, 3, 10, 100}) {
    const auto f = nn_prior_sample_outputs({h}, 10000, std::vector<double>{0.2, -0.4}, rng);
    kurt.push_back(std::abs(normality_statistic(f).excess_kurtosis[0]));
  }
  int inversions = 0;
  for (std::size_t i = 1; i < kurt.size(); ++i) inversions += kurt[i] > kurt[i - 1];
  EXPECT_LE(inversions, 1);
}

TEST(Normality, CalibratedOnKnownDistributions) {
  Rng rng(11);
  std::vector<double> z(100000), u(100000);
  for (double& v : z) v = standard_normal(rng);
  std::uniform_real_distribution<double> ud(0, 1);
  for (double& v : u) v = ud(rng);
  const auto sz = normality_statistic(z), su = normality_statistic(u);
  EXPECT_LT(std::abs(sz.skewness[0]), 0.03);
  EXPECT_LT(std::abs(sz.excess_kurtosis[0]), 0.06);
  EXPECT_NEAR(su.excess_kurtosis[0], -1.2, 0.1);
}

TEST(Normality, BivariateGaussianHasZeroMardiaExcess) {
  Rng rng(12);
  Tensor s(Shape{20000, 2});
  for (std::size_t i = 0; i < 20000; ++i) {
    const double a = standard_normal(rng), b = standard_normal(rng);
    s.at(i, 0) = a;
    s.at(i, 1) = 0.8 * a + 0.6 * b;
  }
  EXPECT_NEAR(normality_statistic(s).mardia_kurtosis, 0.0, 0.15);
}

TEST(Normality, DegenerateInputsRejected) {
  EXPECT_THROW(normality_statistic(std::vector<double>(5000, 1.0)), InvalidArgument);
  EXPECT_THROW(normality_statistic(std::vector<double>(999, 1.0)), InvalidArgument);
}
