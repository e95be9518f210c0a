#pragma once

#include <functional>
#include <span>
#include <vector>

#include "bnn/autodiff.hpp"
#include "bnn/nets.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

inline constexpr double kLog2Pi = 1.8378770664093454836;

// I.i.d. per-weight prior. The spike-slab variant is the zero-mean mixture
// pi * N(0, sigma_slab^2) + (1 - pi) * N(0, sigma_spike^2).
struct PriorSpec {
  enum class Kind { gaussian, spike_slab };

  Kind kind = Kind::spike_slab;
  double mean = 0.0;
  double sigma = 1.0;
  double pi = 0.5;
  double sigma_slab = 1.0;
  double sigma_spike = 0.0625;

  static PriorSpec gaussian(double mean, double sigma);
  static PriorSpec spike_slab(double pi, double sigma_slab, double sigma_spike);

  void validate() const;
  double log_density(double w) const;
};

struct LikelihoodSpec {
  enum class Kind { gaussian, categorical };

  Kind kind = Kind::gaussian;
  double sigma_noise = 1.0;

  static LikelihoodSpec gaussian(double sigma_noise);
  static LikelihoodSpec categorical();

  void validate() const;
};

double log_prior(const PriorSpec& prior, std::span<const double> weights);
double log_prior(const PriorSpec& prior, const ParameterSet& params);
// Summed log prior density of every element of `weights`.
ad::Var log_prior(const PriorSpec& prior, ad::Var weights);

// Gaussian: net_out and targets hold the same number of elements.
// Categorical: net_out is [N, K] class probabilities, targets N class indices.
double log_likelihood(const LikelihoodSpec& lik, const Tensor& net_out, const Tensor& targets);
// Tape version. For the categorical case `net_out` holds logits.
ad::Var log_likelihood(const LikelihoodSpec& lik, ad::Var net_out, const Tensor& targets);

// log p(w) + log p(D | w); the normalising evidence is not computed.
double log_posterior_unnorm(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec,
                            const ParameterSet& params, const Tensor& inputs, const Tensor& targets);

// KL(q || p) between diagonal Gaussians, summed over dimensions.
double kl_diag_gaussians(std::span<const double> mu_q, std::span<const double> sigma_q, std::span<const double> mu_p,
                         std::span<const double> sigma_p);
inline double kl_diag_gaussians(double mu_q, double sigma_q, double mu_p, double sigma_p) {
  return kl_diag_gaussians(std::span<const double>(&mu_q, 1), std::span<const double>(&sigma_q, 1),
                           std::span<const double>(&mu_p, 1), std::span<const double>(&sigma_p, 1));
}

// Two univariate densities tabulated on a shared grid.
struct DensityPair {
  std::vector<double> grid;
  std::vector<double> p;
  std::vector<double> q;

  static DensityPair gaussians(double mu_p, double sigma_p, double mu_q, double sigma_q, double lo, double hi,
                               std::size_t nodes);
  static DensityPair from_log_densities(std::vector<double> grid, const std::function<double(double)>& log_p,
                                        const std::function<double(double)>& log_q);
};

double trapezoid(std::span<const double> x, std::span<const double> y);

// D_alpha[p || q] = (1 - integral p^alpha q^(1-alpha)) / (alpha (1 - alpha)).
// alpha -> 1 recovers KL(p || q), alpha -> 0 recovers KL(q || p).
double alpha_divergence(const DensityPair& pair, double alpha);

// D_H with D_H^2 = integral (sqrt p - sqrt q)^2.
double hellinger_distance(const DensityPair& pair);

}  // namespace bnn
