#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bnn/hmc.hpp"
#include "bnn/nets.hpp"
#include "bnn/prob.hpp"
#include "bnn/random.hpp"

namespace bnn {

struct MapOptions {
  std::size_t adam_steps = 500;  // warm start before Newton
  double learning_rate = 0.01;
  std::size_t newton_steps = 100;
  double grad_tol = 1e-6;
};

struct MapResult {
  std::vector<double> w;
  double potential = 0.0;
  double grad_norm = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

// Minimise U = -ln p(w) - ln p(D | w): Adam warm start, then damped Newton on
// the finite-difference Hessian. `init` defaults to all zeros.
MapResult find_map(const PotentialFn& potential, std::vector<double> init, const MapOptions& opts);

// Central differences of grad U, step 1e-4 (1 + |w_j|), symmetrised.
// Row-major k x k.
std::vector<double> finite_difference_hessian(const PotentialFn& potential, std::span<const double> w);

struct LaplaceReport {
  std::vector<double> w_map;
  double log_likelihood = 0.0;  // ln p(D | w_MAP)
  double log_occam = 0.0;       // ln p(w_MAP) + k/2 ln 2pi - 1/2 ln det A
  double log_evidence = 0.0;    // log_likelihood + log_occam
  std::vector<double> hessian;  // A, row-major
  std::size_t k = 0;
  double log_det = 0.0;
  double min_eigenvalue = 0.0;
  double grad_norm = 0.0;

  // key=value lines.
  std::string to_text() const;
};

// Laplace approximation of ln p(D | H). Throws NumericalError if the MAP
// search does not reach grad_tol or A is not positive definite.
LaplaceReport laplace_evidence(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec,
                               const Tensor& x, const Tensor& y, const MapOptions& opts = {},
                               const std::vector<double>* init = nullptr);

// The same decomposition at a given w without optimising or checking the
// gradient.
LaplaceReport laplace_at(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec, const Tensor& x,
                         const Tensor& y, std::span<const double> w);

// exp(log_evidence - log_likelihood).
double occam_factor(const LaplaceReport& report);

// Normalised p(H_i | D) from ln p(D | H_i) and p(H_i).
std::vector<double> model_posterior(std::span<const double> log_evidence, std::span<const double> model_prior);

// x -> [x, x^2, ..., x^degree]; the constant term is the network bias.
Tensor polynomial_features(std::span<const double> x, std::size_t degree);

struct DegreeSelection {
  std::vector<std::size_t> degrees;
  std::vector<LaplaceReport> reports;
  std::vector<double> posterior;  // uniform model prior
  std::size_t best = 0;           // degree with the largest evidence
};

// Bayesian linear regression on polynomial features with N(0, prior_sigma^2)
// weights and N(0, noise_sigma^2) noise, one Laplace evidence per degree.
DegreeSelection select_polynomial_degree(std::span<const double> x, std::span<const double> y,
                                         const std::vector<std::size_t>& degrees, double prior_sigma,
                                         double noise_sigma, const MapOptions& opts = {});

// Running factorised Gaussian; `var` holds variances.
struct AdfState {
  std::vector<double> mean;
  std::vector<double> var;
  std::size_t t = 0;

  void validate() const;
};

struct LogMarginalGrad {
  double log_z = 0.0;
  std::vector<double> d_mean;  // d ln Z / d mean
  std::vector<double> d_var;   // d ln Z / d var
};

// mean += var * dlnZ/dmean; var -= var^2 [(dlnZ/dmean)^2 - 2 dlnZ/dvar].
// Throws NumericalError ("ADF variance collapse") if a variance is not
// positive afterwards.
AdfState adf_update(const AdfState& state, const LogMarginalGrad& g);

// Z = integral N(w; mean, var) exp(loglik(w)) dw for a scalar weight by the
// trapezoid rule on mean +- width sd.
LogMarginalGrad log_marginal_quadrature(double mean, double var, const std::function<double(double)>& loglik,
                                        std::size_t nodes = 4001, double width = 12.0);

// Monte Carlo version over a factorised state.
LogMarginalGrad log_marginal_mc(const AdfState& state,
                                const std::function<double(std::span<const double>)>& loglik, std::size_t n_samples,
                                Rng& rng);

// Sequential ADF for y_t | w ~ N(w, noise^2) with quadrature ln Z.
std::vector<AdfState> adf_gaussian_sequence(double prior_mean, double prior_var, std::span<const double> y,
                                            double noise_sigma);

}  // namespace bnn
