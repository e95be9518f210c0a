#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bnn/autodiff.hpp"
#include "bnn/nets.hpp"
#include "bnn/optim.hpp"
#include "bnn/predictive.hpp"
#include "bnn/prob.hpp"
#include "bnn/random.hpp"

namespace bnn {

// ln(1 + e^x), kept strictly positive (floored at the smallest subnormal).
double softplus(double x);
double softplus_inverse(double y);

// Factorised Gaussian over every weight: w ~ N(mu, softplus(rho)^2).
struct VariationalPosterior {
  ParameterSet mu;
  ParameterSet rho;

  // mu ~ N(0, mu_std^2), sigma = sigma0 everywhere.
  static VariationalPosterior init(const NetworkSpec& spec, Rng& rng, double mu_std = 0.1, double sigma0 = 0.05);
  // Every mean set to `mean`, every sigma to `sigma`.
  static VariationalPosterior constant(const NetworkSpec& spec, double mean, double sigma);

  ParameterSet sigma() const;
  void check(const NetworkSpec& spec) const;
};

// w = mu + softplus(rho) * eps, eps ~ N(0, I).
ParameterSet sample_weights(const VariationalPosterior& vp, Rng& rng);

// Reparameterised weights on a tape together with ln q(w) and ln p(w).
struct TapeSample {
  NetVars weights;
  ad::Var log_q;
  ad::Var log_p;
};
TapeSample sample_on_tape(ad::Tape& tape, const NetVars& mu, const NetVars& rho, const PriorSpec& prior, Rng& rng);

struct ElboOptions {
  // Sample dense-layer pre-activations instead of weights. ln q - ln p then
  // uses a separately drawn weight sample.
  bool local_reparam = false;
};

struct ElboEstimate {
  double value = 0.0;  // mean over draws
  double se = 0.0;     // MC standard error (0 for a single draw)
  double nll = 0.0;    // -(N/M) ln p(batch | w), averaged over draws
  double kl = 0.0;     // ln q(w) - ln p(w), averaged over draws
  ParameterSet grad_mu;   // d value / d mu
  ParameterSet grad_rho;  // d value / d rho
};

// Minibatch ELBO estimate
//   F = -(1/n) sum_i [ln q(w_i) - ln p(w_i)] + (N_data / M) (1/n) sum_i ln p(batch | w_i)
// with reparameterised gradients. n_data == 0 drops the likelihood term.
ElboEstimate elbo_estimate(const VariationalPosterior& vp, const PriorSpec& prior, const LikelihoodSpec& lik,
                           const NetworkSpec& spec, const Tensor& batch_x, const Tensor& batch_y, std::size_t n_data,
                           std::size_t n_samples, Rng& rng, const ElboOptions& opts = {});

struct BbbResult {
  VariationalPosterior posterior;
  std::vector<TraceRow> trace;
  bool diverged = false;
  std::string message;
};

using EpochCallback = std::function<void(const TraceRow&)>;

// Bayes by Backprop: per minibatch draw eps, form w, descend -F in (mu, rho).
// Stops early with diverged = true on a non-finite estimate.
BbbResult bbb_train(const NetworkSpec& spec, const PriorSpec& prior, const LikelihoodSpec& lik, const Tensor& x,
                    const Tensor& y, const TrainConfig& cfg, const ElboOptions& opts = {},
                    const VariationalPosterior* init = nullptr, const EpochCallback& on_epoch = {});

// Network outputs (probabilities for classification) for T weight draws.
std::vector<Tensor> bbb_output_samples(const NetworkSpec& spec, const VariationalPosterior& vp, const Tensor& x,
                                       std::size_t n_samples, Rng& rng);
PredictiveSummary bbb_predict(const NetworkSpec& spec, const VariationalPosterior& vp, const Tensor& x,
                              std::size_t n_samples, double sigma_noise, Rng& rng, double level = 0.95);

// ---------------------------------------------------------------------------
// Gradient estimators for d/d(mu, sigma) E_q[f(w)], q = N(mu, diag(sigma^2)).

using TapeFn = std::function<ad::Var(ad::Var)>;

struct GradientEstimate {
  std::vector<double> d_mu;
  std::vector<double> d_sigma;
  std::vector<double> se_mu;   // standard error of d_mu
  std::vector<double> var_mu;  // per-draw variance of the d_mu terms
};

// (1/L) sum f(w_i) grad_theta ln q(w_i).
GradientEstimate score_function_grad(const TapeFn& f, std::span<const double> mu, std::span<const double> sigma,
                                     std::size_t n_samples, Rng& rng);
// (1/L) sum grad_w f(mu + sigma eps_i) * d w / d theta.
GradientEstimate pathwise_grad(const TapeFn& f, std::span<const double> mu, std::span<const double> sigma,
                               std::size_t n_samples, Rng& rng);

// Monte Carlo check of the Gaussian gradient identities
//   grad_mu E[f] = E[grad f],   grad_Sigma E[f] = 1/2 E[grad grad f]
// (diagonal Sigma). Left sides use the score function, right sides the tape
// gradient and a central difference of it. Discrepancies are paired-sample
// z-scores.
struct IdentityReport {
  std::vector<double> mean_lhs, mean_rhs;
  std::vector<double> cov_lhs, cov_rhs;
  double max_z_mean = 0.0;
  double max_z_cov = 0.0;
  double max_z() const { return std::max(max_z_mean, max_z_cov); }
};
IdentityReport gaussian_identity_check(const TapeFn& f, std::span<const double> mu, std::span<const double> sigma,
                                       std::size_t n_samples, Rng& rng);

// ---------------------------------------------------------------------------
// MC Dropout.

struct DropoutPosterior {
  ParameterSet mean;
  std::map<std::size_t, double> rates;  // per dense layer, applied to its input units
  double weight_decay = 0.0;            // lambda

  static DropoutPosterior uniform(const NetworkSpec& spec, ParameterSet mean, double p, double weight_decay);
  double rate(std::size_t layer) const;
  void validate(const NetworkSpec& spec) const;
};

// Per dense layer input mask, [N, fan_in], entries 0 or 1.
using DropoutMasks = std::map<std::size_t, Tensor>;

DropoutMasks sample_dropout_masks(const NetworkSpec& spec, const DropoutPosterior& dp, std::size_t batch, Rng& rng);

// Stochastic: sampled Bernoulli(1 - p) input masks. Deterministic: inputs
// scaled by (1 - p).
Tensor dropout_forward(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x, Rng& rng, bool stochastic);
Tensor dropout_forward(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x, const DropoutMasks& masks);

struct DropoutResult {
  DropoutPosterior posterior;
  std::vector<TraceRow> trace;
  bool diverged = false;
  std::string message;
};

// Minimises (N/M) NLL(batch; masked forward) + lambda ||M||^2.
DropoutResult mc_dropout_train(const NetworkSpec& spec, const LikelihoodSpec& lik, const Tensor& x, const Tensor& y,
                               const TrainConfig& cfg, double p, double weight_decay,
                               const EpochCallback& on_epoch = {});

// Plain point-estimate training of the same objective without masks.
DropoutResult map_train(const NetworkSpec& spec, const LikelihoodSpec& lik, const Tensor& x, const Tensor& y,
                        const TrainConfig& cfg, double weight_decay, const EpochCallback& on_epoch = {});

std::vector<Tensor> mc_dropout_output_samples(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x,
                                              std::size_t n_samples, Rng& rng);
PredictiveSummary mc_dropout_predict(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x,
                                     std::size_t n_samples, double sigma_noise, Rng& rng, double level = 0.95);

// ---------------------------------------------------------------------------

// phi ~ N(gamma, delta^2) with gamma = x mu (+ b_mu), delta^2 = x^2 sigma^2
// (+ b_sigma^2). x is [N, in]; mu, sigma are [in, out].
Tensor local_reparam_forward(const Tensor& mu, const Tensor& sigma, const Tensor& x, Rng& rng);
// Tape version used inside ELBO estimates; eps drawn from rng.
ad::Var local_reparam_forward(ad::Var x, const LayerVars& mu, const LayerVars& rho, Rng& rng);

}  // namespace bnn
