#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bnn/nets.hpp"
#include "bnn/predictive.hpp"
#include "bnn/random.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class KernelKind { matern52, rbf };

KernelKind parse_kernel(std::string_view name);
std::string to_string(KernelKind k);

struct KernelSpec {
  KernelKind kind = KernelKind::matern52;
  double lengthscale = 1.0;
  double variance = 1.0;  // s^2

  void validate() const;
};

double kernel_eval(const KernelSpec& k, std::span<const double> x, std::span<const double> x2);
// Rows of a [N, D] and b [M, D] -> [N, M].
Tensor kernel_matrix(const KernelSpec& k, const Tensor& a, const Tensor& b);

struct GPModel {
  KernelSpec kernel;
  double noise_var = 0.0;
  double jitter = 0.0;         // added to the diagonal on top of noise_var
  Tensor x;                    // [N, D]
  std::vector<double> y;
  std::vector<double> chol;    // lower factor of K + (noise_var + jitter) I, row-major
  std::vector<double> alpha;   // (K + ...)^-1 y
};

// Cholesky of K + noise_var I, retrying with diagonal jitter 1e-10 ... 1e-6.
// Throws NumericalError after the largest jitter fails.
GPModel gp_fit(const KernelSpec& kernel, double noise_var, const Tensor& x, std::span<const double> y);

// Posterior of y* (latent variance plus noise_var when include_noise).
// lower / upper hold the +-2 sd band.
PredictiveSummary gp_predict(const GPModel& m, const Tensor& x_star, bool include_noise = true);

struct NnPriorConfig {
  std::size_t hidden = 1;
  Activation activation{ActivationKind::tanh};
  double sigma_in = 5.0;    // input-to-hidden weights
  double sigma_out = 5.0;   // hidden-to-output weights are N(0, sigma_out^2 / H)
  double sigma_bias = 0.0;  // hidden biases; 0 means no biases
};

// f(probe) for n_draws prior networks: [n_draws, probes.size()].
Tensor nn_prior_sample_outputs(const NnPriorConfig& cfg, std::size_t n_draws, std::span<const double> probes, Rng& rng);

struct NormalityStats {
  std::vector<double> skewness;         // per column
  std::vector<double> excess_kurtosis;  // per column
  double mardia_kurtosis = 0.0;         // b_{2,d} - d (d + 2); 0 for a Gaussian
};

// Columns of [N, D] samples (N >= 1000). Throws InvalidArgument on too few
// samples or a zero-variance column.
NormalityStats normality_statistic(const Tensor& samples);
NormalityStats normality_statistic(std::span<const double> samples);

}  // namespace bnn
