#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "bnn/nets.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

// Per test point summaries, all [N, D].
struct PredictiveSummary {
  Tensor mean;
  Tensor variance;  // includes sigma_noise^2 for regression
  Tensor mean_se;   // Monte Carlo standard error of `mean`
  Tensor lower;     // empty when too few samples for `level`
  Tensor upper;
  double level = 0.95;
  std::size_t n_samples = 0;
  bool interval = false;  // lower/upper filled

  bool has_interval() const { return interval; }
};

// Smallest sample count accepted by credible_interval at level beta.
std::size_t min_samples_for_level(double beta);

// Empirical quantile with linear interpolation between order statistics
// (h = (n - 1) q).
double quantile(std::vector<double> samples, double q);

// Equal-tailed interval at (1 - beta) / 2 and 1 - (1 - beta) / 2.
std::pair<double, double> credible_interval(std::span<const double> samples, double beta);
// Element-wise over a stack of same-shaped tensors.
std::pair<Tensor, Tensor> credible_interval(const std::vector<Tensor>& samples, double beta);

// Moments of network outputs f^{w_t}(x*) over T posterior draws, each
// sample [N, D]. Variance uses the 1/T convention; sigma_noise^2 is added
// for regression only. Intervals are filled when T allows `level`.
PredictiveSummary predictive_moments(const std::vector<Tensor>& samples, double sigma_noise, Task task,
                                     double level = 0.95);

}  // namespace bnn
