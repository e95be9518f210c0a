#include "bnn/predictive.hpp"

#include <algorithm>
#include <cmath>

#include "bnn/error.hpp"

namespace bnn {

std::size_t min_samples_for_level(double beta) {
  if (!(beta > 0.0 && beta < 1.0)) throw InvalidArgument("credible level must lie in (0, 1)");
  // At least 1.25 expected samples in each tail.
  return static_cast<std::size_t>(std::ceil(2.5 / (1.0 - beta) - 1e-9));
}

double quantile(std::vector<double> samples, double q) {
  if (samples.empty()) throw InvalidArgument("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw InvalidArgument("quantile level must lie in [0, 1]");
  std::sort(samples.begin(), samples.end());
  const double h = (static_cast<double>(samples.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  return samples[lo] + (h - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
}

std::pair<double, double> credible_interval(std::span<const double> samples, double beta) {
  const std::size_t need = min_samples_for_level(beta);
  if (samples.size() < need)
    throw InvalidArgument("credible interval at level " + std::to_string(beta) + " needs at least " +
                          std::to_string(need) + " samples, got " + std::to_string(samples.size()));
  std::vector<double> s(samples.begin(), samples.end());
  return {quantile(s, (1.0 - beta) / 2.0), quantile(s, 1.0 - (1.0 - beta) / 2.0)};
}

std::pair<Tensor, Tensor> credible_interval(const std::vector<Tensor>& samples, double beta) {
  if (samples.empty()) throw InvalidArgument("credible interval of an empty sample");
  const Shape& shape = samples.front().shape();
  Tensor lo(shape), hi(shape);
  std::vector<double> column(samples.size());
  for (std::size_t i = 0; i < lo.size(); ++i) {
    for (std::size_t t = 0; t < samples.size(); ++t) column[t] = samples[t][i];
    std::tie(lo[i], hi[i]) = credible_interval(column, beta);
  }
  return {std::move(lo), std::move(hi)};
}

PredictiveSummary predictive_moments(const std::vector<Tensor>& samples, double sigma_noise, Task task, double level) {
  if (samples.size() < 2) throw InvalidArgument("predictive moments need at least two samples");
  const Shape& shape = samples.front().shape();
  for (const Tensor& s : samples)
    if (s.shape() != shape) throw ShapeError("predictive samples differ in shape");
  const double t = static_cast<double>(samples.size());
  PredictiveSummary out;
  out.n_samples = samples.size();
  out.level = level;
  out.mean = Tensor(shape, 0.0);
  out.variance = Tensor(shape, 0.0);
  out.mean_se = Tensor(shape, 0.0);
  for (const Tensor& s : samples)
    for (std::size_t i = 0; i < s.size(); ++i) out.mean[i] += s[i];
  for (double& m : out.mean.values()) m /= t;
  for (const Tensor& s : samples)
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double d = s[i] - out.mean[i];
      out.variance[i] += d * d;
    }
  const double noise = task == Task::regression ? sigma_noise * sigma_noise : 0.0;
  for (std::size_t i = 0; i < out.variance.size(); ++i) {
    const double v = out.variance[i] / t;
    out.mean_se[i] = std::sqrt(v / t);
    out.variance[i] = v + noise;
  }
  if (samples.size() >= min_samples_for_level(level)) {
    std::tie(out.lower, out.upper) = credible_interval(samples, level);
    out.interval = true;
  }
  return out;
}

}  // namespace bnn
