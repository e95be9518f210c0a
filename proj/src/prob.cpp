#include "bnn/prob.hpp"

#include <algorithm>
#include <cmath>

#include "bnn/error.hpp"

namespace bnn {

namespace {

constexpr std::size_t kMinGridNodes = 100;

void check_grid(const DensityPair& pair) {
  if (pair.grid.size() != pair.p.size() || pair.grid.size() != pair.q.size())
    throw InvalidArgument("density pair: grid and densities differ in length");
  if (pair.grid.size() < kMinGridNodes)
    throw InvalidArgument("density pair: grid too coarse (" + std::to_string(pair.grid.size()) + " < " +
                          std::to_string(kMinGridNodes) + " nodes)");
  for (std::size_t i = 0; i < pair.grid.size(); ++i)
    if (pair.p[i] < 0.0 || pair.q[i] < 0.0) throw InvalidArgument("density pair: negative density value");
}

double gaussian_log_density(double x, double mean, double sigma) {
  const double z = (x - mean) / sigma;
  return -0.5 * kLog2Pi - std::log(sigma) - 0.5 * z * z;
}

std::vector<std::size_t> class_indices(const Tensor& targets, std::size_t rows, std::size_t classes) {
  if (targets.size() != rows)
    throw ShapeError("categorical likelihood: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double t = targets[i];
    if (t < 0.0 || t != std::floor(t) || t >= static_cast<double>(classes))
      throw InvalidArgument("categorical likelihood: invalid class index " + std::to_string(t));
    idx[i] = static_cast<std::size_t>(t);
  }
  return idx;
}

}  // namespace

PriorSpec PriorSpec::gaussian(double mean, double sigma) {
  PriorSpec p;
  p.kind = Kind::gaussian;
  p.mean = mean;
  p.sigma = sigma;
  p.validate();
  return p;
}

PriorSpec PriorSpec::spike_slab(double pi, double sigma_slab, double sigma_spike) {
  PriorSpec p;
  p.kind = Kind::spike_slab;
  p.pi = pi;
  p.sigma_slab = sigma_slab;
  p.sigma_spike = sigma_spike;
  p.validate();
  return p;
}

void PriorSpec::validate() const {
  if (kind == Kind::gaussian) {
    if (!(sigma > 0.0)) throw InvalidArgument("gaussian prior: sigma must be positive");
    return;
  }
  if (!(sigma_slab > 0.0) || !(sigma_spike > 0.0)) throw InvalidArgument("spike-slab prior: sigmas must be positive");
  if (!(pi >= 0.0 && pi <= 1.0)) throw InvalidArgument("spike-slab prior: pi must lie in [0, 1]");
  if (!(sigma_spike < sigma_slab)) throw InvalidArgument("spike-slab prior: sigma_spike must be below sigma_slab");
}

double PriorSpec::log_density(double w) const {
  if (kind == Kind::gaussian) return gaussian_log_density(w, mean, sigma);
  if (pi == 1.0) return gaussian_log_density(w, 0.0, sigma_slab);
  if (pi == 0.0) return gaussian_log_density(w, 0.0, sigma_spike);
  const double a = std::log(pi) + gaussian_log_density(w, 0.0, sigma_slab);
  const double b = std::log1p(-pi) + gaussian_log_density(w, 0.0, sigma_spike);
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

LikelihoodSpec LikelihoodSpec::gaussian(double sigma_noise) {
  LikelihoodSpec l;
  l.kind = Kind::gaussian;
  l.sigma_noise = sigma_noise;
  l.validate();
  return l;
}

LikelihoodSpec LikelihoodSpec::categorical() {
  LikelihoodSpec l;
  l.kind = Kind::categorical;
  return l;
}

void LikelihoodSpec::validate() const {
  if (kind == Kind::gaussian && !(sigma_noise > 0.0)) throw InvalidArgument("gaussian likelihood: sigma_noise must be positive");
}

double log_prior(const PriorSpec& prior, std::span<const double> weights) {
  double s = 0.0;
  for (double w : weights) s += prior.log_density(w);
  return s;
}

double log_prior(const PriorSpec& prior, const ParameterSet& params) {
  const auto flat = params.flatten();
  return log_prior(prior, flat);
}

ad::Var log_prior(const PriorSpec& prior, ad::Var weights) {
  const double n = static_cast<double>(weights.value().size());
  auto gaussian_terms = [&](double mean, double sigma) {
    ad::Var centred = mean == 0.0 ? weights : ad::add_scalar(weights, -mean);
    return ad::add_scalar(ad::scale(ad::square(centred), -0.5 / (sigma * sigma)), -0.5 * kLog2Pi - std::log(sigma));
  };
  if (prior.kind == PriorSpec::Kind::gaussian)
    return ad::add_scalar(ad::scale(ad::sum(ad::square(prior.mean == 0.0 ? weights : ad::add_scalar(weights, -prior.mean))),
                                    -0.5 / (prior.sigma * prior.sigma)),
                          n * (-0.5 * kLog2Pi - std::log(prior.sigma)));
  if (prior.pi == 1.0) return ad::sum(gaussian_terms(0.0, prior.sigma_slab));
  if (prior.pi == 0.0) return ad::sum(gaussian_terms(0.0, prior.sigma_spike));
  ad::Var a = ad::add_scalar(gaussian_terms(0.0, prior.sigma_slab), std::log(prior.pi));
  ad::Var b = ad::add_scalar(gaussian_terms(0.0, prior.sigma_spike), std::log1p(-prior.pi));
  ad::Var m = ad::maximum(a, b);
  ad::Var lse = m + ad::log(ad::exp(a - m) + ad::exp(b - m));
  return ad::sum(lse);
}

double log_likelihood(const LikelihoodSpec& lik, const Tensor& net_out, const Tensor& targets) {
  lik.validate();
  if (lik.kind == LikelihoodSpec::Kind::gaussian) {
    if (net_out.size() != targets.size())
      throw ShapeError("gaussian likelihood: output " + shape_str(net_out.shape()) + " vs targets " +
                       shape_str(targets.shape()));
    const double s2 = lik.sigma_noise * lik.sigma_noise;
    double sq = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double r = targets[i] - net_out[i];
      sq += r * r;
    }
    const double n = static_cast<double>(targets.size());
    return -0.5 * n * (kLog2Pi + std::log(s2)) - sq / (2.0 * s2);
  }
  if (net_out.rank() != 2) throw ShapeError("categorical likelihood expects [N, K] probabilities");
  const auto idx = class_indices(targets, net_out.dim(0), net_out.dim(1));
  double s = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) s += std::log(net_out.at(i, idx[i]));
  return s;
}

ad::Var log_likelihood(const LikelihoodSpec& lik, ad::Var net_out, const Tensor& targets) {
  lik.validate();
  ad::Tape& tape = net_out.tape();
  const Tensor& out = net_out.value();
  if (lik.kind == LikelihoodSpec::Kind::gaussian) {
    if (out.size() != targets.size())
      throw ShapeError("gaussian likelihood: output " + shape_str(out.shape()) + " vs targets " +
                       shape_str(targets.shape()));
    const double s2 = lik.sigma_noise * lik.sigma_noise;
    ad::Var y = tape.constant(targets.reshaped(out.shape()));
    ad::Var sq = ad::sum(ad::square(net_out - y));
    const double n = static_cast<double>(targets.size());
    return ad::add_scalar(ad::scale(sq, -1.0 / (2.0 * s2)), -0.5 * n * (kLog2Pi + std::log(s2)));
  }
  if (out.rank() != 2) throw ShapeError("categorical likelihood expects [N, K] logits");
  const auto idx = class_indices(targets, out.dim(0), out.dim(1));
  Tensor onehot(out.shape(), 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) onehot.at(i, idx[i]) = 1.0;
  return ad::sum(ad::log_softmax(net_out) * tape.constant(std::move(onehot)));
}

double log_posterior_unnorm(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec,
                            const ParameterSet& params, const Tensor& inputs, const Tensor& targets) {
  const Tensor out = mlp_forward(spec, params, inputs);
  return log_prior(prior, params) + log_likelihood(lik, out, targets);
}

double kl_diag_gaussians(std::span<const double> mu_q, std::span<const double> sigma_q, std::span<const double> mu_p,
                         std::span<const double> sigma_p) {
  const std::size_t d = mu_q.size();
  if (sigma_q.size() != d || mu_p.size() != d || sigma_p.size() != d)
    throw ShapeError("kl_diag_gaussians: parameter vectors differ in length");
  double kl = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    if (!(sigma_q[i] > 0.0) || !(sigma_p[i] > 0.0)) throw InvalidArgument("kl_diag_gaussians: sigma must be positive");
    const double diff = mu_q[i] - mu_p[i];
    kl += std::log(sigma_p[i] / sigma_q[i]) + (sigma_q[i] * sigma_q[i] + diff * diff) / (2.0 * sigma_p[i] * sigma_p[i]) -
          0.5;
  }
  return kl;
}

DensityPair DensityPair::gaussians(double mu_p, double sigma_p, double mu_q, double sigma_q, double lo, double hi,
                                   std::size_t nodes) {
  if (nodes < 2 || !(hi > lo)) throw InvalidArgument("density grid needs hi > lo and at least two nodes");
  std::vector<double> grid(nodes);
  for (std::size_t i = 0; i < nodes; ++i) grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(nodes - 1);
  return from_log_densities(
      std::move(grid), [&](double x) { return gaussian_log_density(x, mu_p, sigma_p); },
      [&](double x) { return gaussian_log_density(x, mu_q, sigma_q); });
}

DensityPair DensityPair::from_log_densities(std::vector<double> grid, const std::function<double(double)>& log_p,
                                            const std::function<double(double)>& log_q) {
  DensityPair pair;
  pair.p.reserve(grid.size());
  pair.q.reserve(grid.size());
  for (double x : grid) {
    pair.p.push_back(std::exp(log_p(x)));
    pair.q.push_back(std::exp(log_q(x)));
  }
  pair.grid = std::move(grid);
  return pair;
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("trapezoid: x and y differ in length");
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return s;
}

double alpha_divergence(const DensityPair& pair, double alpha) {
  if (alpha == 0.0 || alpha == 1.0)
    throw InvalidArgument("alpha_divergence: alpha must not be 0 or 1 (use the KL limits)");
  check_grid(pair);
  std::vector<double> integrand(pair.grid.size());
  for (std::size_t i = 0; i < integrand.size(); ++i) {
    const double p = pair.p[i], q = pair.q[i];
    // 0^a with a <= 0 is taken as 0 where the other density vanishes too.
    integrand[i] = (p == 0.0 || q == 0.0) ? 0.0 : std::exp(alpha * std::log(p) + (1.0 - alpha) * std::log(q));
  }
  const double d = (1.0 - trapezoid(pair.grid, integrand)) / (alpha * (1.0 - alpha));
  return std::max(d, 0.0);
}

double hellinger_distance(const DensityPair& pair) {
  check_grid(pair);
  std::vector<double> integrand(pair.grid.size());
  for (std::size_t i = 0; i < integrand.size(); ++i) {
    const double d = std::sqrt(pair.p[i]) - std::sqrt(pair.q[i]);
    integrand[i] = d * d;
  }
  return std::sqrt(trapezoid(pair.grid, integrand));
}

}  // namespace bnn
