#include "bnn/evidence.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "bnn/error.hpp"
#include "bnn/optim.hpp"

namespace bnn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::string dump(const AdfState& s) {
  std::ostringstream os;
  os.precision(6);
  os << "t=" << s.t << " mean=[";
  for (std::size_t i = 0; i < s.mean.size(); ++i) os << (i ? "," : "") << s.mean[i];
  os << "] var=[";
  for (std::size_t i = 0; i < s.var.size(); ++i) os << (i ? "," : "") << s.var[i];
  os << "]";
  return os.str();
}

PotentialFn network_potential(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec,
                              const Tensor& x, const Tensor& y) {
  return [&prior, &lik, &spec, &x, &y](std::span<const double> w) {
    return potential_energy(prior, lik, spec, x, y, w);
  };
}

}  // namespace

MapResult find_map(const PotentialFn& potential, std::vector<double> init, const MapOptions& opts) {
  MapResult r;
  r.w = std::move(init);
  if (opts.adam_steps > 0) {
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::adam;
    cfg.learning_rate = opts.learning_rate;
    Optimizer opt(cfg);
    for (std::size_t i = 0; i < opts.adam_steps; ++i) {
      const Energy e = potential(r.w);
      opt.step(r.w, e.grad);
    }
  }
  const std::size_t k = r.w.size();
  Energy e = potential(r.w);
  double lambda = 0.0;
  for (std::size_t it = 0; it < opts.newton_steps; ++it) {
    r.iterations = it;
    if (norm2(e.grad) < opts.grad_tol) break;
    const std::vector<double> h = finite_difference_hessian(potential, r.w);
    const RowMat a = Eigen::Map<const RowMat>(h.data(), k, k);
    const Eigen::VectorXd g = Eigen::Map<const Eigen::VectorXd>(e.grad.data(), k);
    const double scale = std::max(1e-8, a.diagonal().cwiseAbs().maxCoeff());
    bool moved = false;
    for (int attempt = 0; attempt < 40 && !moved; ++attempt) {
      Eigen::LLT<RowMat> llt(a + lambda * RowMat::Identity(k, k));
      if (llt.info() == Eigen::Success) {
        const Eigen::VectorXd step = llt.solve(-g);
        std::vector<double> w(k);
        for (std::size_t j = 0; j < k; ++j) w[j] = r.w[j] + step[static_cast<Eigen::Index>(j)];
        Energy trial;
        bool ok = true;
        try {
          trial = potential(w);
        } catch (const NumericalError&) {
          ok = false;
        }
        if (ok && trial.value <= e.value + 1e-10 * (1.0 + std::abs(e.value))) {
          r.w = std::move(w);
          e = std::move(trial);
          lambda *= 0.1;
          if (lambda < 1e-12 * scale) lambda = 0.0;
          moved = true;
          continue;
        }
      }
      lambda = lambda == 0.0 ? 1e-6 * scale : lambda * 10.0;
    }
    if (!moved) break;
  }
  r.potential = e.value;
  r.grad_norm = norm2(e.grad);
  r.converged = r.grad_norm < opts.grad_tol;
  return r;
}

std::vector<double> finite_difference_hessian(const PotentialFn& potential, std::span<const double> w) {
  const std::size_t k = w.size();
  std::vector<double> h(k * k);
  std::vector<double> p(w.begin(), w.end());
  for (std::size_t j = 0; j < k; ++j) {
    const double step = 1e-4 * (1.0 + std::abs(w[j]));
    p[j] = w[j] + step;
    const Energy up = potential(p);
    p[j] = w[j] - step;
    const Energy down = potential(p);
    p[j] = w[j];
    for (std::size_t i = 0; i < k; ++i) h[i * k + j] = (up.grad[i] - down.grad[i]) / (2.0 * step);
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      const double s = 0.5 * (h[i * k + j] + h[j * k + i]);
      h[i * k + j] = s;
      h[j * k + i] = s;
    }
  return h;
}

std::string LaplaceReport::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "k=" << k << "\nlog_likelihood=" << log_likelihood << "\nlog_occam=" << log_occam
     << "\nlog_evidence=" << log_evidence << "\nlog_det_hessian=" << log_det << "\nmin_eigenvalue=" << min_eigenvalue
     << "\ngrad_norm=" << grad_norm << "\nw_map=";
  for (std::size_t i = 0; i < w_map.size(); ++i) os << (i ? "," : "") << w_map[i];
  os << "\n";
  return os.str();
}

LaplaceReport laplace_at(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec, const Tensor& x,
                         const Tensor& y, std::span<const double> w) {
  const PotentialFn u = network_potential(prior, lik, spec, x, y);
  LaplaceReport r;
  r.w_map.assign(w.begin(), w.end());
  r.k = w.size();
  const Energy e = u(w);
  r.grad_norm = norm2(e.grad);
  const double log_p = log_prior(prior, w);
  r.log_likelihood = -e.value - log_p;
  r.hessian = finite_difference_hessian(u, w);
  const RowMat a = Eigen::Map<const RowMat>(r.hessian.data(), r.k, r.k);
  Eigen::SelfAdjointEigenSolver<RowMat> eig(a, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericalError("Laplace invalid at this mode: eigendecomposition failed");
  const Eigen::VectorXd lam = eig.eigenvalues();
  r.min_eigenvalue = r.k ? lam.minCoeff() : 0.0;
  if (r.k && !(r.min_eigenvalue > 0.0)) {
    std::ostringstream os;
    os << "Laplace invalid at this mode: Hessian eigenvalue " << r.min_eigenvalue;
    throw NumericalError(os.str());
  }
  r.log_det = lam.array().log().sum();
  r.log_occam = log_p + 0.5 * static_cast<double>(r.k) * std::log(2.0 * M_PI) - 0.5 * r.log_det;
  r.log_evidence = r.log_likelihood + r.log_occam;
  return r;
}

LaplaceReport laplace_evidence(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec,
                               const Tensor& x, const Tensor& y, const MapOptions& opts,
                               const std::vector<double>* init) {
  std::vector<double> w0 = init ? *init : std::vector<double>(spec.parameter_count(), 0.0);
  if (w0.size() != spec.parameter_count()) throw InvalidArgument("laplace_evidence: init has the wrong length");
  const MapResult map = find_map(network_potential(prior, lik, spec, x, y), std::move(w0), opts);
  if (!map.converged) {
    std::ostringstream os;
    os << "laplace_evidence: MAP search stopped with grad norm " << map.grad_norm << " >= " << opts.grad_tol;
    throw NumericalError(os.str());
  }
  return laplace_at(prior, lik, spec, x, y, map.w);
}

double occam_factor(const LaplaceReport& report) { return std::exp(report.log_evidence - report.log_likelihood); }

std::vector<double> model_posterior(std::span<const double> log_evidence, std::span<const double> model_prior) {
  if (log_evidence.size() != model_prior.size())
    throw InvalidArgument("model_posterior: evidences and priors differ in length");
  if (log_evidence.empty()) throw InvalidArgument("model_posterior: no models");
  double total = 0.0;
  for (double p : model_prior) {
    if (!(p >= 0.0)) throw InvalidArgument("model_posterior: negative model prior");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("model_posterior: model priors must sum to 1");
  std::vector<double> a(log_evidence.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    a[i] = model_prior[i] > 0.0 ? log_evidence[i] + std::log(model_prior[i]) : -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(a.begin(), a.end());
  double z = 0.0;
  for (double& v : a) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : a) v /= z;
  return a;
}

Tensor polynomial_features(std::span<const double> x, std::size_t degree) {
  Tensor f(Shape{x.size(), degree});
  for (std::size_t i = 0; i < x.size(); ++i) {
    double p = 1.0;
    for (std::size_t d = 0; d < degree; ++d) {
      p *= x[i];
      f.at(i, d) = p;
    }
  }
  return f;
}

DegreeSelection select_polynomial_degree(std::span<const double> x, std::span<const double> y,
                                         const std::vector<std::size_t>& degrees, double prior_sigma,
                                         double noise_sigma, const MapOptions& opts) {
  if (x.size() != y.size()) throw InvalidArgument("select_polynomial_degree: x and y differ in length");
  if (degrees.empty()) throw InvalidArgument("select_polynomial_degree: no candidate degrees");
  DegreeSelection sel;
  sel.degrees = degrees;
  const PriorSpec prior = PriorSpec::gaussian(0.0, prior_sigma);
  const LikelihoodSpec lik = LikelihoodSpec::gaussian(noise_sigma);
  const Tensor ty(Shape{y.size(), 1}, std::vector<double>(y.begin(), y.end()));
  std::vector<double> le;
  for (std::size_t d : degrees) {
    if (d == 0) throw InvalidArgument("select_polynomial_degree: degree must be >= 1");
    const NetworkSpec spec = NetworkSpec::mlp(d, {}, 1, {ActivationKind::identity}, Task::regression, true);
    sel.reports.push_back(laplace_evidence(prior, lik, spec, polynomial_features(x, d), ty, opts));
    le.push_back(sel.reports.back().log_evidence);
  }
  sel.posterior = model_posterior(le, std::vector<double>(le.size(), 1.0 / static_cast<double>(le.size())));
  sel.best = degrees[static_cast<std::size_t>(std::max_element(le.begin(), le.end()) - le.begin())];
  return sel;
}

void AdfState::validate() const {
  if (mean.size() != var.size()) throw InvalidArgument("AdfState: mean and var differ in length");
  for (double v : var)
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("AdfState: variances must be positive");
}

AdfState adf_update(const AdfState& state, const LogMarginalGrad& g) {
  state.validate();
  if (g.d_mean.size() != state.mean.size() || g.d_var.size() != state.var.size())
    throw InvalidArgument("adf_update: gradient length does not match the state");
  AdfState next = state;
  next.t = state.t + 1;
  for (std::size_t i = 0; i < state.mean.size(); ++i) {
    const double v = state.var[i], dm = g.d_mean[i], dv = g.d_var[i];
    next.mean[i] = state.mean[i] + v * dm;
    next.var[i] = v - v * v * (dm * dm - 2.0 * dv);
  }
  for (double v : next.var)
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericalError("ADF variance collapse: " + dump(next));
  return next;
}

LogMarginalGrad log_marginal_quadrature(double mean, double var, const std::function<double(double)>& loglik,
                                        std::size_t nodes, double width) {
  if (!(var > 0.0)) throw InvalidArgument("log_marginal_quadrature: var must be positive");
  if (nodes < 3 || !(width > 0.0)) throw InvalidArgument("log_marginal_quadrature: need >= 3 nodes and width > 0");
  const double sd = std::sqrt(var);
  const double dz = 2.0 * width / static_cast<double>(nodes - 1);
  std::vector<double> z(nodes), l(nodes);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < nodes; ++i) {
    z[i] = -width + dz * static_cast<double>(i);
    const double c = (i == 0 || i + 1 == nodes) ? 0.5 : 1.0;
    // N(w; mean, var) dw = phi(z) dz
    l[i] = std::log(c) - 0.5 * z[i] * z[i] - 0.5 * std::log(2.0 * M_PI) + loglik(mean + sd * z[i]);
    mx = std::max(mx, l[i]);
  }
  if (!std::isfinite(mx)) throw NumericalError("log_marginal_quadrature: likelihood vanishes on the grid");
  double s0 = 0.0, s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < nodes; ++i) {
    const double p = std::exp(l[i] - mx);
    s0 += p;
    s1 += p * z[i];
    s2 += p * z[i] * z[i];
  }
  LogMarginalGrad g;
  g.log_z = mx + std::log(s0 * dz);
  // E[(w - m) / v] and E[((w - m)^2 / v^2 - 1 / v) / 2] under the tilted density.
  g.d_mean = {s1 / s0 / sd};
  g.d_var = {0.5 * (s2 / s0 - 1.0) / var};
  return g;
}

LogMarginalGrad log_marginal_mc(const AdfState& state,
                                const std::function<double(std::span<const double>)>& loglik, std::size_t n_samples,
                                Rng& rng) {
  state.validate();
  if (n_samples == 0) throw InvalidArgument("log_marginal_mc: n_samples must be positive");
  const std::size_t k = state.mean.size();
  std::vector<std::vector<double>> draws(n_samples, std::vector<double>(k));
  std::vector<double> l(n_samples);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (std::size_t j = 0; j < k; ++j) draws[s][j] = state.mean[j] + std::sqrt(state.var[j]) * nd(rng);
    l[s] = loglik(draws[s]);
  }
  const double mx = *std::max_element(l.begin(), l.end());
  if (!std::isfinite(mx)) throw NumericalError("log_marginal_mc: likelihood vanishes on every draw");
  double z = 0.0;
  for (double& v : l) {
    v = std::exp(v - mx);
    z += v;
  }
  LogMarginalGrad g;
  g.log_z = mx + std::log(z / static_cast<double>(n_samples));
  g.d_mean.assign(k, 0.0);
  g.d_var.assign(k, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const double p = l[s] / z;
    for (std::size_t j = 0; j < k; ++j) {
      const double d = draws[s][j] - state.mean[j], v = state.var[j];
      g.d_mean[j] += p * d / v;
      g.d_var[j] += p * 0.5 * (d * d / (v * v) - 1.0 / v);
    }
  }
  return g;
}

std::vector<AdfState> adf_gaussian_sequence(double prior_mean, double prior_var, std::span<const double> y,
                                            double noise_sigma) {
  if (!(noise_sigma > 0.0)) throw InvalidArgument("adf_gaussian_sequence: noise_sigma must be positive");
  std::vector<AdfState> states{AdfState{{prior_mean}, {prior_var}, 0}};
  states.front().validate();
  const double s2 = noise_sigma * noise_sigma;
  for (double obs : y) {
    const AdfState& cur = states.back();
    const auto g = log_marginal_quadrature(cur.mean[0], cur.var[0], [obs, s2](double w) {
      return -0.5 * std::log(2.0 * M_PI * s2) - 0.5 * (obs - w) * (obs - w) / s2;
    });
    states.push_back(adf_update(cur, g));
  }
  return states;
}

}  // namespace bnn
