#include "bnn/gp.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <sstream>

#include "bnn/error.hpp"

namespace bnn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::span<const double> row(const Tensor& t, std::size_t i) {
  const std::size_t d = t.shape()[1];
  return {t.values().data() + i * d, d};
}

void check_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " must be [N, D]");
}

}  // namespace

KernelKind parse_kernel(std::string_view name) {
  if (name == "matern52") return KernelKind::matern52;
  if (name == "rbf") return KernelKind::rbf;
  throw ConfigError("unknown kernel '" + std::string(name) + "' (expected matern52 or rbf)");
}

std::string to_string(KernelKind k) { return k == KernelKind::matern52 ? "matern52" : "rbf"; }

void KernelSpec::validate() const {
  if (!(lengthscale > 0.0) || !std::isfinite(lengthscale)) throw InvalidArgument("kernel lengthscale must be positive");
  if (!(variance > 0.0) || !std::isfinite(variance)) throw InvalidArgument("kernel variance must be positive");
}

double kernel_eval(const KernelSpec& k, std::span<const double> x, std::span<const double> x2) {
  if (x.size() != x2.size()) throw ShapeError("kernel_eval: inputs differ in dimension");
  double r2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) r2 += (x[i] - x2[i]) * (x[i] - x2[i]);
  const double l = k.lengthscale;
  if (k.kind == KernelKind::rbf) return k.variance * std::exp(-0.5 * r2 / (l * l));
  const double a = std::sqrt(5.0 * r2) / l;
  return k.variance * (1.0 + a + 5.0 * r2 / (3.0 * l * l)) * std::exp(-a);
}

Tensor kernel_matrix(const KernelSpec& k, const Tensor& a, const Tensor& b) {
  k.validate();
  check_matrix(a, "kernel_matrix: a");
  check_matrix(b, "kernel_matrix: b");
  const std::size_t n = a.shape()[0], m = b.shape()[0];
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = kernel_eval(k, row(a, i), row(b, j));
  return out;
}

GPModel gp_fit(const KernelSpec& kernel, double noise_var, const Tensor& x, std::span<const double> y) {
  kernel.validate();
  check_matrix(x, "gp_fit: x");
  if (!(noise_var >= 0.0)) throw InvalidArgument("gp_fit: noise variance must be >= 0");
  const std::size_t n = x.shape()[0];
  if (y.size() != n) throw ShapeError("gp_fit: x and y differ in row count");
  if (n == 0) throw InvalidArgument("gp_fit: no training points");
  GPModel m{kernel, noise_var, 0.0, x, std::vector<double>(y.begin(), y.end()), {}, {}};
  const Tensor kxx = kernel_matrix(kernel, x, x);
  const auto en = static_cast<Eigen::Index>(n);
  const RowMat k = Eigen::Map<const RowMat>(kxx.values().data(), en, en);
  for (double jitter : {0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6}) {
    Eigen::LLT<RowMat> llt(k + (noise_var + jitter) * RowMat::Identity(en, en));
    if (llt.info() != Eigen::Success) continue;
    m.jitter = jitter;
    const RowMat l = llt.matrixL();
    m.chol.assign(l.data(), l.data() + n * n);
    const Eigen::VectorXd alpha = llt.solve(Eigen::Map<const Eigen::VectorXd>(m.y.data(), en));
    m.alpha.assign(alpha.data(), alpha.data() + n);
    return m;
  }
  std::ostringstream os;
  os << "gp_fit: Cholesky failed with jitter up to 1e-6 (noise_var " << noise_var << ")";
  throw NumericalError(os.str());
}

PredictiveSummary gp_predict(const GPModel& m, const Tensor& x_star, bool include_noise) {
  check_matrix(x_star, "gp_predict: x_star");
  if (x_star.shape()[1] != m.x.shape()[1]) throw ShapeError("gp_predict: input dimension differs from training");
  const std::size_t n = m.x.shape()[0], q = x_star.shape()[0];
  const auto en = static_cast<Eigen::Index>(n), eq = static_cast<Eigen::Index>(q);
  const Tensor ks = kernel_matrix(m.kernel, m.x, x_star);  // [n, q]
  const Eigen::Map<const RowMat> kmat(ks.values().data(), en, eq);
  const Eigen::Map<const RowMat> l(m.chol.data(), en, en);
  const Eigen::Map<const Eigen::VectorXd> alpha(m.alpha.data(), en);
  const Eigen::VectorXd mean = kmat.transpose() * alpha;
  const RowMat v = l.triangularView<Eigen::Lower>().solve(kmat);
  PredictiveSummary s;
  s.mean = Tensor(Shape{q, 1});
  s.variance = Tensor(Shape{q, 1});
  s.mean_se = Tensor(Shape{q, 1}, 0.0);
  s.lower = Tensor(Shape{q, 1});
  s.upper = Tensor(Shape{q, 1});
  s.level = std::erf(2.0 / std::sqrt(2.0));
  s.interval = true;
  for (std::size_t j = 0; j < q; ++j) {
    const auto ej = static_cast<Eigen::Index>(j);
    const double prior = kernel_eval(m.kernel, row(x_star, j), row(x_star, j));
    double var = std::max(0.0, prior - v.col(ej).squaredNorm());
    if (include_noise) var += m.noise_var;
    s.mean[j] = mean[ej];
    s.variance[j] = var;
    s.lower[j] = mean[ej] - 2.0 * std::sqrt(var);
    s.upper[j] = mean[ej] + 2.0 * std::sqrt(var);
  }
  return s;
}

Tensor nn_prior_sample_outputs(const NnPriorConfig& cfg, std::size_t n_draws, std::span<const double> probes,
                               Rng& rng) {
  if (cfg.hidden == 0) throw InvalidArgument("nn_prior_sample_outputs: hidden must be >= 1");
  if (!(cfg.sigma_in > 0.0) || !(cfg.sigma_out > 0.0) || !(cfg.sigma_bias >= 0.0))
    throw InvalidArgument("nn_prior_sample_outputs: prior scales must be positive");
  const bool bias = cfg.sigma_bias > 0.0;
  const NetworkSpec spec = NetworkSpec::mlp(1, {cfg.hidden}, 1, cfg.activation, Task::regression, bias);
  const Tensor x(Shape{probes.size(), 1}, std::vector<double>(probes.begin(), probes.end()));
  std::normal_distribution<double> in(0.0, cfg.sigma_in), bd(0.0, bias ? cfg.sigma_bias : 1.0);
  std::normal_distribution<double> out(0.0, cfg.sigma_out / std::sqrt(static_cast<double>(cfg.hidden)));
  ParameterSet p = ParameterSet::zeros(spec);
  auto& layers = p.layers();
  LayerParams& hidden = layers.begin()->second;
  LayerParams& head = std::next(layers.begin())->second;
  Tensor result(Shape{n_draws, probes.size()});
  for (std::size_t d = 0; d < n_draws; ++d) {
    for (double& v : hidden.weight.values()) v = in(rng);
    if (bias)
      for (double& v : hidden.bias->values()) v = bd(rng);
    for (double& v : head.weight.values()) v = out(rng);
    const Tensor f = mlp_forward(spec, p, x);
    for (std::size_t j = 0; j < probes.size(); ++j) result.at(d, j) = f[j];
  }
  return result;
}

NormalityStats normality_statistic(const Tensor& samples) {
  check_matrix(samples, "normality_statistic: samples");
  const std::size_t n = samples.shape()[0], d = samples.shape()[1];
  if (n < 1000) throw InvalidArgument("normality_statistic: need at least 1000 samples");
  if (d == 0) throw InvalidArgument("normality_statistic: no columns");
  const double nn = static_cast<double>(n);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[static_cast<Eigen::Index>(j)] += samples.at(i, j) / nn;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  NormalityStats st;
  st.skewness.assign(d, 0.0);
  st.excess_kurtosis.assign(d, 0.0);
  std::vector<double> m2(d, 0.0), m3(d, 0.0), m4(d, 0.0);
  Eigen::VectorXd c(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double z = samples.at(i, j) - mean[static_cast<Eigen::Index>(j)];
      c[static_cast<Eigen::Index>(j)] = z;
      m2[j] += z * z / nn;
      m3[j] += z * z * z / nn;
      m4[j] += z * z * z * z / nn;
    }
    cov += c * c.transpose() / nn;
  }
  for (std::size_t j = 0; j < d; ++j) {
    bool constant = true;
    for (std::size_t i = 1; i < n && constant; ++i) constant = samples.at(i, j) == samples.at(0, j);
    if (constant || !(m2[j] > 0.0)) throw InvalidArgument("normality_statistic: zero-variance column");
    st.skewness[j] = m3[j] / std::pow(m2[j], 1.5);
    st.excess_kurtosis[j] = m4[j] / (m2[j] * m2[j]) - 3.0;
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0))
    throw InvalidArgument("normality_statistic: singular sample covariance");
  double b2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) c[static_cast<Eigen::Index>(j)] = samples.at(i, j) - mean[static_cast<Eigen::Index>(j)];
    const double q = c.dot(ldlt.solve(c));
    b2 += q * q / nn;
  }
  const double dd = static_cast<double>(d);
  st.mardia_kurtosis = b2 - dd * (dd + 2.0);
  return st;
}

NormalityStats normality_statistic(std::span<const double> samples) {
  return normality_statistic(Tensor(Shape{samples.size(), 1}, std::vector<double>(samples.begin(), samples.end())));
}

}  // namespace bnn
