#include "bnn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bnn/error.hpp"

namespace bnn {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimiser '" + std::string(name) + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

void TrainConfig::validate(std::size_t n_data) const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (mc_samples == 0) throw ConfigError("mc_samples must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (n_data > 0 && batch_size > n_data)
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(n_data));
  if (optimizer == OptimizerKind::adam &&
      !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && epsilon > 0.0))
    throw ConfigError("adam needs beta1, beta2 in (0, 1) and epsilon > 0");
}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size()) throw ShapeError("optimizer: parameter and gradient sizes differ");
  ++t_;
  if (cfg_.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg_.learning_rate * grad[i];
    return;
  }
  if (m_.size() != params.size()) {
    m_.assign(params.size(), 0.0);
    v_.assign(params.size(), 0.0);
  }
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = cfg_.learning_rate * std::sqrt(c2) / c1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
    params[i] -= lr * m_[i] / (std::sqrt(v_[i]) + cfg_.epsilon);
  }
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  return out;
}

std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << "epoch,elbo,nll,kl,wall_ms\n";
  for (const auto& r : rows) os << r.epoch << ',' << r.elbo << ',' << r.nll << ',' << r.kl << ',' << r.wall_ms << '\n';
  return os.str();
}

std::vector<double> moving_average(std::span<const double> x, std::size_t window) {
  if (window == 0 || x.size() < window) return {};
  std::vector<double> out;
  out.reserve(x.size() - window + 1);
  double s = std::accumulate(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(window), 0.0);
  out.push_back(s / static_cast<double>(window));
  for (std::size_t i = window; i < x.size(); ++i) {
    s += x[i] - x[i - window];
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

}  // namespace bnn
