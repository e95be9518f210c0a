#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bnn/random.hpp"

namespace bnn {

enum class OptimizerKind { sgd, adam };

OptimizerKind parse_optimizer(std::string_view name);
std::string to_string(OptimizerKind k);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t mc_samples = 1;  // N draws per step
  std::size_t batch_size = 32;  // M
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Throws ConfigError.
  void validate(std::size_t n_data) const;
};

// First-order optimiser over a flat parameter vector. step() descends the
// supplied loss gradient.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(std::span<double> params, std::span<const double> grad);
  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Shuffled minibatch index lists covering 0..n-1 once. The last batch holds
// the remainder when batch does not divide n.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng);

// One row of a training trace. For methods without a variational objective
// `elbo` holds the negated training loss and `kl` the regulariser.
struct TraceRow {
  std::size_t epoch = 0;
  double elbo = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double wall_ms = 0.0;
};

std::string trace_csv(const std::vector<TraceRow>& rows);

// Moving average with the given window; empty when the series is shorter.
std::vector<double> moving_average(std::span<const double> x, std::size_t window);

}  // namespace bnn
