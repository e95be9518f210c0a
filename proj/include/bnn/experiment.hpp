#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bnn/config.hpp"
#include "bnn/data.hpp"
#include "bnn/gp.hpp"
#include "bnn/hmc.hpp"
#include "bnn/nets.hpp"
#include "bnn/optim.hpp"
#include "bnn/predictive.hpp"
#include "bnn/prob.hpp"
#include "bnn/vi.hpp"

namespace bnn {

enum class Method { bbb, mc_dropout, hmc, gp, map };

Method parse_method(std::string_view name);
std::string to_string(Method m);

// Everything a run needs, resolved from a Config with defaults filled in.
//
//   [data]       source = toy:NAME | csv:PATH | mnist:DIR, n, train_fraction,
//                seed, mnist_train, mnist_test
//   [model]      arch = mlp | lenet_small, hidden, activation, bias
//   [prior]      kind = gaussian | spike_slab, mean, sigma, pi, sigma_slab, sigma_spike
//   [likelihood] sigma_noise = auto | number
//   [train]      epochs, batch_size, learning_rate, optimizer, mc_samples
//   [bbb]        sigma0, mu_init = scaled | normal, mu_std, local_reparam
//   [dropout]    p, weight_decay
//   [hmc]        step_size, leapfrog_steps, samples, burn_in, gibbs, a_prior, b_prior, a_noise, b_noise
//   [gp]         kernel, lengthscale, variance, noise_var = auto | number
//   [predict]    samples, level, grid_points, interval_rows
//   top level    method, seed, out
struct ExperimentConfig {
  std::string data_source = "toy:sinusoid_gap";
  std::size_t data_n = 200;
  double train_fraction = 0.9;
  std::optional<std::uint64_t> data_seed;  // empty: the run seed
  std::size_t mnist_train = 10000;
  std::optional<std::size_t> mnist_test;

  std::string arch = "mlp";
  std::vector<std::size_t> hidden{50, 50};
  Activation activation{ActivationKind::relu};
  bool bias = false;

  PriorSpec prior = PriorSpec::gaussian(0.0, 1.0);
  std::optional<double> sigma_noise;  // empty: the dataset's noise level, else 0.1

  Method method = Method::bbb;
  TrainConfig train;
  double bbb_sigma0 = 0.05;
  bool bbb_scaled_init = true;
  double bbb_mu_std = 0.1;
  bool local_reparam = false;
  double dropout_p = 0.1;
  double weight_decay = 1e-4;
  HMCConfig hmc;
  HyperPriorSpec hyper;
  KernelSpec kernel;
  std::optional<double> gp_noise_var;  // empty: sigma_noise^2

  std::size_t predict_samples = 100;
  double level = 0.95;
  std::size_t grid_points = 200;
  std::size_t interval_rows = 20;

  std::uint64_t seed = 0;
  std::string out_dir;

  // Throws ConfigError on unknown keys or bad values.
  static ExperimentConfig from(const Config& c);
  std::uint64_t effective_data_seed() const { return data_seed.value_or(seed); }
  // Every effective setting; from(to_config()) reproduces *this.
  Config to_config() const;
  void validate() const;
};

Dataset load_experiment_data(const ExperimentConfig& cfg);
NetworkSpec build_network(const ExperimentConfig& cfg, const Dataset& d);

// A fitted posterior of any method, enough to predict at new inputs.
struct TrainedModel {
  Method method = Method::bbb;
  NetworkSpec spec;
  double sigma_noise = 0.0;
  VariationalPosterior vp;                  // bbb
  DropoutPosterior dropout;                 // mc_dropout, map
  std::vector<std::vector<double>> chain;   // hmc, thinned positions
  GPModel gp;                               // gp
};

// n_samples applies to sampling methods; map gives a zero-width model part.
PredictiveSummary predict(const TrainedModel& m, const Tensor& x, std::size_t n_samples, double level, Rng& rng);

// Plain text, one "name count values..." line per array.
void save_model(const TrainedModel& m, const std::string& path);
TrainedModel load_model(const std::string& path, const ExperimentConfig& cfg);

struct Metric {
  std::string name;
  double value = 0.0;
};

struct ExperimentResult {
  Dataset data;
  TrainedModel model;
  PredictiveSummary test;
  std::optional<PredictiveSummary> band;  // 1-D regression grid
  Tensor grid;
  std::vector<Metric> metrics;
  std::vector<TraceRow> trace;
  std::string chain_csv;

  double metric(const std::string& name) const;
};

// Trains, predicts on the test split and, when cfg.out_dir is set, writes
// config.txt, model.txt, metrics.csv, trace.csv, manifest.txt and either
// band.csv (1-D regression) or intervals.csv (classification). On failure a
// manifest with status=error is written before rethrowing.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// metrics.csv contents: header plus one row, method name first.
std::string metrics_csv(Method method, const std::vector<Metric>& metrics);

}  // namespace bnn
