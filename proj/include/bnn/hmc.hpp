#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bnn/nets.hpp"
#include "bnn/prob.hpp"
#include "bnn/random.hpp"

namespace bnn {

// Gamma(shape a, rate b) hyper-priors on the weight and noise precisions.
struct HyperPriorSpec {
  double a_prior = 1.0;
  double b_prior = 0.1;
  double a_noise = 1.0;
  double b_noise = 0.1;

  void validate() const;
};

struct Precisions {
  double tau_prior = 1.0;  // weight prior N(0, 1 / tau_prior)
  double tau_noise = 1.0;  // Gaussian noise N(0, 1 / tau_noise)
};

struct HMCConfig {
  double step_size = 0.01;
  std::size_t leapfrog_steps = 20;
  std::vector<double> mass;  // diagonal; empty means identity
  std::size_t n_samples = 1000;
  std::size_t burn_in = 200;
  std::uint64_t seed = 0;
  bool gibbs = true;  // alternate with gibbs_update_precisions (BNN sampler only)

  // Throws ConfigError.
  void validate(std::size_t dim) const;
};

struct Energy {
  double value = 0.0;
  std::vector<double> grad;
};

// U(w) and grad U(w) over a flat parameter vector.
using PotentialFn = std::function<Energy(std::span<const double>)>;
// U(w) only, for the random-walk baseline.
using DensityFn = std::function<double(std::span<const double>)>;

// U = -[ln p(w) + ln p(D | w)] for the network, with the gradient from the
// tape. Throws NumericalError (with a snapshot of w) when U is not finite.
Energy potential_energy(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec, const Tensor& x,
                        const Tensor& y, std::span<const double> w);

// Prior and likelihood implied by hyper-precisions: N(0, 1/tau_prior) weights
// and, for regression, N(0, 1/tau_noise) noise.
PriorSpec prior_from(const Precisions& g);
LikelihoodSpec likelihood_from(const Precisions& g, const LikelihoodSpec& base);

// K(v) = 1/2 v^T M^-1 v.
double kinetic_energy(std::span<const double> v, std::span<const double> mass);
// v ~ N(0, M).
std::vector<double> sample_momentum(std::span<const double> mass, Rng& rng);

struct ChainState {
  std::vector<double> position;
  std::vector<double> momentum;
  Precisions gamma;
  double potential = 0.0;
  double kinetic = 0.0;
  std::vector<double> grad;  // grad U at position

  double hamiltonian() const { return potential + kinetic; }
};

struct LeapfrogResult {
  ChainState proposal;
  bool diverged = false;
  std::size_t grad_evals = 0;
};

// L steps of: half momentum step, full position step, half momentum step.
// `state` must carry U and grad U at its position.
LeapfrogResult leapfrog(const ChainState& state, double step_size, std::size_t steps, const PotentialFn& potential,
                        std::span<const double> mass);

struct ChainRow {
  std::size_t iteration = 0;
  bool accepted = false;
  double potential = 0.0;
  double kinetic = 0.0;
  double tau_prior = 0.0;
  double tau_noise = 0.0;
};

struct ChainResult {
  std::vector<std::vector<double>> samples;  // kept positions, after burn-in
  std::vector<Precisions> precisions;        // alongside samples
  std::vector<ChainRow> rows;                // every iteration including burn-in
  std::vector<double> energy_errors;         // H_new - H_old per proposal
  std::vector<double> ess;                   // per coordinate
  double acceptance_rate = 0.0;
  double burn_in_acceptance = 0.0;
  std::size_t grad_evals = 0;
  std::size_t density_evals = 0;
  std::size_t diverged = 0;
  std::string warning;

  double mean_ess() const;
};

// HMC on an arbitrary potential with fixed (eps, L).
ChainResult hmc_sample(const PotentialFn& potential, std::vector<double> init, const HMCConfig& cfg);

// HMC over a network posterior. With cfg.gibbs the weight prior becomes
// N(0, 1/tau_prior) and the noise N(0, 1/tau_noise), and each HMC step is
// followed by a Gibbs draw of the precisions.
ChainResult hmc_sample(const NetworkSpec& spec, const PriorSpec& prior, const LikelihoodSpec& lik, const Tensor& x,
                       const Tensor& y, const HyperPriorSpec& hyper, const HMCConfig& cfg,
                       const std::vector<double>* init = nullptr);

// tau_prior ~ Gamma(a + P/2, b + sum w^2 / 2), tau_noise ~ Gamma(a + N/2, b + sum r^2 / 2).
Precisions gibbs_update_precisions(std::span<const double> w, std::span<const double> residuals,
                                   const HyperPriorSpec& hyper, Rng& rng);

// Gaussian-proposal Metropolis chain over the same potential.
ChainResult random_walk_mh(const DensityFn& potential, std::vector<double> init, double proposal_sigma,
                           std::size_t n_samples, std::size_t burn_in, Rng& rng);

// Effective sample size by Geyer's initial positive sequence.
double effective_sample_size(std::span<const double> chain);
std::vector<double> effective_sample_sizes(const std::vector<std::vector<double>>& samples);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};
std::vector<HistogramBin> histogram(std::span<const double> values, std::size_t bins);

// iteration,accepted,U,K,tau_prior,tau_noise[,w0,w1,...]
std::string chain_csv(const ChainResult& chain, bool with_positions);

}  // namespace bnn
