#include "bnn/hmc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "bnn/error.hpp"

namespace bnn {

namespace {

bool finite_all(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::string snapshot(std::span<const double> w) {
  std::ostringstream os;
  os.precision(6);
  os << "[";
  for (std::size_t i = 0; i < std::min<std::size_t>(w.size(), 8); ++i) os << (i ? ", " : "") << w[i];
  if (w.size() > 8) os << ", ... (" << w.size() << " values)";
  os << "]";
  return os.str();
}

std::vector<double> unit_mass(const HMCConfig& cfg, std::size_t dim) {
  return cfg.mass.empty() ? std::vector<double>(dim, 1.0) : cfg.mass;
}

// Shared HMC loop. `after_step` may change the target (Gibbs step) and must
// then refresh state.potential / state.grad; it returns the gradient
// evaluations it spent.
ChainResult run_hmc(const PotentialFn& potential, std::vector<double> init, const HMCConfig& cfg, Rng& rng,
                    const std::function<std::size_t(ChainState&, Rng&)>& after_step) {
  const std::size_t dim = init.size();
  cfg.validate(dim);
  const std::vector<double> mass = unit_mass(cfg, dim);

  ChainState state;
  state.position = std::move(init);
  Energy e = potential(state.position);
  if (!std::isfinite(e.value)) throw NumericalError("hmc: initial potential is not finite at " + snapshot(state.position));
  state.potential = e.value;
  state.grad = std::move(e.grad);

  ChainResult res;
  res.grad_evals = 1;
  std::size_t accepted = 0, burn_accepted = 0;
  const std::size_t total = cfg.burn_in + cfg.n_samples;
  for (std::size_t it = 0; it < total; ++it) {
    state.momentum = sample_momentum(mass, rng);
    state.kinetic = kinetic_energy(state.momentum, mass);
    const LeapfrogResult lf = leapfrog(state, cfg.step_size, cfg.leapfrog_steps, potential, mass);
    res.grad_evals += lf.grad_evals;
    bool accept = false;
    if (lf.diverged) {
      ++res.diverged;
    } else {
      const double dh = lf.proposal.hamiltonian() - state.hamiltonian();
      res.energy_errors.push_back(dh);
      // min(1, exp(H_old - H_new))
      accept = dh <= 0.0 || std::log(uniform01(rng)) < -dh;
    }
    if (accept) {
      state.position = lf.proposal.position;
      state.potential = lf.proposal.potential;
      state.grad = lf.proposal.grad;
      ++accepted;
      if (it < cfg.burn_in) ++burn_accepted;
    }
    if (after_step) res.grad_evals += after_step(state, rng);
    res.rows.push_back({it, accept, state.potential, accept ? lf.proposal.kinetic : state.kinetic,
                        state.gamma.tau_prior, state.gamma.tau_noise});
    if (it >= cfg.burn_in) {
      res.samples.push_back(state.position);
      res.precisions.push_back(state.gamma);
    }
  }
  res.density_evals = res.grad_evals;
  res.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(total);
  res.burn_in_acceptance =
      cfg.burn_in ? static_cast<double>(burn_accepted) / static_cast<double>(cfg.burn_in) : res.acceptance_rate;
  if (cfg.burn_in > 0 && res.burn_in_acceptance < 0.01)
    res.warning = "acceptance rate below 1% during burn-in; consider a smaller step size";
  res.ess = effective_sample_sizes(res.samples);
  return res;
}

}  // namespace

void HyperPriorSpec::validate() const {
  if (!(a_prior > 0 && b_prior > 0 && a_noise > 0 && b_noise > 0))
    throw ConfigError("hyper-prior Gamma shapes and rates must be positive");
}

void HMCConfig::validate(std::size_t dim) const {
  if (!(step_size > 0.0)) throw ConfigError("hmc step_size must be positive");
  if (leapfrog_steps == 0) throw ConfigError("hmc leapfrog_steps must be at least 1");
  if (n_samples == 0) throw ConfigError("hmc n_samples must be positive");
  if (dim == 0) throw ConfigError("hmc needs a non-empty position");
  if (!mass.empty()) {
    if (mass.size() != dim) throw ConfigError("hmc mass has " + std::to_string(mass.size()) + " entries, expected " +
                                              std::to_string(dim));
    for (double m : mass)
      if (!(m > 0.0)) throw ConfigError("hmc mass entries must be positive");
  }
}

Energy potential_energy(const PriorSpec& prior, const LikelihoodSpec& lik, const NetworkSpec& spec, const Tensor& x,
                        const Tensor& y, std::span<const double> w) {
  if (!finite_all(w)) throw NumericalError("potential_energy: non-finite position " + snapshot(w));
  ParameterSet params = ParameterSet::zeros(spec);
  params.assign(w);
  Energy e;
  e.value = -log_posterior_unnorm(prior, lik, spec, params, x, y);
  if (!std::isfinite(e.value)) throw NumericalError("potential_energy: U is not finite at " + snapshot(w));
  ad::Tape tape;
  const NetVars vars = bind_parameters(tape, params, true);
  ForwardHooks hooks;
  hooks.logits = spec.task == Task::classification;
  ad::Var total = log_likelihood(lik, forward(spec, vars, tape.input("x", x), hooks), y);
  for (const auto& [i, lv] : vars) {
    total = total + log_prior(prior, lv.weight);
    if (lv.bias) total = total + log_prior(prior, *lv.bias);
  }
  tape.backward(total);
  e.grad.reserve(w.size());
  for (const auto& [i, lv] : vars) {
    const Tensor gw = tape.grad(lv.weight);
    for (double g : gw.values()) e.grad.push_back(-g);
    if (lv.bias) {
      const Tensor gb = tape.grad(*lv.bias);
      for (double g : gb.values()) e.grad.push_back(-g);
    }
  }
  return e;
}

PriorSpec prior_from(const Precisions& g) { return PriorSpec::gaussian(0.0, 1.0 / std::sqrt(g.tau_prior)); }

LikelihoodSpec likelihood_from(const Precisions& g, const LikelihoodSpec& base) {
  if (base.kind == LikelihoodSpec::Kind::categorical) return base;
  return LikelihoodSpec::gaussian(1.0 / std::sqrt(g.tau_noise));
}

double kinetic_energy(std::span<const double> v, std::span<const double> mass) {
  if (v.size() != mass.size()) throw ShapeError("kinetic_energy: momentum and mass differ in length");
  double k = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(mass[i] > 0.0)) throw InvalidArgument("kinetic_energy: mass must be positive");
    k += v[i] * v[i] / mass[i];
  }
  return 0.5 * k;
}

std::vector<double> sample_momentum(std::span<const double> mass, Rng& rng) {
  std::vector<double> v(mass.size());
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(mass[i]) * dist(rng);
  return v;
}

LeapfrogResult leapfrog(const ChainState& state, double step_size, std::size_t steps, const PotentialFn& potential,
                        std::span<const double> mass) {
  LeapfrogResult r;
  ChainState& s = r.proposal;
  s = state;
  if (s.grad.size() != s.position.size() || s.momentum.size() != s.position.size() || mass.size() != s.position.size())
    throw ShapeError("leapfrog: position, momentum, gradient and mass must have equal length");
  const std::size_t d = s.position.size();
  for (std::size_t i = 0; i < d; ++i) s.momentum[i] -= 0.5 * step_size * s.grad[i];
  for (std::size_t l = 1; l <= steps; ++l) {
    for (std::size_t i = 0; i < d; ++i) s.position[i] += step_size * s.momentum[i] / mass[i];
    if (!finite_all(s.position)) {
      r.diverged = true;
      return r;
    }
    Energy e;
    try {
      e = potential(s.position);
    } catch (const NumericalError&) {
      r.diverged = true;
      return r;
    }
    ++r.grad_evals;
    if (!std::isfinite(e.value) || !finite_all(e.grad)) {
      r.diverged = true;
      return r;
    }
    s.potential = e.value;
    s.grad = std::move(e.grad);
    const double h = l == steps ? 0.5 * step_size : step_size;
    for (std::size_t i = 0; i < d; ++i) s.momentum[i] -= h * s.grad[i];
  }
  s.kinetic = kinetic_energy(s.momentum, mass);
  if (!std::isfinite(s.kinetic)) r.diverged = true;
  return r;
}

double ChainResult::mean_ess() const {
  if (ess.empty()) return 0.0;
  return std::accumulate(ess.begin(), ess.end(), 0.0) / static_cast<double>(ess.size());
}

ChainResult hmc_sample(const PotentialFn& potential, std::vector<double> init, const HMCConfig& cfg) {
  Rng rng = substream(cfg.seed, 3);
  return run_hmc(potential, std::move(init), cfg, rng, {});
}

ChainResult hmc_sample(const NetworkSpec& spec, const PriorSpec& prior, const LikelihoodSpec& lik, const Tensor& x,
                       const Tensor& y, const HyperPriorSpec& hyper, const HMCConfig& cfg,
                       const std::vector<double>* init) {
  spec.validate();
  prior.validate();
  lik.validate();
  if (cfg.gibbs) hyper.validate();
  Rng init_rng = substream(cfg.seed, 0);
  Rng rng = substream(cfg.seed, 3);
  std::vector<double> w0 = init ? *init : ParameterSet::scaled_normal(spec, init_rng).flatten();
  if (w0.size() != spec.parameter_count())
    throw ShapeError("hmc_sample: initial position has " + std::to_string(w0.size()) + " values, network has " +
                     std::to_string(spec.parameter_count()));

  Precisions gamma;
  if (prior.kind == PriorSpec::Kind::gaussian) gamma.tau_prior = 1.0 / (prior.sigma * prior.sigma);
  if (lik.kind == LikelihoodSpec::Kind::gaussian) gamma.tau_noise = 1.0 / (lik.sigma_noise * lik.sigma_noise);
  if (!cfg.gibbs) {
    PotentialFn u = [&](std::span<const double> w) { return potential_energy(prior, lik, spec, x, y, w); };
    ChainResult res = run_hmc(u, std::move(w0), cfg, rng, {});
    for (auto& row : res.rows) {
      row.tau_prior = gamma.tau_prior;
      row.tau_noise = gamma.tau_noise;
    }
    for (auto& p : res.precisions) p = gamma;
    return res;
  }

  PotentialFn u = [&](std::span<const double> w) {
    return potential_energy(prior_from(gamma), likelihood_from(gamma, lik), spec, x, y, w);
  };
  ParameterSet scratch = ParameterSet::zeros(spec);
  auto gibbs = [&](ChainState& s, Rng& r) -> std::size_t {
    std::vector<double> residuals;
    if (lik.kind == LikelihoodSpec::Kind::gaussian) {
      scratch.assign(s.position);
      const Tensor f = mlp_forward(spec, scratch, x);
      residuals.resize(f.size());
      for (std::size_t i = 0; i < f.size(); ++i) residuals[i] = y[i] - f[i];
    }
    const Precisions next = gibbs_update_precisions(s.position, residuals, hyper, r);
    gamma.tau_prior = next.tau_prior;
    if (lik.kind == LikelihoodSpec::Kind::gaussian) gamma.tau_noise = next.tau_noise;
    s.gamma = gamma;
    Energy e = u(s.position);
    s.potential = e.value;
    s.grad = std::move(e.grad);
    return 1;
  };
  ChainResult res = run_hmc(u, std::move(w0), cfg, rng, gibbs);
  return res;
}

Precisions gibbs_update_precisions(std::span<const double> w, std::span<const double> residuals,
                                   const HyperPriorSpec& hyper, Rng& rng) {
  hyper.validate();
  double ww = 0.0, rr = 0.0;
  for (double v : w) ww += v * v;
  for (double v : residuals) rr += v * v;
  const double p = static_cast<double>(w.size()), n = static_cast<double>(residuals.size());
  Precisions g;
  g.tau_prior = std::gamma_distribution<double>(hyper.a_prior + 0.5 * p, 1.0 / (hyper.b_prior + 0.5 * ww))(rng);
  g.tau_noise = std::gamma_distribution<double>(hyper.a_noise + 0.5 * n, 1.0 / (hyper.b_noise + 0.5 * rr))(rng);
  return g;
}

ChainResult random_walk_mh(const DensityFn& potential, std::vector<double> init, double proposal_sigma,
                           std::size_t n_samples, std::size_t burn_in, Rng& rng) {
  if (!(proposal_sigma > 0.0)) throw InvalidArgument("random_walk_mh: proposal sigma must be positive");
  if (n_samples == 0 || init.empty()) throw InvalidArgument("random_walk_mh: need samples and a non-empty position");
  std::vector<double> w = std::move(init), prop(w.size());
  double u = potential(w);
  if (!std::isfinite(u)) throw NumericalError("random_walk_mh: initial potential is not finite at " + snapshot(w));
  ChainResult res;
  res.density_evals = 1;
  std::normal_distribution<double> dist(0.0, proposal_sigma);
  std::size_t accepted = 0, burn_accepted = 0;
  for (std::size_t it = 0; it < burn_in + n_samples; ++it) {
    for (std::size_t i = 0; i < w.size(); ++i) prop[i] = w[i] + dist(rng);
    double up;
    try {
      up = potential(prop);
    } catch (const NumericalError&) {
      up = std::numeric_limits<double>::infinity();
    }
    ++res.density_evals;
    const bool accept = std::isfinite(up) && (up <= u || std::log(uniform01(rng)) < u - up);
    if (accept) {
      w.swap(prop);
      u = up;
      ++accepted;
      if (it < burn_in) ++burn_accepted;
    }
    res.rows.push_back({it, accept, u, 0.0, 0.0, 0.0});
    if (it >= burn_in) res.samples.push_back(w);
  }
  res.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(burn_in + n_samples);
  res.burn_in_acceptance = burn_in ? static_cast<double>(burn_accepted) / static_cast<double>(burn_in) : res.acceptance_rate;
  res.ess = effective_sample_sizes(res.samples);
  return res;
}

double effective_sample_size(std::span<const double> chain) {
  const std::size_t n = chain.size();
  if (n < 4) return static_cast<double>(n);
  const double mean = std::accumulate(chain.begin(), chain.end(), 0.0) / static_cast<double>(n);
  std::vector<double> c(chain.size());
  for (std::size_t i = 0; i < n; ++i) c[i] = chain[i] - mean;
  auto autocov = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) s += c[i] * c[i + lag];
    return s / static_cast<double>(n);
  };
  const double c0 = autocov(0);
  if (c0 == 0.0) return 1.0;
  double tau = -1.0;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; 2 * m + 1 < n; ++m) {
    double gamma = (autocov(2 * m) + autocov(2 * m + 1)) / c0;
    if (gamma <= 0.0) break;
    gamma = std::min(gamma, prev);  // initial monotone sequence
    prev = gamma;
    tau += 2.0 * gamma;
  }
  return static_cast<double>(n) / std::max(tau, 1e-12);
}

std::vector<double> effective_sample_sizes(const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) return {};
  const std::size_t d = samples.front().size();
  std::vector<double> ess(d), column(samples.size());
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t t = 0; t < samples.size(); ++t) column[t] = samples[t][j];
    ess[j] = effective_sample_size(column);
  }
  return ess;
}

std::vector<HistogramBin> histogram(std::span<const double> values, std::size_t bins) {
  if (bins == 0) throw InvalidArgument("histogram needs at least one bin");
  if (values.empty()) return {};
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn, hi = *mx, width = (hi - lo) / static_cast<double>(bins);
  std::vector<HistogramBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = lo + width * static_cast<double>(b);
    out[b].hi = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
  }
  for (double v : values) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((v - lo) / width) : 0;
    ++out[std::min(b, bins - 1)].count;
  }
  return out;
}

std::string chain_csv(const ChainResult& chain, bool with_positions) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << "iteration,accepted,U,K,tau_prior,tau_noise";
  const std::size_t d = chain.samples.empty() ? 0 : chain.samples.front().size();
  if (with_positions)
    for (std::size_t j = 0; j < d; ++j) os << ",w" << j;
  os << '\n';
  const std::size_t first_kept = chain.rows.size() - chain.samples.size();
  for (std::size_t r = 0; r < chain.rows.size(); ++r) {
    if (with_positions && r < first_kept) continue;
    const ChainRow& row = chain.rows[r];
    os << row.iteration << ',' << (row.accepted ? 1 : 0) << ',' << row.potential << ',' << row.kinetic << ','
       << row.tau_prior << ',' << row.tau_noise;
    if (with_positions)
      for (double v : chain.samples[r - first_kept]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace bnn
