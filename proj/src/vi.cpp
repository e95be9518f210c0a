#include "bnn/vi.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "bnn/error.hpp"

namespace bnn {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

template <class F>
ParameterSet map_params(const ParameterSet& p, F&& f) {
  ParameterSet out = p;
  for (auto& [i, lp] : out.layers()) {
    for (double& v : lp.weight.values()) v = f(v);
    if (lp.bias)
      for (double& v : lp.bias->values()) v = f(v);
  }
  return out;
}

ParameterSet collect_grads(const ad::Tape& tape, const NetVars& vars) {
  ParameterSet g;
  for (const auto& [i, lv] : vars) {
    LayerParams lp{tape.grad(lv.weight), std::nullopt};
    if (lv.bias) lp.bias = tape.grad(*lv.bias);
    g.layers().emplace(i, std::move(lp));
  }
  return g;
}

void accumulate(ParameterSet& acc, const ParameterSet& g, double w) {
  for (auto& [i, lp] : acc.layers()) {
    const LayerParams& src = g.at(i);
    for (std::size_t k = 0; k < lp.weight.size(); ++k) lp.weight[k] += w * src.weight[k];
    if (lp.bias)
      for (std::size_t k = 0; k < lp.bias->size(); ++k) (*lp.bias)[k] += w * (*src.bias)[k];
  }
}

Tensor normal_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

ad::Var softplus_var(ad::Var r) { return ad::softplus(r); }

ForwardHooks head_hooks(const NetworkSpec& spec) {
  ForwardHooks h;
  h.logits = spec.task == Task::classification;
  return h;
}

struct RunningMoments {
  std::vector<double> sum, sumsq;
  explicit RunningMoments(std::size_t d) : sum(d, 0.0), sumsq(d, 0.0) {}
  void add(std::size_t j, double v) {
    sum[j] += v;
    sumsq[j] += v * v;
  }
  double mean(std::size_t j, double n) const { return sum[j] / n; }
  // unbiased per-draw variance
  double var(std::size_t j, double n) const {
    const double m = sum[j] / n;
    return n > 1 ? std::max(0.0, (sumsq[j] - n * m * m) / (n - 1.0)) : 0.0;
  }
};

void check_gaussian_params(std::span<const double> mu, std::span<const double> sigma, std::size_t n) {
  if (mu.size() != sigma.size()) throw ShapeError("estimator: mu and sigma differ in length");
  if (mu.empty()) throw InvalidArgument("estimator: empty parameter vector");
  for (double s : sigma)
    if (!(s > 0.0)) throw InvalidArgument("estimator: sigma must be positive");
  if (n == 0) throw InvalidArgument("estimator: need at least one sample");
}

Tensor as_vector(std::span<const double> v) { return Tensor(Shape{v.size()}, std::vector<double>(v.begin(), v.end())); }

double eval_value(const TapeFn& f, std::span<const double> w) {
  ad::Tape tape;
  return f(tape.input("w", as_vector(w))).value().item();
}

std::pair<double, std::vector<double>> eval_grad(const TapeFn& f, std::span<const double> w) {
  ad::Tape tape;
  ad::Var v = tape.parameter("w", as_vector(w));
  ad::Var out = f(v);
  if (out.value().size() != 1) throw ShapeError("estimator: f must return a scalar");
  tape.backward(out);
  return {out.value().item(), tape.grad(v).values()};
}

}  // namespace

double softplus(double x) {
  const double y = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return std::max(y, std::numeric_limits<double>::denorm_min());
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw InvalidArgument("softplus_inverse needs a positive argument");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

VariationalPosterior VariationalPosterior::init(const NetworkSpec& spec, Rng& rng, double mu_std, double sigma0) {
  spec.validate();
  VariationalPosterior vp;
  vp.mu = ParameterSet::normal(spec, rng, 0.0, mu_std);
  vp.rho = ParameterSet::filled(spec, softplus_inverse(sigma0));
  return vp;
}

VariationalPosterior VariationalPosterior::constant(const NetworkSpec& spec, double mean, double sigma) {
  VariationalPosterior vp;
  vp.mu = ParameterSet::filled(spec, mean);
  vp.rho = ParameterSet::filled(spec, softplus_inverse(sigma));
  return vp;
}

ParameterSet VariationalPosterior::sigma() const { return map_params(rho, [](double r) { return softplus(r); }); }

void VariationalPosterior::check(const NetworkSpec& spec) const {
  mu.check(spec);
  rho.check(spec);
}

ParameterSet sample_weights(const VariationalPosterior& vp, Rng& rng) {
  // Same draw order as sample_on_tape: one eps tensor per weight, then bias.
  ParameterSet w = vp.mu;
  auto perturb = [&](Tensor& t, const Tensor& r) {
    const Tensor eps = normal_tensor(t.shape(), rng);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] += softplus(r[k]) * eps[k];
  };
  for (auto& [i, lp] : w.layers()) {
    const LayerParams& r = vp.rho.at(i);
    perturb(lp.weight, r.weight);
    if (lp.bias) perturb(*lp.bias, *r.bias);
  }
  return w;
}

TapeSample sample_on_tape(ad::Tape& tape, const NetVars& mu, const NetVars& rho, const PriorSpec& prior, Rng& rng) {
  TapeSample s;
  s.log_q = tape.constant(0.0);
  s.log_p = tape.constant(0.0);
  auto draw = [&](ad::Var m, ad::Var r) {
    ad::Var sigma = softplus_var(r);
    ad::Var w = m + sigma * tape.constant(normal_tensor(m.shape(), rng));
    // ln q written in terms of (w, mu, sigma) so the tape carries both the
    // path and the direct dependence on theta.
    ad::Var z = (w - m) / sigma;
    const double n = static_cast<double>(m.value().size());
    ad::Var lq = ad::add_scalar(ad::sum(-ad::log(sigma) - ad::scale(ad::square(z), 0.5)), -0.5 * n * kLog2Pi);
    s.log_q = s.log_q + lq;
    s.log_p = s.log_p + log_prior(prior, w);
    return w;
  };
  for (const auto& [i, m] : mu) {
    const LayerVars& r = rho.at(i);
    LayerVars w;
    w.weight = draw(m.weight, r.weight);
    if (m.bias) w.bias = draw(*m.bias, *r.bias);
    s.weights.emplace(i, w);
  }
  return s;
}

ElboEstimate elbo_estimate(const VariationalPosterior& vp, const PriorSpec& prior, const LikelihoodSpec& lik,
                           const NetworkSpec& spec, const Tensor& batch_x, const Tensor& batch_y, std::size_t n_data,
                           std::size_t n_samples, Rng& rng, const ElboOptions& opts) {
  if (batch_x.rank() == 0 || batch_x.dim(0) == 0) throw InvalidArgument("elbo_estimate: empty batch");
  if (n_samples == 0) throw InvalidArgument("elbo_estimate: n_samples must be positive");
  const std::size_t m = batch_x.dim(0);
  if (n_data > 0 && n_data < m) throw InvalidArgument("elbo_estimate: n_data smaller than the batch");
  const double scale = static_cast<double>(n_data) / static_cast<double>(m);
  const double n = static_cast<double>(n_samples);

  ElboEstimate est;
  est.grad_mu = map_params(vp.mu, [](double) { return 0.0; });
  est.grad_rho = est.grad_mu;
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    ad::Tape tape;
    const NetVars mu = bind_parameters(tape, vp.mu, true, "mu.L");
    const NetVars rho = bind_parameters(tape, vp.rho, true, "rho.L");
    const TapeSample ts = sample_on_tape(tape, mu, rho, prior, rng);
    ad::Var kl = ts.log_q - ts.log_p;
    ad::Var elbo = -kl;
    double nll = 0.0;
    if (n_data > 0) {
      ForwardHooks hooks = head_hooks(spec);
      if (opts.local_reparam)
        hooks.dense = [&](std::size_t i, ad::Var h, const LayerVars&) {
          return local_reparam_forward(h, mu.at(i), rho.at(i), rng);
        };
      ad::Var out = forward(spec, ts.weights, tape.input("x", batch_x), hooks);
      ad::Var ll = ad::scale(log_likelihood(lik, out, batch_y), scale);
      nll = -ll.value().item();
      elbo = elbo + ll;
    }
    tape.backward(elbo);
    const double v = elbo.value().item();
    sum += v;
    sumsq += v * v;
    est.nll += nll / n;
    est.kl += kl.value().item() / n;
    accumulate(est.grad_mu, collect_grads(tape, mu), 1.0 / n);
    accumulate(est.grad_rho, collect_grads(tape, rho), 1.0 / n);
  }
  est.value = sum / n;
  if (n_samples > 1) est.se = std::sqrt(std::max(0.0, (sumsq - n * est.value * est.value) / (n - 1.0)) / n);
  return est;
}

BbbResult bbb_train(const NetworkSpec& spec, const PriorSpec& prior, const LikelihoodSpec& lik, const Tensor& x,
                    const Tensor& y, const TrainConfig& cfg, const ElboOptions& opts, const VariationalPosterior* init,
                    const EpochCallback& on_epoch) {
  spec.validate();
  prior.validate();
  const std::size_t n = x.dim(0);
  if (y.dim(0) != n) throw ShapeError("bbb_train: inputs and targets differ in row count");
  cfg.validate(n);
  Rng init_rng = substream(cfg.seed, 0), batch_rng = substream(cfg.seed, 1), noise_rng = substream(cfg.seed, 2);

  BbbResult res;
  res.posterior = init ? *init : VariationalPosterior::init(spec, init_rng);
  res.posterior.check(spec);
  std::vector<double> theta = res.posterior.mu.flatten();
  const std::size_t half = theta.size();
  {
    const auto r = res.posterior.rho.flatten();
    theta.insert(theta.end(), r.begin(), r.end());
  }
  Optimizer opt(cfg);
  std::vector<double> grad(theta.size());
  const auto start = Clock::now();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = epoch_batches(n, cfg.batch_size, batch_rng);
    TraceRow row;
    row.epoch = epoch;
    for (const auto& idx : batches) {
      const ElboEstimate est = elbo_estimate(res.posterior, prior, lik, spec, x.gather_rows(idx), y.gather_rows(idx), n,
                                             cfg.mc_samples, noise_rng, opts);
      if (!std::isfinite(est.value)) {
        res.diverged = true;
        res.message = "non-finite ELBO at epoch " + std::to_string(epoch);
        return res;
      }
      row.elbo += est.value;
      row.nll += est.nll;
      row.kl += est.kl;
      const auto gm = est.grad_mu.flatten();
      const auto gr = est.grad_rho.flatten();
      for (std::size_t i = 0; i < half; ++i) {
        grad[i] = -gm[i];
        grad[half + i] = -gr[i];
      }
      opt.step(theta, grad);
      res.posterior.mu.assign(std::span<const double>(theta).first(half));
      res.posterior.rho.assign(std::span<const double>(theta).subspan(half));
    }
    const double nb = static_cast<double>(batches.size());
    row.elbo /= nb;
    row.nll /= nb;
    row.kl /= nb;
    row.wall_ms = elapsed_ms(start);
    res.trace.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return res;
}

std::vector<Tensor> bbb_output_samples(const NetworkSpec& spec, const VariationalPosterior& vp, const Tensor& x,
                                       std::size_t n_samples, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(n_samples);
  for (std::size_t t = 0; t < n_samples; ++t) out.push_back(mlp_forward(spec, sample_weights(vp, rng), x));
  return out;
}

PredictiveSummary bbb_predict(const NetworkSpec& spec, const VariationalPosterior& vp, const Tensor& x,
                              std::size_t n_samples, double sigma_noise, Rng& rng, double level) {
  if (n_samples < 2) throw InvalidArgument("bbb_predict: need at least two samples");
  return predictive_moments(bbb_output_samples(spec, vp, x, n_samples, rng), sigma_noise, spec.task, level);
}

// ---------------------------------------------------------------------------

GradientEstimate score_function_grad(const TapeFn& f, std::span<const double> mu, std::span<const double> sigma,
                                     std::size_t n_samples, Rng& rng) {
  check_gaussian_params(mu, sigma, n_samples);
  const std::size_t d = mu.size();
  RunningMoments dm(d), ds(d);
  std::vector<double> w(d), eps(d);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      eps[j] = dist(rng);
      w[j] = mu[j] + sigma[j] * eps[j];
    }
    const double fv = eval_value(f, w);
    for (std::size_t j = 0; j < d; ++j) {
      dm.add(j, fv * eps[j] / sigma[j]);                    // d ln q / d mu
      ds.add(j, fv * (eps[j] * eps[j] - 1.0) / sigma[j]);  // d ln q / d sigma
    }
  }
  const double n = static_cast<double>(n_samples);
  GradientEstimate g;
  for (std::size_t j = 0; j < d; ++j) {
    g.d_mu.push_back(dm.mean(j, n));
    g.d_sigma.push_back(ds.mean(j, n));
    g.var_mu.push_back(dm.var(j, n));
    g.se_mu.push_back(std::sqrt(g.var_mu.back() / n));
  }
  return g;
}

GradientEstimate pathwise_grad(const TapeFn& f, std::span<const double> mu, std::span<const double> sigma,
                               std::size_t n_samples, Rng& rng) {
  check_gaussian_params(mu, sigma, n_samples);
  const std::size_t d = mu.size();
  RunningMoments dm(d), ds(d);
  std::vector<double> w(d), eps(d);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      eps[j] = dist(rng);
      w[j] = mu[j] + sigma[j] * eps[j];
    }
    const auto [fv, g] = eval_grad(f, w);
    for (std::size_t j = 0; j < d; ++j) {
      dm.add(j, g[j]);
      ds.add(j, g[j] * eps[j]);
    }
  }
  const double n = static_cast<double>(n_samples);
  GradientEstimate g;
  for (std::size_t j = 0; j < d; ++j) {
    g.d_mu.push_back(dm.mean(j, n));
    g.d_sigma.push_back(ds.mean(j, n));
    g.var_mu.push_back(dm.var(j, n));
    g.se_mu.push_back(std::sqrt(g.var_mu.back() / n));
  }
  return g;
}

IdentityReport gaussian_identity_check(const TapeFn& f, std::span<const double> mu, std::span<const double> sigma,
                                       std::size_t n_samples, Rng& rng) {
  check_gaussian_params(mu, sigma, n_samples);
  if (n_samples < 2) throw InvalidArgument("gaussian_identity_check: need at least two samples");
  const std::size_t d = mu.size();
  RunningMoments lm(d), rm(d), lc(d), rc(d), dmean(d), dcov(d);
  std::vector<double> w(d), eps(d);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      eps[j] = dist(rng);
      w[j] = mu[j] + sigma[j] * eps[j];
    }
    const auto [fv, g] = eval_grad(f, w);
    for (std::size_t j = 0; j < d; ++j) {
      // Diagonal Hessian entry by central difference of the tape gradient.
      const double h = 1e-4 * (1.0 + std::abs(w[j]));
      std::vector<double> wp = w, wm = w;
      wp[j] += h;
      wm[j] -= h;
      const double hjj = (eval_grad(f, wp).second[j] - eval_grad(f, wm).second[j]) / (2.0 * h);
      const double s2 = sigma[j] * sigma[j];
      const double lhs_m = fv * eps[j] / sigma[j];
      const double lhs_c = fv * (eps[j] * eps[j] - 1.0) / (2.0 * s2);  // d ln q / d sigma^2
      const double rhs_c = 0.5 * hjj;
      lm.add(j, lhs_m);
      rm.add(j, g[j]);
      lc.add(j, lhs_c);
      rc.add(j, rhs_c);
      dmean.add(j, lhs_m - g[j]);
      dcov.add(j, lhs_c - rhs_c);
    }
  }
  const double n = static_cast<double>(n_samples);
  auto z = [&](const RunningMoments& m, std::size_t j) {
    const double mean = m.mean(j, n), se = std::sqrt(m.var(j, n) / n);
    if (se == 0.0) return mean == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::abs(mean) / se;
  };
  IdentityReport r;
  for (std::size_t j = 0; j < d; ++j) {
    r.mean_lhs.push_back(lm.mean(j, n));
    r.mean_rhs.push_back(rm.mean(j, n));
    r.cov_lhs.push_back(lc.mean(j, n));
    r.cov_rhs.push_back(rc.mean(j, n));
    r.max_z_mean = std::max(r.max_z_mean, z(dmean, j));
    r.max_z_cov = std::max(r.max_z_cov, z(dcov, j));
  }
  return r;
}

// ---------------------------------------------------------------------------

DropoutPosterior DropoutPosterior::uniform(const NetworkSpec& spec, ParameterSet mean, double p, double weight_decay) {
  DropoutPosterior dp;
  dp.mean = std::move(mean);
  dp.weight_decay = weight_decay;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::dense) dp.rates[i] = p;
  dp.validate(spec);
  return dp;
}

double DropoutPosterior::rate(std::size_t layer) const {
  const auto it = rates.find(layer);
  return it == rates.end() ? 0.0 : it->second;
}

void DropoutPosterior::validate(const NetworkSpec& spec) const {
  for (const auto& [i, p] : rates) {
    if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout rate must lie in [0, 1)");
    if (i >= spec.layers.size() || spec.layers[i].kind != LayerKind::dense)
      throw InvalidArgument("dropout rate given for non-dense layer " + std::to_string(i));
  }
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be non-negative");
  mean.check(spec);
}

DropoutMasks sample_dropout_masks(const NetworkSpec& spec, const DropoutPosterior& dp, std::size_t batch, Rng& rng) {
  DropoutMasks masks;
  for (const auto& [i, p] : dp.rates) {
    if (p == 0.0) continue;
    Tensor m(Shape{batch, spec.layers[i].in});
    std::bernoulli_distribution keep(1.0 - p);
    for (double& v : m.values()) v = keep(rng) ? 1.0 : 0.0;
    masks.emplace(i, std::move(m));
  }
  return masks;
}

namespace {

// Forward with dense inputs masked (masks given) or scaled by (1 - p).
ad::Var dropout_tape_forward(const NetworkSpec& spec, const DropoutPosterior& dp, const NetVars& vars, ad::Var x,
                             const DropoutMasks* masks, bool logits) {
  ForwardHooks hooks;
  hooks.logits = logits;
  hooks.dense = [&](std::size_t i, ad::Var h, const LayerVars& lv) {
    const double p = dp.rate(i);
    if (p > 0.0) {
      if (masks) {
        const auto it = masks->find(i);
        if (it == masks->end()) throw InvalidArgument("dropout: missing mask for layer " + std::to_string(i));
        if (it->second.shape() != h.shape())
          throw ShapeError("dropout: mask " + shape_str(it->second.shape()) + " vs input " + shape_str(h.shape()));
        h = h * h.tape().constant(it->second);
      } else {
        h = ad::scale(h, 1.0 - p);
      }
    }
    ad::Var out = ad::matmul(h, lv.weight);
    return lv.bias ? out + *lv.bias : out;
  };
  return forward(spec, vars, x, hooks);
}

Tensor dropout_eval(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x, const DropoutMasks* masks) {
  ad::Tape tape;
  const NetVars vars = bind_parameters(tape, dp.mean, false);
  return dropout_tape_forward(spec, dp, vars, tape.input("x", x), masks, false).value();
}

std::size_t batch_rows(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("dropout_forward: input needs a batch dimension");
  return x.dim(0);
}

DropoutResult train_point(const NetworkSpec& spec, const LikelihoodSpec& lik, const Tensor& x, const Tensor& y,
                          const TrainConfig& cfg, double p, double weight_decay, const EpochCallback& on_epoch) {
  spec.validate();
  const std::size_t n = x.dim(0);
  if (y.dim(0) != n) throw ShapeError("training: inputs and targets differ in row count");
  cfg.validate(n);
  Rng init_rng = substream(cfg.seed, 0), batch_rng = substream(cfg.seed, 1), noise_rng = substream(cfg.seed, 2);

  DropoutResult res;
  res.posterior = DropoutPosterior::uniform(spec, ParameterSet::scaled_normal(spec, init_rng), p, weight_decay);
  std::vector<double> theta = res.posterior.mean.flatten();
  std::vector<double> grad(theta.size());
  Optimizer opt(cfg);
  const auto start = Clock::now();
  const bool logits = spec.task == Task::classification;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = epoch_batches(n, cfg.batch_size, batch_rng);
    TraceRow row;
    row.epoch = epoch;
    for (const auto& idx : batches) {
      const Tensor bx = x.gather_rows(idx), by = y.gather_rows(idx);
      const double scale = static_cast<double>(n) / static_cast<double>(idx.size());
      ad::Tape tape;
      const NetVars vars = bind_parameters(tape, res.posterior.mean, true);
      const DropoutMasks masks = sample_dropout_masks(spec, res.posterior, idx.size(), noise_rng);
      ad::Var out = dropout_tape_forward(spec, res.posterior, vars, tape.input("x", bx), &masks, logits);
      ad::Var nll = ad::scale(log_likelihood(lik, out, by), -scale);
      ad::Var loss = nll;
      ad::Var penalty = tape.constant(0.0);
      if (weight_decay > 0.0) {
        for (const auto& [i, lv] : vars) {
          penalty = penalty + ad::sum(ad::square(lv.weight));
          if (lv.bias) penalty = penalty + ad::sum(ad::square(*lv.bias));
        }
        penalty = ad::scale(penalty, weight_decay);
        loss = loss + penalty;
      }
      tape.backward(loss);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        res.diverged = true;
        res.message = "non-finite loss at epoch " + std::to_string(epoch);
        return res;
      }
      row.elbo -= lv;
      row.nll += nll.value().item();
      row.kl += penalty.value().item();
      const auto g = collect_grads(tape, vars).flatten();
      opt.step(theta, g);
      res.posterior.mean.assign(theta);
    }
    const double nb = static_cast<double>(batches.size());
    row.elbo /= nb;
    row.nll /= nb;
    row.kl /= nb;
    row.wall_ms = elapsed_ms(start);
    res.trace.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return res;
}

}  // namespace

Tensor dropout_forward(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x, Rng& rng, bool stochastic) {
  dp.validate(spec);
  if (!stochastic) return dropout_eval(spec, dp, x, nullptr);
  const DropoutMasks masks = sample_dropout_masks(spec, dp, batch_rows(x), rng);
  return dropout_eval(spec, dp, x, &masks);
}

Tensor dropout_forward(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x, const DropoutMasks& masks) {
  dp.validate(spec);
  return dropout_eval(spec, dp, x, &masks);
}

DropoutResult mc_dropout_train(const NetworkSpec& spec, const LikelihoodSpec& lik, const Tensor& x, const Tensor& y,
                               const TrainConfig& cfg, double p, double weight_decay, const EpochCallback& on_epoch) {
  return train_point(spec, lik, x, y, cfg, p, weight_decay, on_epoch);
}

DropoutResult map_train(const NetworkSpec& spec, const LikelihoodSpec& lik, const Tensor& x, const Tensor& y,
                        const TrainConfig& cfg, double weight_decay, const EpochCallback& on_epoch) {
  return train_point(spec, lik, x, y, cfg, 0.0, weight_decay, on_epoch);
}

std::vector<Tensor> mc_dropout_output_samples(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x,
                                              std::size_t n_samples, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(n_samples);
  for (std::size_t t = 0; t < n_samples; ++t) out.push_back(dropout_forward(spec, dp, x, rng, true));
  return out;
}

PredictiveSummary mc_dropout_predict(const NetworkSpec& spec, const DropoutPosterior& dp, const Tensor& x,
                                     std::size_t n_samples, double sigma_noise, Rng& rng, double level) {
  if (n_samples < 2) throw InvalidArgument("mc_dropout_predict: need at least two stochastic passes");
  return predictive_moments(mc_dropout_output_samples(spec, dp, x, n_samples, rng), sigma_noise, spec.task, level);
}

// ---------------------------------------------------------------------------

Tensor local_reparam_forward(const Tensor& mu, const Tensor& sigma, const Tensor& x, Rng& rng) {
  if (mu.rank() != 2 || sigma.shape() != mu.shape()) throw ShapeError("local_reparam_forward: mu/sigma must be [in, out]");
  if (x.rank() != 2 || x.dim(1) != mu.dim(0))
    throw ShapeError("local_reparam_forward: input " + shape_str(x.shape()) + " vs weights " + shape_str(mu.shape()));
  const std::size_t n = x.dim(0), in = mu.dim(0), out = mu.dim(1);
  Tensor phi(Shape{n, out});
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double gamma = 0.0, delta2 = 0.0;
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = x.at(r, i), s = sigma.at(i, j);
        gamma += xi * mu.at(i, j);
        delta2 += xi * xi * s * s;
      }
      phi.at(r, j) = gamma + std::sqrt(delta2) * dist(rng);
    }
  return phi;
}

ad::Var local_reparam_forward(ad::Var x, const LayerVars& mu, const LayerVars& rho, Rng& rng) {
  ad::Tape& tape = x.tape();
  ad::Var gamma = ad::matmul(x, mu.weight);
  ad::Var delta2 = ad::matmul(ad::square(x), ad::square(ad::softplus(rho.weight)));
  if (mu.bias) {
    gamma = gamma + *mu.bias;
    delta2 = delta2 + ad::square(ad::softplus(*rho.bias));
  }
  // Small floor keeps the sqrt differentiable for all-zero input rows.
  ad::Var delta = ad::sqrt(ad::add_scalar(delta2, 1e-16));
  return gamma + delta * tape.constant(normal_tensor(gamma.shape(), rng));
}

}  // namespace bnn
