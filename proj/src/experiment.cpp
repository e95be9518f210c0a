#include "bnn/experiment.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "bnn/error.hpp"
#include "bnn/report.hpp"
#include "bnn/version.hpp"

namespace bnn {

namespace {

constexpr double kZ95 = 1.959963984540054;

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "method", "seed", "out",
      "data.source", "data.n", "data.train_fraction", "data.seed", "data.mnist_train", "data.mnist_test",
      "model.arch", "model.hidden", "model.activation", "model.bias",
      "prior.kind", "prior.mean", "prior.sigma", "prior.pi", "prior.sigma_slab", "prior.sigma_spike",
      "likelihood.sigma_noise",
      "train.epochs", "train.batch_size", "train.learning_rate", "train.optimizer", "train.mc_samples",
      "bbb.sigma0", "bbb.mu_init", "bbb.mu_std", "bbb.local_reparam",
      "dropout.p", "dropout.weight_decay",
      "hmc.step_size", "hmc.leapfrog_steps", "hmc.samples", "hmc.burn_in", "hmc.gibbs",
      "hmc.a_prior", "hmc.b_prior", "hmc.a_noise", "hmc.b_noise",
      "gp.kernel", "gp.lengthscale", "gp.variance", "gp.noise_var",
      "predict.samples", "predict.level", "predict.grid_points", "predict.interval_rows"};
  return keys;
}

std::optional<double> auto_or_double(const Config& c, const std::string& key) {
  if (!c.has(key) || c.get(key, "") == "auto") return std::nullopt;
  return c.get_double(key, 0.0);
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

bool is_toy(const std::string& source) { return source.rfind("toy:", 0) == 0; }

double output_sigma(const ExperimentConfig& cfg, const Dataset& d) {
  if (cfg.sigma_noise) return *cfg.sigma_noise;
  return d.noise_sigma > 0.0 ? d.noise_sigma : 0.1;
}

std::size_t class_count(const Dataset& d) {
  double hi = 0.0;
  for (double t : d.targets.values()) hi = std::max(hi, t);
  return static_cast<std::size_t>(hi) + 1;
}

}  // namespace

Method parse_method(std::string_view name) {
  if (name == "bbb") return Method::bbb;
  if (name == "mc_dropout") return Method::mc_dropout;
  if (name == "hmc") return Method::hmc;
  if (name == "gp") return Method::gp;
  if (name == "map") return Method::map;
  throw ConfigError("unknown method '" + std::string(name) + "' (bbb, mc_dropout, hmc, gp, map)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::bbb: return "bbb";
    case Method::mc_dropout: return "mc_dropout";
    case Method::hmc: return "hmc";
    case Method::gp: return "gp";
    case Method::map: return "map";
  }
  return "?";
}

ExperimentConfig ExperimentConfig::from(const Config& c) {
  for (const auto& [k, v] : c.entries())
    if (!known_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");

  ExperimentConfig e;
  e.data_source = c.get("data.source", e.data_source);
  e.data_n = c.get_size("data.n", e.data_n);
  e.train_fraction = c.get_double("data.train_fraction", e.train_fraction);
  if (c.has("data.seed")) e.data_seed = c.get_u64("data.seed", 0);
  e.mnist_train = c.get_size("data.mnist_train", e.mnist_train);
  if (c.has("data.mnist_test")) e.mnist_test = c.get_size("data.mnist_test", 0);

  e.arch = c.get("model.arch", e.arch);
  e.hidden = c.get_sizes("model.hidden", e.hidden);
  if (c.has("model.activation")) e.activation = parse_activation(c.get("model.activation", ""));
  e.bias = c.get_bool("model.bias", e.bias);

  const std::string prior_kind = c.get("prior.kind", "gaussian");
  if (prior_kind == "gaussian") {
    e.prior = PriorSpec::gaussian(c.get_double("prior.mean", 0.0), c.get_double("prior.sigma", 1.0));
  } else if (prior_kind == "spike_slab") {
    e.prior = PriorSpec::spike_slab(c.get_double("prior.pi", 0.5), c.get_double("prior.sigma_slab", 1.0),
                                    c.get_double("prior.sigma_spike", 0.0625));
  } else {
    throw ConfigError("prior.kind: expected gaussian or spike_slab, got '" + prior_kind + "'");
  }
  e.sigma_noise = auto_or_double(c, "likelihood.sigma_noise");

  e.method = parse_method(c.get("method", "bbb"));
  e.train.epochs = c.get_size("train.epochs", 100);
  e.train.batch_size = c.get_size("train.batch_size", 32);
  e.train.learning_rate = c.get_double("train.learning_rate", 1e-3);
  e.train.optimizer = parse_optimizer(c.get("train.optimizer", "adam"));
  e.train.mc_samples = c.get_size("train.mc_samples", 1);

  e.bbb_sigma0 = c.get_double("bbb.sigma0", e.bbb_sigma0);
  const std::string mu_init = c.get("bbb.mu_init", "scaled");
  if (mu_init != "scaled" && mu_init != "normal")
    throw ConfigError("bbb.mu_init: expected scaled or normal, got '" + mu_init + "'");
  e.bbb_scaled_init = mu_init == "scaled";
  e.bbb_mu_std = c.get_double("bbb.mu_std", e.bbb_mu_std);
  e.local_reparam = c.get_bool("bbb.local_reparam", e.local_reparam);

  e.dropout_p = c.get_double("dropout.p", e.dropout_p);
  e.weight_decay = c.get_double("dropout.weight_decay", e.weight_decay);

  e.hmc.step_size = c.get_double("hmc.step_size", e.hmc.step_size);
  e.hmc.leapfrog_steps = c.get_size("hmc.leapfrog_steps", e.hmc.leapfrog_steps);
  e.hmc.n_samples = c.get_size("hmc.samples", e.hmc.n_samples);
  e.hmc.burn_in = c.get_size("hmc.burn_in", e.hmc.burn_in);
  e.hmc.gibbs = c.get_bool("hmc.gibbs", e.hmc.gibbs);
  e.hyper.a_prior = c.get_double("hmc.a_prior", e.hyper.a_prior);
  e.hyper.b_prior = c.get_double("hmc.b_prior", e.hyper.b_prior);
  e.hyper.a_noise = c.get_double("hmc.a_noise", e.hyper.a_noise);
  e.hyper.b_noise = c.get_double("hmc.b_noise", e.hyper.b_noise);

  e.kernel.kind = parse_kernel(c.get("gp.kernel", "matern52"));
  e.kernel.lengthscale = c.get_double("gp.lengthscale", e.kernel.lengthscale);
  e.kernel.variance = c.get_double("gp.variance", e.kernel.variance);
  e.gp_noise_var = auto_or_double(c, "gp.noise_var");

  e.predict_samples = c.get_size("predict.samples", e.predict_samples);
  e.level = c.get_double("predict.level", e.level);
  e.grid_points = c.get_size("predict.grid_points", e.grid_points);
  e.interval_rows = c.get_size("predict.interval_rows", e.interval_rows);

  e.seed = c.get_u64("seed", e.seed);
  e.out_dir = c.get("out", "");
  e.validate();
  return e;
}

Config ExperimentConfig::to_config() const {
  Config c;
  auto num = [&c](const std::string& k, double v) { c.set(k, format_double(v)); };
  auto size = [&c](const std::string& k, std::uint64_t v) { c.set(k, std::to_string(v)); };
  c.set("method", to_string(method));
  size("seed", seed);
  if (!out_dir.empty()) c.set("out", out_dir);
  c.set("data.source", data_source);
  size("data.n", data_n);
  num("data.train_fraction", train_fraction);
  if (data_seed) size("data.seed", *data_seed);
  size("data.mnist_train", mnist_train);
  if (mnist_test) size("data.mnist_test", *mnist_test);
  c.set("model.arch", arch);
  c.set("model.hidden", join(hidden));
  c.set("model.activation", to_string(activation));
  c.set("model.bias", bias ? "true" : "false");
  if (prior.kind == PriorSpec::Kind::gaussian) {
    c.set("prior.kind", "gaussian");
    num("prior.mean", prior.mean);
    num("prior.sigma", prior.sigma);
  } else {
    c.set("prior.kind", "spike_slab");
    num("prior.pi", prior.pi);
    num("prior.sigma_slab", prior.sigma_slab);
    num("prior.sigma_spike", prior.sigma_spike);
  }
  c.set("likelihood.sigma_noise", sigma_noise ? format_double(*sigma_noise) : "auto");
  size("train.epochs", train.epochs);
  size("train.batch_size", train.batch_size);
  num("train.learning_rate", train.learning_rate);
  c.set("train.optimizer", to_string(train.optimizer));
  size("train.mc_samples", train.mc_samples);
  num("bbb.sigma0", bbb_sigma0);
  c.set("bbb.mu_init", bbb_scaled_init ? "scaled" : "normal");
  num("bbb.mu_std", bbb_mu_std);
  c.set("bbb.local_reparam", local_reparam ? "true" : "false");
  num("dropout.p", dropout_p);
  num("dropout.weight_decay", weight_decay);
  num("hmc.step_size", hmc.step_size);
  size("hmc.leapfrog_steps", hmc.leapfrog_steps);
  size("hmc.samples", hmc.n_samples);
  size("hmc.burn_in", hmc.burn_in);
  c.set("hmc.gibbs", hmc.gibbs ? "true" : "false");
  num("hmc.a_prior", hyper.a_prior);
  num("hmc.b_prior", hyper.b_prior);
  num("hmc.a_noise", hyper.a_noise);
  num("hmc.b_noise", hyper.b_noise);
  c.set("gp.kernel", to_string(kernel.kind));
  num("gp.lengthscale", kernel.lengthscale);
  num("gp.variance", kernel.variance);
  c.set("gp.noise_var", gp_noise_var ? format_double(*gp_noise_var) : "auto");
  size("predict.samples", predict_samples);
  num("predict.level", level);
  size("predict.grid_points", grid_points);
  size("predict.interval_rows", interval_rows);
  return c;
}

void ExperimentConfig::validate() const {
  const bool mnist = data_source.rfind("mnist:", 0) == 0;
  if (!is_toy(data_source) && !mnist && data_source.rfind("csv:", 0) != 0)
    throw ConfigError("data.source: expected toy:NAME, csv:PATH or mnist:DIR, got '" + data_source + "'");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("data.train_fraction must lie in (0, 1]");
  if (arch != "mlp" && arch != "lenet_small")
    throw ConfigError("model.arch: expected mlp or lenet_small, got '" + arch + "'");
  if (arch == "lenet_small" && !mnist) throw ConfigError("model.arch lenet_small needs an mnist data source");
  if (mnist && method == Method::gp) throw ConfigError("method gp supports regression only");
  if (sigma_noise && !(*sigma_noise > 0.0)) throw ConfigError("likelihood.sigma_noise must be positive");
  if (!(bbb_sigma0 > 0.0)) throw ConfigError("bbb.sigma0 must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout.p must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("dropout.weight_decay must be non-negative");
  kernel.validate();
  if (gp_noise_var && *gp_noise_var < 0.0) throw ConfigError("gp.noise_var must be non-negative");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("predict.level must lie in (0, 1)");
  if (method != Method::map && method != Method::gp && predict_samples < 2)
    throw ConfigError("predict.samples must be at least 2");
  if (method == Method::hmc && hmc.n_samples < 2) throw ConfigError("hmc.samples must be at least 2");
  if (grid_points < 2) throw ConfigError("predict.grid_points must be at least 2");
  prior.validate();
}

Dataset load_experiment_data(const ExperimentConfig& cfg) {
  const std::string& s = cfg.data_source;
  const auto colon = s.find(':');
  const std::string kind = s.substr(0, colon), arg = s.substr(colon + 1);
  Dataset d;
  if (kind == "toy") {
    d = make_toy_dataset(arg, cfg.effective_data_seed(), cfg.data_n);
    if (cfg.train_fraction < 1.0) split_dataset(d, cfg.train_fraction, cfg.effective_data_seed());
  } else if (kind == "csv") {
    d = load_csv_regression(arg, cfg.train_fraction, cfg.effective_data_seed());
  } else if (kind == "mnist") {
    d = load_mnist_dir(arg, cfg.mnist_train, cfg.mnist_test);
  } else {
    throw ConfigError("data.source: unknown kind '" + kind + "'");
  }
  if (d.train.empty()) throw DataError(s + ": no training rows");
  if (d.test.empty()) throw DataError(s + ": no test rows (lower data.train_fraction)");
  return d;
}

NetworkSpec build_network(const ExperimentConfig& cfg, const Dataset& d) {
  if (cfg.arch == "lenet_small") {
    if (d.inputs.dim(1) != 784) throw ShapeError("lenet_small expects 784 inputs per row");
    return NetworkSpec::lenet_small(cfg.bias);
  }
  const std::size_t out = d.task == Task::classification ? class_count(d) : 1;
  return NetworkSpec::mlp(d.inputs.dim(1), cfg.hidden, out, cfg.activation, d.task, cfg.bias);
}

PredictiveSummary predict(const TrainedModel& m, const Tensor& x, std::size_t n_samples, double level, Rng& rng) {
  switch (m.method) {
    case Method::bbb: return bbb_predict(m.spec, m.vp, x, n_samples, m.sigma_noise, rng, level);
    case Method::mc_dropout:
      return mc_dropout_predict(m.spec, m.dropout, x, n_samples, m.sigma_noise, rng, level);
    case Method::gp: return gp_predict(m.gp, x, true);
    case Method::hmc: {
      std::vector<Tensor> outs;
      outs.reserve(m.chain.size());
      for (const auto& w : m.chain) outs.push_back(mlp_forward(m.spec, ParameterSet::zeros(m.spec).with_values(w), x));
      return predictive_moments(outs, m.sigma_noise, m.spec.task, level);
    }
    case Method::map: {
      PredictiveSummary s;
      s.mean = dropout_forward(m.spec, m.dropout, x, rng, false);
      const double v = m.spec.task == Task::regression ? m.sigma_noise * m.sigma_noise : 0.0;
      s.variance = Tensor(s.mean.shape(), v);
      s.mean_se = Tensor(s.mean.shape(), 0.0);
      s.level = level;
      s.n_samples = 1;
      return s;
    }
  }
  throw InvalidArgument("predict: unknown method");
}

void save_model(const TrainedModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  auto array = [&out](const std::string& name, const std::vector<double>& v) {
    out << name << " " << v.size();
    for (double x : v) out << " " << format_double(x);
    out << "\n";
  };
  out << "method " << to_string(m.method) << "\n";
  array("sigma_noise", {m.sigma_noise});
  switch (m.method) {
    case Method::bbb:
      array("mu", m.vp.mu.flatten());
      array("rho", m.vp.rho.flatten());
      break;
    case Method::mc_dropout:
    case Method::map: {
      array("mean", m.dropout.mean.flatten());
      std::vector<double> rates;
      for (const auto& [layer, p] : m.dropout.rates) {
        rates.push_back(static_cast<double>(layer));
        rates.push_back(p);
      }
      array("rates", rates);
      array("weight_decay", {m.dropout.weight_decay});
      break;
    }
    case Method::hmc:
      for (const auto& w : m.chain) array("sample", w);
      break;
    case Method::gp:
      array("noise_var", {m.gp.noise_var});
      array("x_shape", {static_cast<double>(m.gp.x.dim(0)), static_cast<double>(m.gp.x.dim(1))});
      array("x", m.gp.x.values());
      array("y", m.gp.y);
      break;
  }
  if (!out) throw DataError("write failed: " + path);
}

TrainedModel load_model(const std::string& path, const ExperimentConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file " + path);
  std::string line, method;
  std::size_t line_no = 0;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    ls.imbue(std::locale::classic());
    std::string name;
    if (!(ls >> name)) continue;
    if (name == "method") {
      ls >> method;
      continue;
    }
    std::size_t n = 0;
    if (!(ls >> n)) throw DataError(path + ":" + std::to_string(line_no) + ": missing count");
    std::vector<double> v(n);
    for (auto& x : v)
      if (!(ls >> x)) throw DataError(path + ":" + std::to_string(line_no) + ": truncated array '" + name + "'");
    arrays.emplace_back(name, std::move(v));
  }
  auto find = [&](const std::string& name) -> const std::vector<double>& {
    for (const auto& [k, v] : arrays)
      if (k == name) return v;
    throw DataError(path + ": missing '" + name + "'");
  };

  TrainedModel m;
  m.method = parse_method(method);
  if (m.method != cfg.method)
    throw ConfigError(path + ": model was trained with " + method + ", config says " + to_string(cfg.method));
  m.sigma_noise = find("sigma_noise").at(0);
  if (m.method == Method::gp) {
    const auto& shape = find("x_shape");
    const Tensor x({static_cast<std::size_t>(shape.at(0)), static_cast<std::size_t>(shape.at(1))}, find("x"));
    m.gp = gp_fit(cfg.kernel, find("noise_var").at(0), x, find("y"));
    return m;
  }
  // Network shape depends only on the data's dimensions, so rebuild from a
  // stub with the stored parameter count checked below.
  Dataset stub = load_experiment_data(cfg);
  m.spec = build_network(cfg, stub);
  const ParameterSet zero = ParameterSet::zeros(m.spec);
  auto params = [&](const std::vector<double>& v) {
    if (v.size() != zero.count())
      throw DataError(path + ": parameter count " + std::to_string(v.size()) + " does not match the network (" +
                      std::to_string(zero.count()) + ")");
    return zero.with_values(v);
  };
  switch (m.method) {
    case Method::bbb:
      m.vp.mu = params(find("mu"));
      m.vp.rho = params(find("rho"));
      break;
    case Method::mc_dropout:
    case Method::map: {
      m.dropout.mean = params(find("mean"));
      const auto& r = find("rates");
      for (std::size_t i = 0; i + 1 < r.size(); i += 2) m.dropout.rates[static_cast<std::size_t>(r[i])] = r[i + 1];
      m.dropout.weight_decay = find("weight_decay").at(0);
      break;
    }
    case Method::hmc:
      for (const auto& [k, v] : arrays)
        if (k == "sample") m.chain.push_back(params(v).flatten());
      if (m.chain.size() < 2) throw DataError(path + ": fewer than two posterior samples");
      break;
    case Method::gp: break;
  }
  return m;
}

double ExperimentResult::metric(const std::string& name) const {
  for (const auto& m : metrics)
    if (m.name == name) return m.value;
  throw InvalidArgument("no metric named '" + name + "'");
}

std::string metrics_csv(Method method, const std::vector<Metric>& metrics) {
  std::vector<std::string> header{"method"}, row{to_string(method)};
  for (const auto& m : metrics) {
    header.push_back(m.name);
    row.push_back(format_double(m.value));
  }
  CsvTable t(header);
  t.add_row(row);
  return t.str();
}

namespace {

TrainedModel fit(const ExperimentConfig& cfg, const Dataset& d, ExperimentResult& res) {
  TrainedModel m;
  m.method = cfg.method;
  m.sigma_noise = d.task == Task::regression ? output_sigma(cfg, d) : 0.0;
  const Tensor x = d.train_x(), y = d.train_y();
  const LikelihoodSpec lik =
      d.task == Task::regression ? LikelihoodSpec::gaussian(m.sigma_noise) : LikelihoodSpec::categorical();

  if (cfg.method == Method::gp) {
    const double nv = cfg.gp_noise_var ? *cfg.gp_noise_var : m.sigma_noise * m.sigma_noise;
    m.gp = gp_fit(cfg.kernel, nv, x, y.values());
    return m;
  }

  m.spec = build_network(cfg, d);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.batch_size = std::min(tc.batch_size, x.dim(0));
  auto check = [](bool diverged, const std::string& msg) {
    if (diverged) throw NumericalError("training diverged: " + msg);
  };

  switch (cfg.method) {
    case Method::bbb: {
      Rng init_rng = substream(cfg.seed, 0);
      VariationalPosterior init;
      if (cfg.bbb_scaled_init) {
        const double gain = cfg.activation.kind == ActivationKind::relu || cfg.arch == "lenet_small" ? std::sqrt(2.0) : 1.0;
        init.mu = ParameterSet::scaled_normal(m.spec, init_rng, gain);
        init.rho = ParameterSet::filled(m.spec, softplus_inverse(cfg.bbb_sigma0));
      } else {
        init = VariationalPosterior::init(m.spec, init_rng, cfg.bbb_mu_std, cfg.bbb_sigma0);
      }
      ElboOptions opts;
      opts.local_reparam = cfg.local_reparam;
      BbbResult r = bbb_train(m.spec, cfg.prior, lik, x, y, tc, opts, &init);
      check(r.diverged, r.message);
      m.vp = std::move(r.posterior);
      res.trace = std::move(r.trace);
      break;
    }
    case Method::mc_dropout:
    case Method::map: {
      DropoutResult r = cfg.method == Method::map ? map_train(m.spec, lik, x, y, tc, cfg.weight_decay)
                                                  : mc_dropout_train(m.spec, lik, x, y, tc, cfg.dropout_p, cfg.weight_decay);
      check(r.diverged, r.message);
      m.dropout = std::move(r.posterior);
      res.trace = std::move(r.trace);
      break;
    }
    case Method::hmc: {
      HMCConfig hc = cfg.hmc;
      hc.seed = cfg.seed;
      hc.gibbs = hc.gibbs && d.task == Task::regression;
      Rng init_rng = substream(cfg.seed, 0);
      const std::vector<double> init = ParameterSet::scaled_normal(m.spec, init_rng).flatten();
      const ChainResult chain = hmc_sample(m.spec, cfg.prior, lik, x, y, cfg.hyper, hc, &init);
      res.chain_csv = chain_csv(chain, false);
      // Keep at most predict_samples draws, evenly spaced over the chain.
      const std::size_t n = chain.samples.size(), keep = std::min(n, std::max<std::size_t>(cfg.predict_samples, 2));
      double mean_noise_var = 0.0;
      for (std::size_t i = 0; i < keep; ++i) {
        const std::size_t j = (i * n) / keep;
        m.chain.push_back(chain.samples[j]);
        if (hc.gibbs) mean_noise_var += 1.0 / chain.precisions[j].tau_noise;
      }
      if (hc.gibbs) m.sigma_noise = std::sqrt(mean_noise_var / static_cast<double>(keep));
      break;
    }
    case Method::gp: break;
  }
  return m;
}

std::vector<Metric> evaluate(const ExperimentConfig& cfg, const ExperimentResult& r) {
  const Dataset& d = r.data;
  std::vector<Metric> out{{"seed", static_cast<double>(cfg.seed)},
                          {"n_train", static_cast<double>(d.train.size())},
                          {"n_test", static_cast<double>(d.test.size())}};
  const Tensor ty = d.test_y();
  const std::size_t n = ty.size();
  const PredictiveSummary& s = r.test;
  if (d.task == Task::classification) {
    const ClassificationReport rep = classification_report(s, ty);
    double nll = 0.0, conf = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nll -= std::log(std::max(s.mean.at(i, static_cast<std::size_t>(ty[i])), 1e-300));
      conf += rep.confidence[i];
    }
    out.push_back({"accuracy", rep.accuracy});
    out.push_back({"mean_nll", nll / static_cast<double>(n)});
    out.push_back({"mean_confidence", conf / static_cast<double>(n)});
    return out;
  }
  double se = 0.0, nll = 0.0, covered = 0.0, sd_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::max(s.variance[i], 1e-300), e = ty[i] - s.mean[i];
    se += e * e;
    nll += 0.5 * (kLog2Pi + std::log(v)) + e * e / (2.0 * v);
    covered += std::abs(e) <= kZ95 * std::sqrt(v);
    sd_sum += std::sqrt(v);
  }
  const double dn = static_cast<double>(n);
  out.push_back({"rmse", std::sqrt(se / dn)});
  out.push_back({"mean_nll", nll / dn});
  out.push_back({"coverage95", covered / dn});
  out.push_back({"sigma_in", sd_sum / dn});
  if (r.band && d.gap) {
    double sum = 0.0, count = 0.0;
    for (std::size_t i = 0; i < r.grid.dim(0); ++i)
      if (r.grid[i] > d.gap->first && r.grid[i] < d.gap->second) {
        sum += std::sqrt(r.band->variance[i]);
        count += 1.0;
      }
    if (count > 0.0) out.push_back({"sigma_gap", sum / count});
  }
  return out;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
  if (!out) throw DataError("write failed: " + p.string());
}

std::string manifest_head(const ExperimentConfig& cfg, const std::string& status) {
  std::ostringstream os;
  os << "status = " << status << "\n"
     << "method = " << to_string(cfg.method) << "\n"
     << "seed = " << cfg.seed << "\n"
     << "bnnlab = " << kVersion << "\n"
     << "compiler = " << kCompiler << "\n"
     << "eigen = " << EIGEN_WORLD_VERSION << "." << EIGEN_MAJOR_VERSION << "." << EIGEN_MINOR_VERSION << "\n";
  return os.str();
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  const bool write = !cfg.out_dir.empty();
  const fs::path dir(cfg.out_dir);
  if (write) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
    write_text(dir / "config.txt", cfg.to_config().dump());
  }
  try {
    ExperimentResult r;
    r.data = load_experiment_data(cfg);
    if (cfg.method == Method::gp && r.data.task != Task::regression)
      throw ConfigError("method gp supports regression only");
    r.model = fit(cfg, r.data, r);

    Rng rng = substream(cfg.seed, 4);
    r.test = predict(r.model, r.data.test_x(), cfg.predict_samples, cfg.level, rng);
    if (r.data.task == Task::regression && r.data.inputs.dim(1) == 1) {
      auto [lo, hi] = r.data.domain;
      if (!(hi > lo)) {
        const auto& v = r.data.inputs.values();
        const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
        const double pad = 0.1 * std::max(*mx - *mn, 1e-12);
        lo = *mn - pad;
        hi = *mx + pad;
      }
      r.grid = linspace_column(lo, hi, cfg.grid_points);
      Rng grid_rng = substream(cfg.seed, 6);
      r.band = predict(r.model, r.grid, cfg.predict_samples, cfg.level, grid_rng);
    }
    r.metrics = evaluate(cfg, r);

    if (write) {
      save_model(r.model, (dir / "model.txt").string());
      write_text(dir / "metrics.csv", metrics_csv(cfg.method, r.metrics));
      if (!r.chain_csv.empty())
        write_text(dir / "trace.csv", r.chain_csv);
      else if (!r.trace.empty())
        write_text(dir / "trace.csv", trace_csv(r.trace));
      if (r.band) band_table(r.grid, *r.band).write((dir / "band.csv").string());
      if (r.data.task == Task::classification && r.test.has_interval())
        interval_table(r.test, r.data.test_y(), cfg.interval_rows).write((dir / "intervals.csv").string());
      write_text(dir / "manifest.txt", manifest_head(cfg, "ok") + "data = " + cfg.data_source +
                                           "\nn_train = " + std::to_string(r.data.train.size()) +
                                           "\nn_test = " + std::to_string(r.data.test.size()) + "\n\n" +
                                           cfg.to_config().dump());
    }
    return r;
  } catch (const std::exception& e) {
    if (write) {
      const auto* be = dynamic_cast<const Error*>(&e);
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      write_text(dir / "manifest.txt", manifest_head(cfg, "error") + "exit_code = " +
                                           std::to_string(be ? be->exit_code() : 1) + "\nerror = " + msg + "\n\n" +
                                           cfg.to_config().dump());
    }
    throw;
  }
}

}  // namespace bnn
