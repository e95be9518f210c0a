// bnnlab: command line front end for the experiment harness.

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "bnn/config.hpp"
#include "bnn/data.hpp"
#include "bnn/error.hpp"
#include "bnn/evidence.hpp"
#include "bnn/experiment.hpp"
#include "bnn/gp.hpp"
#include "bnn/report.hpp"
#include "bnn/version.hpp"

namespace fs = std::filesystem;
using namespace bnn;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;
};

ExperimentConfig resolve(const Common& c) {
  Config cfg = c.config.empty() ? Config{} : Config::load(c.config);
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  if (!c.out.empty()) cfg.set("out", c.out);
  if (!c.method.empty()) cfg.set("method", c.method);
  return ExperimentConfig::from(cfg);
}

void print_metrics(const ExperimentConfig& cfg, const ExperimentResult& r) {
  std::cout << to_string(cfg.method) << " seed " << cfg.seed << ":";
  for (const auto& m : r.metrics) std::cout << " " << m.name << "=" << format_double(m.value);
  std::cout << "\n";
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const ExperimentResult r = run_experiment(cfg);
  print_metrics(cfg, r);
  if (!cfg.out_dir.empty()) std::cout << "wrote " << cfg.out_dir << "\n";
  return 0;
}

// Numeric CSV of inputs, optional header.
Tensor read_inputs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      const auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || p != cell.data() + cell.size()) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (rows == 0 && cols == 0 && line_no == 1) continue;  // header
      throw DataError(path + ":" + std::to_string(line_no) + ": non-numeric cell");
    }
    if (cols == 0) cols = row.size();
    if (row.size() != cols) throw DataError(path + ":" + std::to_string(line_no) + ": wrong number of columns");
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  if (rows == 0) throw DataError(path + ": no rows");
  return Tensor(Shape{rows, cols}, std::move(values));
}

int cmd_predict(const std::string& model_dir, const std::string& input, const std::string& out,
                std::optional<std::size_t> samples, std::optional<std::uint64_t> seed) {
  const fs::path dir(model_dir);
  const ExperimentConfig cfg = ExperimentConfig::from(Config::load((dir / "config.txt").string()));
  const TrainedModel m = load_model((dir / "model.txt").string(), cfg);
  const Tensor x = read_inputs(input);
  Rng rng = substream(seed.value_or(cfg.seed), 4);
  const PredictiveSummary s = predict(m, x, samples.value_or(cfg.predict_samples), cfg.level, rng);
  const std::size_t d = s.mean.dim(1);
  std::vector<std::string> header;
  for (std::size_t j = 0; j < d; ++j) {
    const std::string k = std::to_string(j);
    header.insert(header.end(), {"mean" + k, "var" + k});
    if (s.has_interval()) header.insert(header.end(), {"lower" + k, "upper" + k});
  }
  CsvTable t(header);
  for (std::size_t i = 0; i < s.mean.dim(0); ++i) {
    std::vector<double> row;
    for (std::size_t j = 0; j < d; ++j) {
      row.push_back(s.mean.at(i, j));
      row.push_back(s.variance.at(i, j));
      if (s.has_interval()) {
        row.push_back(s.lower.at(i, j));
        row.push_back(s.upper.at(i, j));
      }
    }
    t.add_row(row);
  }
  if (out.empty())
    std::cout << t.str();
  else
    t.write(out);
  return 0;
}

int cmd_compare(const Common& c, const std::vector<std::string>& methods, const std::vector<std::uint64_t>& seeds,
                bool parallel) {
  const ExperimentConfig base = resolve(c);
  struct Job {
    ExperimentConfig cfg;
    std::optional<ExperimentResult> result;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (const auto& name : methods)
    for (std::uint64_t seed : seeds) {
      Job j{base, std::nullopt, nullptr};
      j.cfg.method = parse_method(name);
      j.cfg.seed = seed;
      if (!base.out_dir.empty())
        j.cfg.out_dir = (fs::path(base.out_dir) / name / ("seed" + std::to_string(seed))).string();
      jobs.push_back(std::move(j));
    }
  auto run = [](Job& j) {
    try {
      j.result = run_experiment(j.cfg);
    } catch (...) {
      j.error = std::current_exception();
    }
  };
  if (parallel) {
    std::vector<std::thread> threads;
    for (auto& j : jobs) threads.emplace_back(run, std::ref(j));
    for (auto& t : threads) t.join();
  } else {
    for (auto& j : jobs) run(j);
  }
  std::optional<CsvTable> summary;
  for (auto& j : jobs) {
    if (j.error) std::rethrow_exception(j.error);
    print_metrics(j.cfg, *j.result);
    std::vector<std::string> header{"method"}, row{to_string(j.cfg.method)};
    for (const auto& m : j.result->metrics) {
      header.push_back(m.name);
      row.push_back(format_double(m.value));
    }
    if (!summary) summary.emplace(header);
    if (header != summary->header())
      throw InvalidArgument("compare: methods produced different metric columns");
    summary->add_row(row);
  }
  if (!base.out_dir.empty() && summary) {
    summary->write((fs::path(base.out_dir) / "summary.csv").string());
    std::cout << "wrote " << (fs::path(base.out_dir) / "summary.csv").string() << "\n";
  }
  return 0;
}

int cmd_evidence(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out) {
  const Config c = config_path.empty() ? Config{} : Config::load(config_path);
  for (const auto& [k, v] : c.entries())
    if (k.rfind("evidence.", 0) != 0) throw ConfigError("evidence: unknown config key '" + k + "'");
  const std::string source = c.get("evidence.source", "cubic");
  const std::uint64_t s = seed.value_or(c.get_u64("evidence.seed", 0));
  Dataset d;
  if (source == "cubic")
    d = make_cubic_dataset(s, c.get_size("evidence.n", 40), c.get_double("evidence.data_noise", 0.1));
  else if (source.rfind("csv:", 0) == 0)
    d = load_csv_regression(source.substr(4), 1.0, s);
  else
    throw ConfigError("evidence.source: expected cubic or csv:PATH, got '" + source + "'");
  if (d.inputs.dim(1) != 1) throw DataError("evidence: polynomial selection needs one input column");

  const auto degrees = c.get_sizes("evidence.degrees", {1, 2, 3, 4, 5, 6});
  const double prior_sigma = c.get_double("evidence.prior_sigma", 1.0);
  const double noise_sigma = c.get_double("evidence.noise_sigma", 0.1);
  const Tensor x = d.train_x(), y = d.train_y();
  const DegreeSelection sel = select_polynomial_degree(x.values(), y.values(), degrees, prior_sigma, noise_sigma);

  CsvTable t({"degree", "log_likelihood", "log_occam", "log_evidence", "posterior"});
  for (std::size_t i = 0; i < sel.degrees.size(); ++i)
    t.add_row(std::vector<double>{static_cast<double>(sel.degrees[i]), sel.reports[i].log_likelihood,
                                  sel.reports[i].log_occam, sel.reports[i].log_evidence, sel.posterior[i]});
  std::cout << t.str() << "best degree " << sel.best << "\n";
  if (!out.empty()) {
    fs::create_directories(out);
    t.write((fs::path(out) / "evidence.csv").string());
  }
  return 0;
}

int cmd_sample_prior(const std::vector<std::size_t>& hidden, std::size_t draws, const std::vector<double>& probes,
                     const std::string& activation, double sigma_in, double sigma_out, std::uint64_t seed,
                     const std::string& out) {
  CsvTable stats({"hidden", "skewness", "excess_kurtosis", "mardia_kurtosis"});
  if (!out.empty()) fs::create_directories(out);
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    NnPriorConfig pc;
    pc.hidden = hidden[i];
    pc.activation = parse_activation(activation);
    pc.sigma_in = sigma_in;
    pc.sigma_out = sigma_out;
    Rng rng = substream(seed, i);
    const Tensor f = nn_prior_sample_outputs(pc, draws, probes, rng);
    const NormalityStats st = normality_statistic(f);
    stats.add_row(std::vector<double>{static_cast<double>(hidden[i]), st.skewness[0], st.excess_kurtosis[0],
                                      st.mardia_kurtosis});
    if (!out.empty()) {
      std::vector<std::string> header;
      for (std::size_t j = 0; j < probes.size(); ++j) header.push_back("f(" + format_double(probes[j]) + ")");
      CsvTable samples(header);
      for (std::size_t r = 0; r < draws; ++r)
        samples.add_row(std::vector<double>(f.values().begin() + r * probes.size(),
                                            f.values().begin() + (r + 1) * probes.size()));
      samples.write((fs::path(out) / ("prior_H" + std::to_string(hidden[i]) + ".csv")).string());
    }
  }
  std::cout << stats.str();
  if (!out.empty()) stats.write((fs::path(out) / "prior_stats.csv").string());
  return 0;
}

int cmd_gen_data(const std::string& name, std::size_t n, std::uint64_t seed, const std::string& out) {
  const Dataset d = name == "cubic" ? make_cubic_dataset(seed, n) : make_toy_dataset(name, seed, n);
  if (out.empty()) throw ConfigError("gen-data needs --out FILE");
  write_csv_regression(out, d);
  std::cout << "wrote " << d.size() << " rows to " << out << "\n";
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool with_method) {
  sub->add_option("--config", c.config, "Experiment config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Seed (overrides config)");
  sub->add_option("--out", c.out, "Output directory (overrides config)");
  if (with_method) sub->add_option("--method", c.method, "bbb, mc_dropout, hmc, gp or map (overrides config)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian neural network laboratory"};
  app.set_version_flag("--version", std::string("bnnlab ") + kVersion);
  app.require_subcommand(1);

  Common train_opts;
  auto* train = app.add_subcommand("train", "Train one method and write run artifacts");
  add_common(train, train_opts, true);

  std::string model_dir, input, pred_out;
  std::optional<std::size_t> pred_samples;
  std::optional<std::uint64_t> pred_seed;
  auto* pred = app.add_subcommand("predict", "Predict with a trained run directory");
  pred->add_option("--model", model_dir, "Run directory written by train")->required()->check(CLI::ExistingDirectory);
  pred->add_option("--input", input, "CSV of input rows")->required()->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "Output CSV (default stdout)");
  pred->add_option("--samples", pred_samples, "Posterior samples");
  pred->add_option("--seed", pred_seed, "Seed for predictive sampling");

  Common cmp_opts;
  std::vector<std::string> methods{"bbb", "mc_dropout", "gp"};
  std::vector<std::uint64_t> seeds{0};
  bool parallel = false;
  auto* cmp = app.add_subcommand("compare", "Run several methods and seeds on one config");
  add_common(cmp, cmp_opts, false);
  cmp->add_option("--methods", methods, "Methods to run")->delimiter(',');
  cmp->add_option("--seeds", seeds, "Seeds to run")->delimiter(',');
  cmp->add_flag("--parallel", parallel, "Run jobs on separate threads");

  Common ev_opts;
  auto* ev = app.add_subcommand("evidence", "Laplace evidence for polynomial degrees");
  add_common(ev, ev_opts, false);

  std::vector<std::size_t> hidden{1, 3, 10, 100};
  std::size_t draws = 10000;
  std::vector<double> probes{0.2, -0.4};
  std::string activation = "tanh";
  double sigma_in = 5.0, sigma_out = 5.0;
  Common sp_opts;
  auto* sp = app.add_subcommand("sample-prior", "Prior function draws of one-hidden-layer networks");
  add_common(sp, sp_opts, false);
  sp->add_option("--hidden", hidden, "Hidden widths")->delimiter(',');
  sp->add_option("--draws", draws, "Networks drawn per width");
  sp->add_option("--probes", probes, "Input points")->delimiter(',');
  sp->add_option("--activation", activation, "Hidden activation");
  sp->add_option("--sigma-in", sigma_in, "Input weight prior sd");
  sp->add_option("--sigma-out", sigma_out, "Output weight prior sd before 1/sqrt(H) scaling");

  Common gd_opts;
  std::string name = "sinusoid_gap";
  std::size_t n = 200;
  auto* gd = app.add_subcommand("gen-data", "Write a toy dataset as CSV");
  add_common(gd, gd_opts, false);
  gd->add_option("--name", name, "sinusoid_gap, curve, cluster_gap or cubic");
  gd->add_option("-n", n, "Number of points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(train_opts);
    if (*pred) return cmd_predict(model_dir, input, pred_out, pred_samples, pred_seed);
    if (*cmp) return cmd_compare(cmp_opts, methods, seeds, parallel);
    if (*ev) return cmd_evidence(ev_opts.config, ev_opts.seed, ev_opts.out);
    if (*sp) return cmd_sample_prior(hidden, draws, probes, activation, sigma_in, sigma_out, sp_opts.seed.value_or(0),
                                     sp_opts.out);
    if (*gd) return cmd_gen_data(name, n, gd_opts.seed.value_or(0), gd_opts.out);
  } catch (const Error& e) {
    std::cerr << "bnnlab: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "bnnlab: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
