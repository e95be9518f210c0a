#include "bnn/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bnn/error.hpp"

namespace bnn {

std::string format_double(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << v;
  return os.str();
}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size())
    throw ShapeError("CsvTable: row has " + std::to_string(cells.size()) + " cells for " +
                     std::to_string(header_.size()) + " columns");
  rows_.push_back(std::move(cells));
}

void CsvTable::add_row(const std::vector<double>& values) {
  std::vector<std::string> cells;
  cells.reserve(values.size());
  for (double v : values) cells.push_back(format_double(v));
  add_row(std::move(cells));
}

std::string CsvTable::str() const {
  std::ostringstream os;
  auto line = [&os](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << "\n";
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return os.str();
}

void CsvTable::write(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << str();
  if (!out) throw DataError("write failed: " + path);
}

CsvTable read_csv_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  CsvTable t(split(line));
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    auto cells = split(line);
    if (cells.size() != t.header().size())
      throw DataError(path + ":" + std::to_string(line_no) + ": wrong number of cells");
    t.add_row(std::move(cells));
  }
  return t;
}

CsvTable band_table(const Tensor& x, const PredictiveSummary& s) {
  if (x.rank() != 2 || x.dim(1) != 1) throw ShapeError("band_table: x must be [N, 1]");
  const std::size_t n = x.dim(0);
  if (s.mean.size() != n || s.variance.size() != n) throw ShapeError("band_table: summary must be [N, 1]");
  std::vector<std::string> header{"x", "mean", "lo1", "hi1", "lo2", "hi2"};
  if (s.has_interval()) {
    header.push_back("lower");
    header.push_back("upper");
  }
  CsvTable t(header);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = s.mean[i], sd = std::sqrt(s.variance[i]);
    std::vector<double> row{x[i], m, m - sd, m + sd, m - 2 * sd, m + 2 * sd};
    if (s.has_interval()) {
      row.push_back(s.lower[i]);
      row.push_back(s.upper[i]);
    }
    t.add_row(row);
  }
  return t;
}

ClassificationReport classification_report(const PredictiveSummary& s, const Tensor& targets) {
  if (s.mean.rank() != 2) throw ShapeError("classification_report: summary mean must be [N, K]");
  const std::size_t n = s.mean.dim(0), k = s.mean.dim(1);
  if (targets.size() != n)
    throw ShapeError("classification_report: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " predictions");
  ClassificationReport r;
  r.predicted.resize(n);
  r.confidence.resize(n);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (s.mean.at(i, c) > s.mean.at(i, best)) best = c;
    r.predicted[i] = best;
    r.confidence[i] = s.mean.at(i, best);
    correct += static_cast<double>(best) == targets[i];
  }
  r.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  return r;
}

CsvTable interval_table(const PredictiveSummary& s, const Tensor& targets, std::size_t n_rows) {
  if (!s.has_interval()) throw InvalidArgument("interval_table: summary has no credible bounds");
  const ClassificationReport r = classification_report(s, targets);
  const std::size_t n = r.predicted.size(), k = s.mean.dim(1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&r](std::size_t a, std::size_t b) { return r.confidence[a] < r.confidence[b]; });
  order.resize(std::min(n_rows, n));
  CsvTable t({"row", "label", "predicted", "class", "mean", "lower", "upper"});
  for (std::size_t i : order)
    for (std::size_t c = 0; c < k; ++c)
      t.add_row(std::vector<std::string>{std::to_string(i), format_double(targets[i]), std::to_string(r.predicted[i]),
                                         std::to_string(c), format_double(s.mean.at(i, c)),
                                         format_double(s.lower.at(i, c)), format_double(s.upper.at(i, c))});
  return t;
}

}  // namespace bnn
