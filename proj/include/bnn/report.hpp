#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "bnn/predictive.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

// Header row plus data rows, '.' decimal, 17 significant digits.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> cells);
  void add_row(const std::vector<double>& values);

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string str() const;
  void write(const std::string& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

std::string format_double(double v);

// Reads a file written by CsvTable (no quoting). Throws DataError.
CsvTable read_csv_table(const std::string& path);

// x, mean, lo1, hi1, lo2, hi2 (+-1 and +-2 predictive sd), then the
// credible bounds when the summary carries them. x is [N, 1].
CsvTable band_table(const Tensor& x, const PredictiveSummary& s);

struct ClassificationReport {
  double accuracy = 0.0;
  std::vector<std::size_t> predicted;
  std::vector<double> confidence;  // predictive mean of the predicted class
};

// Top-1 accuracy of the predictive mean. Throws ShapeError on a size
// mismatch.
ClassificationReport classification_report(const PredictiveSummary& s, const Tensor& targets);

// Long-format table (row, label, predicted, class, mean, lower, upper) for
// the `n_rows` least confident examples, most uncertain first. Requires
// credible bounds in the summary.
CsvTable interval_table(const PredictiveSummary& s, const Tensor& targets, std::size_t n_rows);

}  // namespace bnn
