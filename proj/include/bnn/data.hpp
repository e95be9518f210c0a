#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bnn/nets.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

struct Dataset {
  std::string name;
  Task task = Task::regression;
  Tensor inputs;   // [N, D]
  Tensor targets;  // [N, 1]; class indices for classification
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  // Toy generators only.
  std::optional<std::pair<double, double>> gap;  // open interval with no training inputs
  double noise_sigma = 0.0;                      // root mean conditional sd of y given x
  std::pair<double, double> domain{0.0, 0.0};    // plotting range for 1-D inputs

  std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
  // Throws DataError unless rows agree and train/test partition 0..N-1.
  void validate() const;

  Tensor train_x() const { return inputs.gather_rows(train); }
  Tensor train_y() const { return targets.gather_rows(train); }
  Tensor test_x() const { return inputs.gather_rows(test); }
  Tensor test_y() const { return targets.gather_rows(test); }
};

// Seeded shuffle, first round(train_fraction * N) rows go to train.
void split_dataset(Dataset& d, double train_fraction, std::uint64_t seed);

// Numeric CSV, last column the target, optional non-numeric header row.
// Throws DataError with the line number on a malformed row.
Dataset load_csv_regression(const std::string& path, double train_fraction = 0.9, std::uint64_t seed = 0);
void write_csv_regression(const std::string& path, const Dataset& d);

// IDX images (magic 0x00000803, [N, 28, 28] bytes scaled to [0, 1]) and
// labels (0x00000801). Gzipped files are read transparently. `limit` keeps
// the first rows only. All rows go to `train`.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       std::optional<std::size_t> limit = std::nullopt);

// Standard MNIST files under `dir`: first n_train training images for
// training and the t10k set for testing.
Dataset load_mnist_dir(const std::string& dir, std::size_t n_train = 10000,
                       std::optional<std::size_t> n_test = std::nullopt);

// sinusoid_gap, curve or cluster_gap; all rows are training rows, so `test`
// is empty until split_dataset is called. Throws ConfigError on unknown names.
Dataset make_toy_dataset(const std::string& name, std::uint64_t seed, std::size_t n = 200);

// Noise-free generator mean, for the toy sets.
double toy_mean_function(const std::string& name, double x);

// y = x^3 - x + 0.5 + N(0, noise_sigma^2) at n evenly spaced x on
// [-1.5, 1.5]; all rows are training rows.
Dataset make_cubic_dataset(std::uint64_t seed, std::size_t n = 40, double noise_sigma = 0.1);

// Evenly spaced [n, 1] inputs on [lo, hi].
Tensor linspace_column(double lo, double hi, std::size_t n);

}  // namespace bnn
