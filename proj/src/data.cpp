#include "bnn/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bnn/error.hpp"
#include "bnn/random.hpp"

namespace bnn {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

class GzReader {
 public:
  explicit GzReader(const std::string& path) : path_(path), f_(gzopen(path.c_str(), "rb")) {
    if (!f_) throw DataError("cannot open " + path);
  }
  ~GzReader() {
    if (f_) gzclose(f_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read(unsigned char* buf, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n - got, 1u << 30));
      const int r = gzread(f_, buf + got, chunk);
      if (r < 0) throw DataError(path_ + ": read error");
      if (r == 0) throw DataError(path_ + ": truncated file (wanted " + std::to_string(n) + " bytes, got " +
                                  std::to_string(got) + ")");
      got += static_cast<std::size_t>(r);
    }
  }

  std::uint32_t u32() {
    std::array<unsigned char, 4> b{};
    read(b.data(), 4);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
  }

 private:
  std::string path_;
  gzFile f_;
};

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

void expect_magic(GzReader& r, std::uint32_t want, const std::string& path) {
  const std::uint32_t got = r.u32();
  if (got != want) throw DataError(path + ": bad IDX magic, expected " + hex32(want) + ", found " + hex32(got));
}

// Uniform draw on the union of [a0, a1] and [b0, b1].
double uniform_on_union(double a0, double a1, double b0, double b1, Rng& rng) {
  const double la = a1 - a0, lb = b1 - b0;
  const double u = uniform01(rng) * (la + lb);
  return u < la ? a0 + u : b0 + (u - la);
}

constexpr double kSinNoise = 0.02;
constexpr double kCurveNoise = 0.1;
constexpr double kClusterNoise = 0.1;

double sinusoid(double x, double e) {
  return x + 0.3 * std::sin(2 * M_PI * (x + e)) + 0.3 * std::sin(4 * M_PI * (x + e)) + e;
}

// sqrt of E_x Var[y | x] for the sinusoid generator, by quadrature over the
// noise and the input support.
double sinusoid_noise_sigma() {
  const int nx = 400, ne = 801;
  double total = 0.0, weight = 0.0;
  for (int i = 0; i < nx; ++i) {
    const double t = (i + 0.5) / nx;
    const double x = t < 0.5 ? 1.2 * t : 0.8 + 1.2 * (t - 0.5);
    double m0 = 0, m1 = 0, m2 = 0;
    for (int j = 0; j < ne; ++j) {
      const double z = -8.0 + 16.0 * j / (ne - 1);
      const double w = std::exp(-0.5 * z * z);
      const double y = sinusoid(x, kSinNoise * z);
      m0 += w;
      m1 += w * y;
      m2 += w * y * y;
    }
    total += m2 / m0 - (m1 / m0) * (m1 / m0);
    weight += 1.0;
  }
  return std::sqrt(total / weight);
}

}  // namespace

void Dataset::validate() const {
  const std::size_t n = size();
  if (inputs.rank() != 2) throw DataError(name + ": inputs must be [N, D]");
  if (targets.rank() < 1 || targets.dim(0) != n) throw DataError(name + ": inputs and targets differ in row count");
  std::vector<char> seen(n, 0);
  for (const auto* part : {&train, &test})
    for (std::size_t i : *part) {
      if (i >= n) throw DataError(name + ": split index out of range");
      if (seen[i]) throw DataError(name + ": train and test overlap");
      seen[i] = 1;
    }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw DataError(name + ": split does not cover every row");
}

void split_dataset(Dataset& d, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must be in (0, 1]");
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
  d.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(d.train.begin(), d.train.end());
  std::sort(d.test.begin(), d.test.end());
}

Dataset load_csv_regression(const std::string& path, double train_fraction, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_commas(line);
    std::vector<double> row(fields.size());
    bool ok = true;
    for (std::size_t i = 0; i < fields.size() && ok; ++i) ok = parse_double(fields[i], row[i]);
    if (!ok) {
      if (rows == 0 && cols == 0) {
        cols = fields.size();  // header
        continue;
      }
      throw DataError(path + ":" + std::to_string(line_no) + ": non-numeric field");
    }
    if (cols == 0) cols = fields.size();
    if (fields.size() != cols)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(cols) + " columns, got " +
                      std::to_string(fields.size()));
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
  }
  if (cols < 2) throw DataError(path + ": need at least two columns");
  if (rows == 0) throw DataError(path + ": no data rows");
  Dataset d;
  d.name = path;
  d.task = Task::regression;
  d.inputs = Tensor(Shape{rows, cols - 1});
  d.targets = Tensor(Shape{rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c + 1 < cols; ++c) d.inputs.at(r, c) = values[r * cols + c];
    d.targets[r] = values[r * cols + cols - 1];
  }
  if (cols == 2) {
    const auto [lo, hi] = std::minmax_element(d.inputs.values().begin(), d.inputs.values().end());
    d.domain = {*lo, *hi};
  }
  split_dataset(d, train_fraction, seed);
  return d;
}

void write_csv_regression(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out.imbue(std::locale::classic());
  out.precision(17);
  const std::size_t n = d.size(), dim = d.inputs.dim(1);
  for (std::size_t c = 0; c < dim; ++c) out << "x" << c << ",";
  out << "y\n";
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < dim; ++c) out << d.inputs.at(r, c) << ",";
    out << d.targets[r] << "\n";
  }
  if (!out) throw DataError("write failed: " + path);
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       std::optional<std::size_t> limit) {
  GzReader img(images_path), lab(labels_path);
  expect_magic(img, 0x00000803u, images_path);
  expect_magic(lab, 0x00000801u, labels_path);
  const std::size_t n_img = img.u32(), h = img.u32(), w = img.u32();
  const std::size_t n_lab = lab.u32();
  if (n_img != n_lab)
    throw DataError("MNIST: " + std::to_string(n_img) + " images but " + std::to_string(n_lab) + " labels");
  const std::size_t n = limit ? std::min(*limit, n_img) : n_img;
  std::vector<unsigned char> pix(n * h * w), labels(n);
  img.read(pix.data(), pix.size());
  lab.read(labels.data(), labels.size());
  Dataset d;
  d.name = "mnist";
  d.task = Task::classification;
  d.inputs = Tensor(Shape{n, h * w});
  d.targets = Tensor(Shape{n, 1});
  for (std::size_t i = 0; i < pix.size(); ++i) d.inputs[i] = pix[i] / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] > 9) throw DataError(labels_path + ": label " + std::to_string(labels[i]) + " out of range");
    d.targets[i] = labels[i];
  }
  d.train.resize(n);
  std::iota(d.train.begin(), d.train.end(), 0);
  return d;
}

Dataset load_mnist_dir(const std::string& dir, std::size_t n_train, std::optional<std::size_t> n_test) {
  auto pick = [&dir](const std::string& stem) {
    const std::string gz = dir + "/" + stem + ".gz";
    return std::ifstream(gz).good() ? gz : dir + "/" + stem;
  };
  Dataset tr = load_mnist_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"), n_train);
  Dataset te = load_mnist_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"), n_test);
  const std::size_t a = tr.size(), b = te.size(), dim = tr.inputs.dim(1);
  Dataset d;
  d.name = "mnist";
  d.task = Task::classification;
  d.inputs = Tensor(Shape{a + b, dim});
  d.targets = Tensor(Shape{a + b, 1});
  std::copy(tr.inputs.values().begin(), tr.inputs.values().end(), d.inputs.values().begin());
  std::copy(te.inputs.values().begin(), te.inputs.values().end(), d.inputs.values().begin() + static_cast<std::ptrdiff_t>(a * dim));
  std::copy(tr.targets.values().begin(), tr.targets.values().end(), d.targets.values().begin());
  std::copy(te.targets.values().begin(), te.targets.values().end(), d.targets.values().begin() + static_cast<std::ptrdiff_t>(a));
  d.train.resize(a);
  std::iota(d.train.begin(), d.train.end(), 0);
  d.test.resize(b);
  std::iota(d.test.begin(), d.test.end(), a);
  return d;
}

double toy_mean_function(const std::string& name, double x) {
  if (name == "sinusoid_gap") {
    // E[sin(a (x + e))] = sin(a x) exp(-a^2 s^2 / 2) for e ~ N(0, s^2).
    const double s2 = kSinNoise * kSinNoise;
    const double a1 = 2 * M_PI, a2 = 4 * M_PI;
    return x + 0.3 * std::sin(a1 * x) * std::exp(-0.5 * a1 * a1 * s2) +
           0.3 * std::sin(a2 * x) * std::exp(-0.5 * a2 * a2 * s2);
  }
  if (name == "curve") return std::sin(3 * x) * std::exp(-0.5 * x * x);
  if (name == "cluster_gap") return 0.5 * x + 0.3;
  throw ConfigError("unknown toy dataset '" + name + "' (expected sinusoid_gap, curve or cluster_gap)");
}

Dataset make_toy_dataset(const std::string& name, std::uint64_t seed, std::size_t n) {
  if (n == 0) throw ConfigError("toy dataset size must be positive");
  (void)toy_mean_function(name, 0.0);  // rejects unknown names
  Rng rng(seed);
  Dataset d;
  d.name = name;
  d.task = Task::regression;
  d.inputs = Tensor(Shape{n, 1});
  d.targets = Tensor(Shape{n, 1});
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0.0, y = 0.0;
    if (name == "sinusoid_gap") {
      x = uniform_on_union(0.0, 0.6, 0.8, 1.4, rng);
      y = sinusoid(x, kSinNoise * nd(rng));
    } else if (name == "curve") {
      x = uniform_on_union(-3.0, -0.5, 0.5, 3.0, rng);
      y = toy_mean_function(name, x) + kCurveNoise * nd(rng);
    } else {
      x = uniform_on_union(-3.0, -1.5, 1.5, 3.0, rng);
      y = toy_mean_function(name, x) + kClusterNoise * nd(rng);
    }
    d.inputs[i] = x;
    d.targets[i] = y;
  }
  if (name == "sinusoid_gap") {
    d.gap = {0.6, 0.8};
    d.noise_sigma = sinusoid_noise_sigma();
    d.domain = {-0.2, 1.6};
  } else if (name == "curve") {
    d.gap = {-0.5, 0.5};
    d.noise_sigma = kCurveNoise;
    d.domain = {-4.0, 4.0};
  } else {
    d.gap = {-1.5, 1.5};
    d.noise_sigma = kClusterNoise;
    d.domain = {-4.0, 4.0};
  }
  d.train.resize(n);
  std::iota(d.train.begin(), d.train.end(), 0);
  return d;
}

Tensor linspace_column(double lo, double hi, std::size_t n) {
  Tensor t(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i)
    t[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return t;
}

Dataset make_cubic_dataset(std::uint64_t seed, std::size_t n, double noise_sigma) {
  if (n < 2) throw ConfigError("cubic dataset needs at least 2 points");
  Rng rng(seed);
  Dataset d;
  d.name = "cubic";
  d.inputs = linspace_column(-1.5, 1.5, n);
  d.targets = Tensor(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double x = d.inputs[i];
    d.targets[i] = x * x * x - x + 0.5 + noise_sigma * standard_normal(rng);
  }
  d.noise_sigma = noise_sigma;
  d.domain = {-1.5, 1.5};
  d.train.resize(n);
  std::iota(d.train.begin(), d.train.end(), std::size_t{0});
  return d;
}

}  // namespace bnn
