#include "bnn/nets.hpp"

#include <algorithm>
#include <cmath>

#include "bnn/error.hpp"

namespace bnn {

Activation parse_activation(std::string_view text) {
  if (text == "sigmoid") return {ActivationKind::sigmoid};
  if (text == "tanh") return {ActivationKind::tanh};
  if (text == "relu") return {ActivationKind::relu};
  if (text == "identity" || text == "linear") return {ActivationKind::identity};
  if (text == "softmax") return {ActivationKind::softmax};
  if (text.starts_with("leaky_relu")) {
    Activation a{ActivationKind::leaky_relu};
    const auto open = text.find('(');
    if (open != std::string_view::npos) {
      const auto close = text.find(')', open);
      if (close == std::string_view::npos) throw InvalidArgument("malformed activation '" + std::string(text) + "'");
      a.alpha = std::stod(std::string(text.substr(open + 1, close - open - 1)));
    }
    return a;
  }
  throw InvalidArgument("unknown activation '" + std::string(text) + "'");
}

std::string to_string(const Activation& a) {
  switch (a.kind) {
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::relu: return "relu";
    case ActivationKind::leaky_relu: return "leaky_relu(" + std::to_string(a.alpha) + ")";
    case ActivationKind::identity: return "identity";
    case ActivationKind::softmax: return "softmax";
  }
  return "?";
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.in = in;
  l.out = out;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_h,
                            std::size_t kernel_w, std::size_t stride, std::size_t padding, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in = in_channels;
  l.out = out_channels;
  l.kernel_h = kernel_h;
  l.kernel_w = kernel_w;
  l.stride = stride;
  l.padding = padding;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::act(Activation a) {
  LayerSpec l;
  l.kind = LayerKind::activation;
  l.activation = a;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec LayerSpec::dropout(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout rate must lie in [0, 1)");
  LayerSpec l;
  l.kind = LayerKind::dropout;
  l.dropout_rate = p;
  return l;
}

Shape LayerSpec::weight_shape() const {
  if (kind == LayerKind::dense) return {in, out};
  if (kind == LayerKind::conv2d) return {out, in, kernel_h, kernel_w};
  return {};
}

Shape LayerSpec::bias_shape() const {
  if (kind == LayerKind::dense) return {1, out};
  if (kind == LayerKind::conv2d) return {1, out, 1, 1};
  return {};
}

std::vector<Shape> NetworkSpec::layer_shapes() const {
  if (input_shape.empty()) throw ShapeError("network input shape is empty");
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::dense:
        if (cur.size() != 1 || cur[0] != l.in)
          throw ShapeError(where + "dense fan-in " + std::to_string(l.in) + " does not match input " + shape_str(cur));
        if (l.out == 0) throw ShapeError(where + "dense fan-out must be positive");
        cur = {l.out};
        break;
      case LayerKind::conv2d: {
        if (cur.size() != 3 || cur[0] != l.in)
          throw ShapeError(where + "conv2d expects [" + std::to_string(l.in) + ",H,W], got " + shape_str(cur));
        if (l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0 || l.out == 0)
          throw ShapeError(where + "conv2d kernel, stride and channels must be positive");
        if (l.kernel_h > cur[1] + 2 * l.padding || l.kernel_w > cur[2] + 2 * l.padding)
          throw ShapeError(where + "kernel larger than input " + shape_str(cur));
        cur = {l.out, (cur[1] + 2 * l.padding - l.kernel_h) / l.stride + 1,
               (cur[2] + 2 * l.padding - l.kernel_w) / l.stride + 1};
        break;
      }
      case LayerKind::flatten:
        cur = {shape_size(cur)};
        break;
      case LayerKind::activation:
        if (l.activation.kind == ActivationKind::softmax && i + 1 != layers.size())
          throw InvalidArgument(where + "softmax is only allowed as the output head");
        break;
      case LayerKind::dropout:
        if (!(l.dropout_rate >= 0.0 && l.dropout_rate < 1.0)) throw InvalidArgument(where + "dropout rate outside [0,1)");
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw InvalidArgument("network has no layers");
  const auto shapes = layer_shapes();
  if (shapes.back().size() != 1) throw ShapeError("network output must be a vector, got " + shape_str(shapes.back()));
  const LayerSpec& last = layers.back();
  const bool softmax_head = last.kind == LayerKind::activation && last.activation.kind == ActivationKind::softmax;
  if (task == Task::classification && !softmax_head)
    throw InvalidArgument("classification networks must end with a softmax head");
  if (task == Task::regression && last.kind == LayerKind::activation &&
      last.activation.kind != ActivationKind::identity)
    throw InvalidArgument("regression networks must use an identity output head");
}

Shape NetworkSpec::output_shape() const { return layer_shapes().back(); }

std::size_t NetworkSpec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    if (!l.has_parameters()) continue;
    n += shape_size(l.weight_shape());
    if (l.bias) n += l.out;
  }
  return n;
}

std::vector<std::size_t> NetworkSpec::parametric_layers() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].has_parameters()) idx.push_back(i);
  return idx;
}

NetworkSpec NetworkSpec::mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                             Activation hidden_act, Task task, bool bias) {
  NetworkSpec spec;
  spec.input_shape = {in};
  spec.task = task;
  std::size_t prev = in;
  for (auto h : hidden) {
    spec.layers.push_back(LayerSpec::dense(prev, h, bias));
    spec.layers.push_back(LayerSpec::act(hidden_act));
    prev = h;
  }
  spec.layers.push_back(LayerSpec::dense(prev, out, bias));
  spec.layers.push_back(LayerSpec::act(task == Task::classification ? ActivationKind::softmax : ActivationKind::identity));
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::lenet_small(bool bias) {
  NetworkSpec spec;
  spec.input_shape = {1, 28, 28};
  spec.task = Task::classification;
  spec.layers = {
      LayerSpec::conv2d(1, 8, 5, 5, 1, 0, bias), LayerSpec::act(ActivationKind::relu),
      LayerSpec::conv2d(8, 16, 5, 5, 1, 0, bias), LayerSpec::act(ActivationKind::relu),
      LayerSpec::flatten(),
      LayerSpec::dense(16 * 20 * 20, 64, bias), LayerSpec::act(ActivationKind::relu),
      LayerSpec::dense(64, 10, bias), LayerSpec::act(ActivationKind::softmax),
  };
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------

ParameterSet ParameterSet::filled(const NetworkSpec& spec, double value) {
  ParameterSet p;
  for (std::size_t i : spec.parametric_layers()) {
    const LayerSpec& l = spec.layers[i];
    LayerParams lp{Tensor(l.weight_shape(), value), std::nullopt};
    if (l.bias) lp.bias = Tensor(l.bias_shape(), value);
    p.layers_.emplace(i, std::move(lp));
  }
  return p;
}

ParameterSet ParameterSet::zeros(const NetworkSpec& spec) { return filled(spec, 0.0); }

ParameterSet ParameterSet::normal(const NetworkSpec& spec, Rng& rng, double mean, double stddev) {
  ParameterSet p = zeros(spec);
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& [i, lp] : p.layers_) {
    for (double& v : lp.weight.values()) v = dist(rng);
    if (lp.bias)
      for (double& v : lp.bias->values()) v = dist(rng);
  }
  return p;
}

ParameterSet ParameterSet::scaled_normal(const NetworkSpec& spec, Rng& rng, double gain) {
  ParameterSet p = zeros(spec);
  for (auto& [i, lp] : p.layers_) {
    const LayerSpec& l = spec.layers[i];
    const double fan_in = l.kind == LayerKind::dense ? static_cast<double>(l.in)
                                                     : static_cast<double>(l.in * l.kernel_h * l.kernel_w);
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(fan_in));
    for (double& v : lp.weight.values()) v = dist(rng);
  }
  return p;
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const auto& [i, lp] : layers_) n += lp.weight.size() + (lp.bias ? lp.bias->size() : 0);
  return n;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(count());
  for (const auto& [i, lp] : layers_) {
    flat.insert(flat.end(), lp.weight.values().begin(), lp.weight.values().end());
    if (lp.bias) flat.insert(flat.end(), lp.bias->values().begin(), lp.bias->values().end());
  }
  return flat;
}

void ParameterSet::assign(std::span<const double> flat) {
  if (flat.size() != count())
    throw ShapeError("parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                     std::to_string(count()));
  std::size_t k = 0;
  for (auto& [i, lp] : layers_) {
    for (double& v : lp.weight.values()) v = flat[k++];
    if (lp.bias)
      for (double& v : lp.bias->values()) v = flat[k++];
  }
}

ParameterSet ParameterSet::with_values(std::span<const double> flat) const {
  ParameterSet p = *this;
  p.assign(flat);
  return p;
}

void ParameterSet::check(const NetworkSpec& spec) const {
  const auto idx = spec.parametric_layers();
  if (idx.size() != layers_.size()) throw ShapeError("parameter set does not match the network's parametric layers");
  for (std::size_t i : idx) {
    auto it = layers_.find(i);
    if (it == layers_.end()) throw ShapeError("missing parameters for layer " + std::to_string(i));
    const LayerSpec& l = spec.layers[i];
    if (it->second.weight.shape() != l.weight_shape())
      throw ShapeError("layer " + std::to_string(i) + " weight shape " + shape_str(it->second.weight.shape()) +
                       ", expected " + shape_str(l.weight_shape()));
    if (l.bias != it->second.bias.has_value())
      throw ShapeError("layer " + std::to_string(i) + " bias presence does not match the spec");
    if (l.bias && it->second.bias->shape() != l.bias_shape())
      throw ShapeError("layer " + std::to_string(i) + " bias shape mismatch");
  }
}

// ---------------------------------------------------------------------------

NetVars bind_parameters(ad::Tape& tape, const ParameterSet& params, bool differentiable, const std::string& prefix) {
  NetVars vars;
  for (const auto& [i, lp] : params.layers()) {
    const std::string base = prefix + std::to_string(i);
    LayerVars lv;
    lv.weight = differentiable ? tape.parameter(base + ".w", lp.weight) : tape.constant(lp.weight);
    if (lp.bias) lv.bias = differentiable ? tape.parameter(base + ".b", *lp.bias) : tape.constant(*lp.bias);
    vars.emplace(i, lv);
  }
  return vars;
}

ad::Var apply_activation(const Activation& a, ad::Var x) {
  switch (a.kind) {
    case ActivationKind::sigmoid: return ad::sigmoid(x);
    case ActivationKind::tanh: return ad::tanh(x);
    case ActivationKind::relu: return ad::relu(x);
    case ActivationKind::leaky_relu: return ad::leaky_relu(x, a.alpha);
    case ActivationKind::identity: return x;
    case ActivationKind::softmax: return ad::exp(ad::log_softmax(x));
  }
  throw InvalidArgument("unknown activation kind");
}

ad::Var forward(const NetworkSpec& spec, const NetVars& vars, ad::Var x, const ForwardHooks& hooks) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("forward: input needs a leading batch dimension");
  const std::size_t batch = xs[0];
  Shape expected{batch};
  expected.insert(expected.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (xs != expected) {
    if (shape_size(xs) != shape_size(expected))
      throw ShapeError("forward: input " + shape_str(xs) + " does not conform to per-example shape " +
                       shape_str(spec.input_shape));
    x = ad::reshape(x, expected);
  }
  ad::Var h = x;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::dense: {
        const LayerVars& lv = vars.at(i);
        if (hooks.dense) {
          h = hooks.dense(i, h, lv);
        } else {
          h = ad::matmul(h, lv.weight);
          if (lv.bias) h = h + *lv.bias;
        }
        break;
      }
      case LayerKind::conv2d: {
        const LayerVars& lv = vars.at(i);
        h = ad::conv2d(h, lv.weight, l.stride, l.padding);
        if (lv.bias) h = h + *lv.bias;
        break;
      }
      case LayerKind::flatten:
        h = ad::reshape(h, Shape{batch, shape_size(h.shape()) / batch});
        break;
      case LayerKind::activation:
        if (l.activation.kind == ActivationKind::softmax && hooks.logits) break;
        h = apply_activation(l.activation, h);
        break;
      case LayerKind::dropout:
        break;
    }
  }
  return h;
}

Tensor softmax(const Tensor& logits) {
  if (!logits.all_finite()) throw NumericalError("softmax: non-finite logits");
  const Tensor z = logits.rank() == 1 ? logits.reshaped({1, logits.size()}) : logits;
  if (z.rank() != 2) throw ShapeError("softmax expects rank 1 or 2, got " + shape_str(logits.shape()));
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    double m = z.at(i, 0);
    for (std::size_t j = 1; j < z.dim(1); ++j) m = std::max(m, z.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < z.dim(1); ++j) s += (out.at(i, j) = std::exp(z.at(i, j) - m));
    for (std::size_t j = 0; j < z.dim(1); ++j) out.at(i, j) /= s;
  }
  return out.reshaped(logits.shape());
}

Tensor activation(const Activation& a, const Tensor& x) {
  if (a.kind == ActivationKind::softmax) return softmax(x);
  Tensor y = x;
  for (double& v : y.values()) {
    switch (a.kind) {
      case ActivationKind::sigmoid: v = 1.0 / (1.0 + std::exp(-v)); break;
      case ActivationKind::tanh: v = std::tanh(v); break;
      case ActivationKind::relu: v = v > 0.0 ? v : 0.0; break;
      case ActivationKind::leaky_relu: v = v > a.alpha * v ? v : a.alpha * v; break;
      default: break;
    }
  }
  return y;
}

Tensor mlp_forward(const NetworkSpec& spec, const ParameterSet& params, const Tensor& x) {
  spec.validate();
  params.check(spec);
  ad::Tape tape;
  const NetVars vars = bind_parameters(tape, params, false);
  return forward(spec, vars, tape.input("x", x)).value();
}

Tensor conv_forward(const NetworkSpec& spec, const ParameterSet& params, const Tensor& x) {
  const bool has_conv =
      std::any_of(spec.layers.begin(), spec.layers.end(), [](const LayerSpec& l) { return l.kind == LayerKind::conv2d; });
  if (!has_conv) throw InvalidArgument("conv_forward: network has no conv2d layer");
  return mlp_forward(spec, params, x);
}

std::vector<double> finite_diff_grad(const std::function<double(const ParameterSet&)>& f, const ParameterSet& params,
                                     double h) {
  ParameterSet scratch = params;
  const std::vector<double> x = params.flatten();
  return ad::finite_diff_grad(
      [&](std::span<const double> p) {
        scratch.assign(p);
        return f(scratch);
      },
      x, h);
}

}  // namespace bnn
