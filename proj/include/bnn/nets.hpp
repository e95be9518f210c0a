#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bnn/autodiff.hpp"
#include "bnn/random.hpp"
#include "bnn/tensor.hpp"

namespace bnn {

enum class ActivationKind { sigmoid, tanh, relu, leaky_relu, identity, softmax };

struct Activation {
  ActivationKind kind = ActivationKind::identity;
  double alpha = 0.01;  // leaky_relu slope

  friend bool operator==(const Activation&, const Activation&) = default;
};

Activation parse_activation(std::string_view text);
std::string to_string(const Activation& a);

enum class LayerKind { dense, conv2d, activation, flatten, dropout };

// Dense weights are stored [fan_in, fan_out]; conv kernels
// [out_channels, in_channels, kernel_h, kernel_w]. Biases are off unless
// requested.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0;   // fan-in or input channels
  std::size_t out = 0;  // fan-out or output channels
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Activation activation;
  double dropout_rate = 0.0;
  bool bias = false;

  static LayerSpec dense(std::size_t in, std::size_t out, bool bias = false);
  static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_h,
                          std::size_t kernel_w, std::size_t stride = 1, std::size_t padding = 0, bool bias = false);
  static LayerSpec act(Activation a);
  static LayerSpec act(ActivationKind k) { return act(Activation{k}); }
  static LayerSpec flatten();
  static LayerSpec dropout(double p);

  bool has_parameters() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
  Shape weight_shape() const;
  Shape bias_shape() const;
};

enum class Task { regression, classification };

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Shape input_shape;  // per example, e.g. {D} or {C, H, W}
  Task task = Task::regression;

  // Throws ShapeError / InvalidArgument when layers do not chain or the
  // output head does not match the task.
  void validate() const;
  // Per-example shape after each layer.
  std::vector<Shape> layer_shapes() const;
  Shape output_shape() const;
  std::size_t output_dim() const { return shape_size(output_shape()); }
  std::size_t parameter_count() const;
  std::vector<std::size_t> parametric_layers() const;

  // Dense stack: in -> hidden... -> out, `hidden_act` after every hidden
  // layer, identity (regression) or softmax (classification) head.
  static NetworkSpec mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                         Activation hidden_act, Task task, bool bias = false);
  // conv 8@5x5 -> relu -> conv 16@5x5 -> relu -> flatten -> dense 64 -> relu
  // -> dense 10 -> softmax on 1x28x28 inputs.
  static NetworkSpec lenet_small(bool bias = true);
};

struct LayerParams {
  Tensor weight;
  std::optional<Tensor> bias;
};

// One concrete weight assignment for a NetworkSpec. Flattened order is
// ascending layer index, weight before bias.
class ParameterSet {
 public:
  ParameterSet() = default;

  static ParameterSet zeros(const NetworkSpec& spec);
  static ParameterSet filled(const NetworkSpec& spec, double value);
  static ParameterSet normal(const NetworkSpec& spec, Rng& rng, double mean, double stddev);
  // He/Glorot-style scaling: N(0, gain^2 / fan_in) per layer, zero biases.
  static ParameterSet scaled_normal(const NetworkSpec& spec, Rng& rng, double gain = 1.0);

  std::map<std::size_t, LayerParams>& layers() { return layers_; }
  const std::map<std::size_t, LayerParams>& layers() const { return layers_; }
  LayerParams& at(std::size_t layer) { return layers_.at(layer); }
  const LayerParams& at(std::size_t layer) const { return layers_.at(layer); }

  std::size_t count() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  ParameterSet with_values(std::span<const double> flat) const;

  // Throws ShapeError when shapes disagree with the spec.
  void check(const NetworkSpec& spec) const;

 private:
  std::map<std::size_t, LayerParams> layers_;
};

// Tape handles for one layer's parameters.
struct LayerVars {
  ad::Var weight;
  std::optional<ad::Var> bias;
};
using NetVars = std::map<std::size_t, LayerVars>;

// Places parameters on a tape, as differentiable leaves named
// "<prefix><layer>.w" / ".b" or as constants.
NetVars bind_parameters(ad::Tape& tape, const ParameterSet& params, bool differentiable,
                        const std::string& prefix = "L");

struct ForwardHooks {
  // Replaces the pre-activation computation input*W (+b) of dense layers.
  std::function<ad::Var(std::size_t layer, ad::Var input, const LayerVars& vars)> dense;
  // Return pre-softmax logits for classification heads.
  bool logits = false;
};

ad::Var apply_activation(const Activation& a, ad::Var x);

// Forward pass of a batch X with leading batch dimension. Inputs laid out
// flat ([N, prod(input_shape)]) are reshaped to [N, input_shape...].
ad::Var forward(const NetworkSpec& spec, const NetVars& vars, ad::Var x, const ForwardHooks& hooks = {});

// Elementwise activation on plain tensors. softmax is applied per row.
Tensor activation(const Activation& a, const Tensor& x);
Tensor softmax(const Tensor& logits);

// Whole-network forward without gradients.
Tensor mlp_forward(const NetworkSpec& spec, const ParameterSet& params, const Tensor& x);
// Same as mlp_forward; requires the network to contain a conv2d layer.
Tensor conv_forward(const NetworkSpec& spec, const ParameterSet& params, const Tensor& x);

// finite_diff_grad over every coordinate of a ParameterSet.
std::vector<double> finite_diff_grad(const std::function<double(const ParameterSet&)>& f, const ParameterSet& params,
                                     double h);

}  // namespace bnn
