#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records primitive operations as they are executed (values are
// computed eagerly). The recorded graph can be re-evaluated with new leaf
// bindings through forward_eval(), and differentiated with backward().
//
// Primitive set: add, mul (both numpy-broadcasting), matmul, maximum, exp,
// log, tanh, reciprocal, sum, conv2d (cross-correlation), slice, reshape.
// Everything else (sigmoid, relu, softplus, log_softmax, ...) is composed
// from these.
//
// Subgradient convention for maximum(a, b): the gradient goes to `a` only
// where a > b strictly, otherwise to `b`. relu(x) = maximum(x, 0), so the
// ReLU derivative at 0 is 0.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bnn/tensor.hpp"

namespace bnn::ad {

enum class Op : std::uint8_t {
  input,
  parameter,
  constant,
  add,
  mul,
  matmul,
  maximum,
  exp,
  log,
  tanh,
  reciprocal,
  sum,
  conv2d,
  slice,
  reshape,
};

const char* op_name(Op op);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct OpAttrs {
  int axis = -1;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool reduce_all = false;
  Shape shape;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Named data leaf; not differentiated.
  Var input(std::string name, Tensor value);
  // Named differentiable leaf.
  Var parameter(std::string name, Tensor value);
  Var constant(Tensor value);
  Var constant(double value) { return constant(Tensor::scalar(value)); }

  // Appends a primitive node and computes its value.
  Var record(Op op, std::vector<std::size_t> inputs, OpAttrs attrs = {});

  void mark_output(std::string name, Var v);

  // Rebinds named leaves and recomputes every node in recording order. Every
  // input leaf must be bound; parameters keep their current value unless
  // present in `bindings`. Returns the marked outputs.
  std::map<std::string, Tensor> forward_eval(const std::map<std::string, Tensor>& bindings);

  // Reverse sweep from a scalar output. Replaces gradients of any previous
  // sweep.
  void backward(Var output);

  // Gradient of the last backward() output with respect to `v`. Nodes that
  // the sweep never reached get a zero tensor.
  Tensor grad(Var v) const;

  // backward(output) followed by collecting the gradient of every named
  // parameter.
  std::map<std::string, Tensor> gradients(Var output);

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  Op op(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    OpAttrs attrs;
    Tensor value;
    std::string name;
    bool needs_grad = false;
  };

  Var leaf(Op op, std::string name, Tensor value, bool needs_grad);
  Tensor compute(std::size_t id) const;
  void propagate(std::size_t id, std::vector<Tensor>& grads, std::vector<bool>& has) const;

  std::deque<Node> nodes_;  // stable references while recording
  std::map<std::string, std::size_t> outputs_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
};

// Primitives.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b);
Var maximum(Var a, Var b);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var reciprocal(Var a);
Var sum(Var a);                      // all elements, rank-0 result
Var sum(Var a, int axis);            // keeps the reduced axis with length 1
Var conv2d(Var x, Var w, std::size_t stride = 1, std::size_t padding = 0);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
Var reshape(Var a, Shape shape);

// Composites.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var square(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double alpha);
Var softplus(Var a);
Var mean(Var a);
// Row-wise log-softmax of a rank-2 tensor.
Var log_softmax(Var logits);

// Central differences (f(x+h_i) - f(x-h_i)) / (2 h_i) with
// h_i = h * (1 + |x_i|). Throws NumericalError on a non-finite evaluation.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h);

}  // namespace bnn::ad
