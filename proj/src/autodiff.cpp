#include "bnn/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "bnn/error.hpp"

namespace bnn::ad {

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` laid out against the broadcast shape `out` (0 on broadcast
// axes).
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t axis_s = s.size() - 1 - k;
    const std::size_t axis_o = rank - 1 - k;
    strides[axis_o] = s[axis_s] == 1 ? 0 : stride;
    stride *= s[axis_s];
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) for every element of the broadcast.
template <typename Fn>
void for_each_broadcast(const Shape& a, const Shape& b, const Shape& out, Fn&& fn) {
  const std::size_t n = shape_size(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  if (a == out && shape_size(b) == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, std::size_t{0});
    return;
  }
  if (b == out && shape_size(a) == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0}, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  // Merge adjacent axes whose strides are contiguous for both operands, then
  // run the innermost axis as a plain loop.
  std::vector<std::size_t> dim, ta, tb;
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (out[k] == 1) continue;
    if (!dim.empty() && ta.back() == sa[k] * out[k] && tb.back() == sb[k] * out[k]) {
      dim.back() *= out[k];
      ta.back() = sa[k];
      tb.back() = sb[k];
      continue;
    }
    dim.push_back(out[k]);
    ta.push_back(sa[k]);
    tb.push_back(sb[k]);
  }
  if (dim.empty()) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t rank = dim.size();
  const std::size_t inner = dim.back(), ia_step = ta.back(), ib_step = tb.back();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(i + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t k = rank - 1; k-- > 0;) {
      ++counter[k];
      ia += ta[k];
      ib += tb[k];
      if (counter[k] < dim[k]) break;
      ia -= ta[k] * dim[k];
      ib -= tb[k] * dim[k];
      counter[k] = 0;
    }
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

auto idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// C(n,m) += A(n,k) * B(k,m)
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  Map(c, idx(n), idx(m)).noalias() += MapC(a, idx(n), idx(k)) * MapC(b, idx(k), idx(m));
}

// C(n,k) += A(n,m) * B(k,m)^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m, std::size_t k) {
  Map(c, idx(n), idx(k)).noalias() += MapC(a, idx(n), idx(m)) * MapC(b, idx(k), idx(m)).transpose();
}

// C(k,m) += A(n,k)^T * B(n,m)
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  Map(c, idx(k), idx(m)).noalias() += MapC(a, idx(n), idx(k)).transpose() * MapC(b, idx(n), idx(m));
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t padding) {
  if (x.size() != 4 || w.size() != 4)
    throw ShapeError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw], got " + shape_str(x) + " and " +
                     shape_str(w));
  if (x[1] != w[1])
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + ", kernel " + shape_str(w));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, padding, 0, 0};
  if (g.kh > g.height + 2 * padding || g.kw > g.width + 2 * padding)
    throw ShapeError("conv2d kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;
  return g;
}

// col has shape (C*kh*kw, out_h*out_w) for one image.
void im2col(const ConvGeometry& g, const double* img, double* col) {
  const std::size_t plane = g.out_h * g.out_w;
  const bool plain = g.stride == 1 && g.padding == 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t u = 0; u < g.kh; ++u)
      for (std::size_t v = 0; v < g.kw; ++v) {
        double* dst = col + ((c * g.kh + u) * g.kw + v) * plane;
        if (plain) {
          for (std::size_t i = 0; i < g.out_h; ++i)
            std::copy_n(img + (c * g.height + i + u) * g.width + v, g.out_w, dst + i * g.out_w);
          continue;
        }
        for (std::size_t i = 0; i < g.out_h; ++i) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t j = 0; j < g.out_w; ++j) {
            const std::ptrdiff_t s =
                static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = r >= 0 && s >= 0 && r < static_cast<std::ptrdiff_t>(g.height) &&
                                s < static_cast<std::ptrdiff_t>(g.width);
            dst[i * g.out_w + j] =
                inside ? img[(c * g.height + static_cast<std::size_t>(r)) * g.width + static_cast<std::size_t>(s)] : 0.0;
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const double* col, double* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t u = 0; u < g.kh; ++u)
      for (std::size_t v = 0; v < g.kw; ++v) {
        const double* src = col + ((c * g.kh + u) * g.kw + v) * plane;
        for (std::size_t i = 0; i < g.out_h; ++i) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.padding);
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t j = 0; j < g.out_w; ++j) {
            const std::ptrdiff_t s =
                static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.padding);
            if (s < 0 || s >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(r)) * g.width + static_cast<std::size_t>(s)] +=
                src[i * g.out_w + j];
          }
        }
      }
}

std::size_t normalise_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// (outer, axis length, inner) decomposition of a shape around an axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::parameter: return "parameter";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::maximum: return "maximum";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::reciprocal: return "reciprocal";
    case Op::sum: return "sum";
    case Op::conv2d: return "conv2d";
    case Op::slice: return "slice";
    case Op::reshape: return "reshape";
  }
  return "?";
}

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Op op, std::string name, Tensor value, bool needs_grad) {
  nodes_.push_back(Node{op, {}, {}, std::move(value), std::move(name), needs_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::input(std::string name, Tensor value) { return leaf(Op::input, std::move(name), std::move(value), false); }

Var Tape::parameter(std::string name, Tensor value) {
  return leaf(Op::parameter, std::move(name), std::move(value), true);
}

Var Tape::constant(Tensor value) { return leaf(Op::constant, {}, std::move(value), false); }

Var Tape::record(Op op, std::vector<std::size_t> inputs, OpAttrs attrs) {
  bool needs = false;
  for (auto i : inputs) {
    if (i >= nodes_.size()) throw InvalidArgument("node input refers to a later node");
    needs = needs || nodes_[i].needs_grad;
  }
  nodes_.push_back(Node{op, std::move(inputs), std::move(attrs), Tensor{}, {}, needs});
  const std::size_t id = nodes_.size() - 1;
  try {
    nodes_[id].value = compute(id);
  } catch (...) {
    nodes_.pop_back();
    throw;
  }
  return Var(this, id);
}

void Tape::mark_output(std::string name, Var v) { outputs_[std::move(name)] = v.id(); }

Tensor Tape::compute(std::size_t id) const {
  const Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
  try {
    switch (n.op) {
      case Op::input:
      case Op::parameter:
      case Op::constant:
        return n.value;
      case Op::add:
      case Op::mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Shape out = broadcast_shape(a.shape(), b.shape());
        Tensor r(out);
        auto* rd = r.data().data();
        const auto* ad = a.data().data();
        const auto* bd = b.data().data();
        if (n.op == Op::add)
          for_each_broadcast(a.shape(), b.shape(), out, [&](std::size_t i, std::size_t ia, std::size_t ib) { rd[i] = ad[ia] + bd[ib]; });
        else
          for_each_broadcast(a.shape(), b.shape(), out, [&](std::size_t i, std::size_t ia, std::size_t ib) { rd[i] = ad[ia] * bd[ib]; });
        return r;
      }
      case Op::maximum: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Shape out = broadcast_shape(a.shape(), b.shape());
        Tensor r(out);
        auto* rd = r.data().data();
        const auto* ad = a.data().data();
        const auto* bd = b.data().data();
        for_each_broadcast(a.shape(), b.shape(), out,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { rd[i] = ad[ia] > bd[ib] ? ad[ia] : bd[ib]; });
        return r;
      }
      case Op::matmul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
          throw ShapeError("matmul of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
        Tensor r(Shape{a.dim(0), b.dim(1)});
        gemm_nn(a.data().data(), b.data().data(), r.data().data(), a.dim(0), a.dim(1), b.dim(1));
        return r;
      }
      case Op::exp:
      case Op::log:
      case Op::tanh:
      case Op::reciprocal: {
        Tensor r = in(0);
        for (double& v : r.values()) {
          switch (n.op) {
            case Op::exp: v = std::exp(v); break;
            case Op::log: v = std::log(v); break;
            case Op::tanh: v = std::tanh(v); break;
            default: v = 1.0 / v; break;
          }
        }
        return r;
      }
      case Op::sum: {
        const Tensor& a = in(0);
        if (n.attrs.reduce_all) {
          double s = 0.0;
          for (double v : a.values()) s += v;
          return Tensor::scalar(s);
        }
        const std::size_t axis = normalise_axis(n.attrs.axis, a.rank());
        const AxisSplit sp = split_axis(a.shape(), axis);
        Shape out = a.shape();
        out[axis] = 1;
        Tensor r(out);
        const auto* ad = a.data().data();
        auto* rd = r.data().data();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) rd[o * sp.inner + i] += ad[(o * sp.len + l) * sp.inner + i];
        return r;
      }
      case Op::conv2d: {
        const Tensor& x = in(0);
        const Tensor& w = in(1);
        const ConvGeometry g = conv_geometry(x.shape(), w.shape(), n.attrs.stride, n.attrs.padding);
        const std::size_t ckk = g.channels * g.kh * g.kw;
        const std::size_t plane = g.out_h * g.out_w;
        Tensor r(Shape{g.batch, g.filters, g.out_h, g.out_w});
        std::vector<double> col(ckk * plane);
        for (std::size_t b = 0; b < g.batch; ++b) {
          im2col(g, x.data().data() + b * g.channels * g.height * g.width, col.data());
          gemm_nn(w.data().data(), col.data(), r.data().data() + b * g.filters * plane, g.filters, ckk, plane);
        }
        return r;
      }
      case Op::slice: {
        const Tensor& a = in(0);
        const std::size_t axis = normalise_axis(n.attrs.axis, a.rank());
        if (n.attrs.begin >= n.attrs.end || n.attrs.end > a.dim(axis))
          throw ShapeError("slice [" + std::to_string(n.attrs.begin) + "," + std::to_string(n.attrs.end) +
                           ") out of range for " + shape_str(a.shape()));
        const AxisSplit sp = split_axis(a.shape(), axis);
        Shape out = a.shape();
        out[axis] = n.attrs.end - n.attrs.begin;
        Tensor r(out);
        const std::size_t len = out[axis];
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i)
              r[(o * len + l) * sp.inner + i] = a[(o * sp.len + n.attrs.begin + l) * sp.inner + i];
        return r;
      }
      case Op::reshape:
        return in(0).reshaped(n.attrs.shape);
    }
  } catch (const ShapeError& e) {
    throw ShapeError("node #" + std::to_string(id) + " (" + op_name(n.op) + "): " + e.what());
  }
  throw InvalidArgument("unknown op");
}

std::map<std::string, Tensor> Tape::forward_eval(const std::map<std::string, Tensor>& bindings) {
  for (const auto& [name, value] : bindings) {
    (void)value;
    const bool known = std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) {
      return (n.op == Op::input || n.op == Op::parameter) && n.name == name;
    });
    if (!known) throw InvalidArgument("forward_eval: no leaf named '" + name + "'");
  }
  for (auto& n : nodes_) {
    if (n.op != Op::input && n.op != Op::parameter) continue;
    auto it = bindings.find(n.name);
    if (it == bindings.end()) {
      if (n.op == Op::input) throw InvalidArgument("forward_eval: input '" + n.name + "' is not bound");
      continue;
    }
    n.value = it->second;
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].inputs.empty()) continue;
    nodes_[id].value = compute(id);
  }
  grads_.clear();
  has_grad_.clear();
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs_) out.emplace(name, nodes_[id].value);
  return out;
}

void Tape::propagate(std::size_t id, std::vector<Tensor>& grads, std::vector<bool>& has) const {
  const Node& n = nodes_[id];
  const Tensor& g = grads[id];
  auto accum = [&](std::size_t k) -> Tensor& {
    const std::size_t src = n.inputs[k];
    if (!has[src]) {
      grads[src] = Tensor(nodes_[src].value.shape(), 0.0);
      has[src] = true;
    }
    return grads[src];
  };
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
  const auto* gd = g.data().data();

  switch (n.op) {
    case Op::input:
    case Op::parameter:
    case Op::constant:
      return;
    case Op::add: {
      const Shape& sa = nodes_[n.inputs[0]].value.shape();
      const Shape& sb = nodes_[n.inputs[1]].value.shape();
      if (wants(0)) {
        auto* d = accum(0).data().data();
        for_each_broadcast(sa, sb, g.shape(), [&](std::size_t i, std::size_t ia, std::size_t) { d[ia] += gd[i]; });
      }
      if (wants(1)) {
        auto* d = accum(1).data().data();
        for_each_broadcast(sa, sb, g.shape(), [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] += gd[i]; });
      }
      return;
    }
    case Op::mul: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      const auto* ad = a.data().data();
      const auto* bd = b.data().data();
      if (wants(0)) {
        auto* d = accum(0).data().data();
        for_each_broadcast(a.shape(), b.shape(), g.shape(),
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ia] += gd[i] * bd[ib]; });
      }
      if (wants(1)) {
        auto* d = accum(1).data().data();
        for_each_broadcast(a.shape(), b.shape(), g.shape(),
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ib] += gd[i] * ad[ia]; });
      }
      return;
    }
    case Op::maximum: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      const auto* ad = a.data().data();
      const auto* bd = b.data().data();
      if (wants(0)) {
        auto* d = accum(0).data().data();
        for_each_broadcast(a.shape(), b.shape(), g.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (ad[ia] > bd[ib]) d[ia] += gd[i];
        });
      }
      if (wants(1)) {
        auto* d = accum(1).data().data();
        for_each_broadcast(a.shape(), b.shape(), g.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (!(ad[ia] > bd[ib])) d[ib] += gd[i];
        });
      }
      return;
    }
    case Op::matmul: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      const std::size_t rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
      if (wants(0)) gemm_nt(gd, b.data().data(), accum(0).data().data(), rows, cols, inner);
      if (wants(1)) gemm_tn(a.data().data(), gd, accum(1).data().data(), rows, inner, cols);
      return;
    }
    case Op::exp:
    case Op::log:
    case Op::tanh:
    case Op::reciprocal: {
      if (!wants(0)) return;
      const auto* x = nodes_[n.inputs[0]].value.data().data();
      const auto* y = n.value.data().data();
      auto* d = accum(0).data().data();
      const std::size_t size = n.value.size();
      switch (n.op) {
        case Op::exp:
          for (std::size_t i = 0; i < size; ++i) d[i] += gd[i] * y[i];
          break;
        case Op::log:
          for (std::size_t i = 0; i < size; ++i) d[i] += gd[i] / x[i];
          break;
        case Op::tanh:
          for (std::size_t i = 0; i < size; ++i) d[i] += gd[i] * (1.0 - y[i] * y[i]);
          break;
        default:
          for (std::size_t i = 0; i < size; ++i) d[i] -= gd[i] * y[i] * y[i];
          break;
      }
      return;
    }
    case Op::sum: {
      if (!wants(0)) return;
      const Tensor& a = nodes_[n.inputs[0]].value;
      auto* d = accum(0).data().data();
      if (n.attrs.reduce_all) {
        for (std::size_t i = 0; i < a.size(); ++i) d[i] += gd[0];
        return;
      }
      const std::size_t axis = normalise_axis(n.attrs.axis, a.rank());
      const AxisSplit sp = split_axis(a.shape(), axis);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
          for (std::size_t i = 0; i < sp.inner; ++i) d[(o * sp.len + l) * sp.inner + i] += gd[o * sp.inner + i];
      return;
    }
    case Op::conv2d: {
      const Tensor& x = nodes_[n.inputs[0]].value;
      const Tensor& w = nodes_[n.inputs[1]].value;
      const ConvGeometry geo = conv_geometry(x.shape(), w.shape(), n.attrs.stride, n.attrs.padding);
      const std::size_t ckk = geo.channels * geo.kh * geo.kw;
      const std::size_t plane = geo.out_h * geo.out_w;
      const std::size_t img = geo.channels * geo.height * geo.width;
      std::vector<double> col(ckk * plane);
      double* dw = wants(1) ? accum(1).data().data() : nullptr;
      double* dx = wants(0) ? accum(0).data().data() : nullptr;
      for (std::size_t b = 0; b < geo.batch; ++b) {
        const double* gout = gd + b * geo.filters * plane;
        if (dw) {
          im2col(geo, x.data().data() + b * img, col.data());
          gemm_nt(gout, col.data(), dw, geo.filters, plane, ckk);
        }
        if (dx) {
          std::fill(col.begin(), col.end(), 0.0);
          gemm_tn(w.data().data(), gout, col.data(), geo.filters, ckk, plane);
          col2im_add(geo, col.data(), dx + b * img);
        }
      }
      return;
    }
    case Op::slice: {
      if (!wants(0)) return;
      const Tensor& a = nodes_[n.inputs[0]].value;
      const std::size_t axis = normalise_axis(n.attrs.axis, a.rank());
      const AxisSplit sp = split_axis(a.shape(), axis);
      const std::size_t len = n.attrs.end - n.attrs.begin;
      auto* d = accum(0).data().data();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < sp.inner; ++i)
            d[(o * sp.len + n.attrs.begin + l) * sp.inner + i] += gd[(o * len + l) * sp.inner + i];
      return;
    }
    case Op::reshape: {
      if (!wants(0)) return;
      auto* d = accum(0).data().data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += gd[i];
      return;
    }
  }
}

void Tape::backward(Var output) {
  if (output.tape_ != this) throw InvalidArgument("backward: variable belongs to another tape");
  const Tensor& out = nodes_[output.id()].value;
  if (out.size() != 1)
    throw ShapeError("backward needs a scalar output, got shape " + shape_str(out.shape()));
  grads_.assign(nodes_.size(), Tensor{});
  has_grad_.assign(nodes_.size(), false);
  grads_[output.id()] = Tensor(out.shape(), 1.0);
  has_grad_[output.id()] = true;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    if (!has_grad_[id] || !nodes_[id].needs_grad) continue;
    propagate(id, grads_, has_grad_);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.id() < has_grad_.size() && has_grad_[v.id()]) return grads_[v.id()];
  return Tensor(nodes_.at(v.id()).value.shape(), 0.0);
}

std::map<std::string, Tensor> Tape::gradients(Var output) {
  backward(output);
  std::map<std::string, Tensor> out;
  for (std::size_t id = 0; id < nodes_.size(); ++id)
    if (nodes_[id].op == Op::parameter) out[nodes_[id].name] = grad(Var(this, id));
  return out;
}

// ---------------------------------------------------------------------------
// Primitive builders.

namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw InvalidArgument("variables live on different tapes");
  return a.tape();
}

}  // namespace

Var add(Var a, Var b) { return same_tape(a, b).record(Op::add, {a.id(), b.id()}); }
Var mul(Var a, Var b) { return same_tape(a, b).record(Op::mul, {a.id(), b.id()}); }
Var matmul(Var a, Var b) { return same_tape(a, b).record(Op::matmul, {a.id(), b.id()}); }
Var maximum(Var a, Var b) { return same_tape(a, b).record(Op::maximum, {a.id(), b.id()}); }
Var exp(Var a) { return a.tape().record(Op::exp, {a.id()}); }
Var log(Var a) { return a.tape().record(Op::log, {a.id()}); }
Var tanh(Var a) { return a.tape().record(Op::tanh, {a.id()}); }
Var reciprocal(Var a) { return a.tape().record(Op::reciprocal, {a.id()}); }

Var sum(Var a) {
  OpAttrs attrs;
  attrs.reduce_all = true;
  return a.tape().record(Op::sum, {a.id()}, attrs);
}

Var sum(Var a, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return a.tape().record(Op::sum, {a.id()}, attrs);
}

Var conv2d(Var x, Var w, std::size_t stride, std::size_t padding) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  return same_tape(x, w).record(Op::conv2d, {x.id(), w.id()}, attrs);
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return a.tape().record(Op::slice, {a.id()}, attrs);
}

Var reshape(Var a, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return a.tape().record(Op::reshape, {a.id()}, attrs);
}

// ---------------------------------------------------------------------------
// Composites.

Var operator+(Var a, Var b) { return add(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator-(Var a) { return scale(a, -1.0); }
Var operator-(Var a, Var b) { return add(a, -b); }
Var operator/(Var a, Var b) { return mul(a, reciprocal(b)); }
Var scale(Var a, double c) { return mul(a, a.tape().constant(c)); }
Var add_scalar(Var a, double c) { return add(a, a.tape().constant(c)); }
Var square(Var a) { return mul(a, a); }
Var sqrt(Var a) { return exp(scale(log(a), 0.5)); }
Var abs(Var a) { return maximum(a, -a); }
Var sigmoid(Var a) { return reciprocal(add_scalar(exp(-a), 1.0)); }
Var relu(Var a) { return maximum(a, a.tape().constant(0.0)); }
Var leaky_relu(Var a, double alpha) { return maximum(a, scale(a, alpha)); }

// max(x, 0) + log(1 + exp(-|x|))
Var softplus(Var a) { return relu(a) + log(add_scalar(exp(-abs(a)), 1.0)); }

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var log_softmax(Var logits) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw ShapeError("log_softmax expects a rank-2 tensor, got " + shape_str(z.shape()));
  Tensor row_max(Shape{z.dim(0), 1});
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    double m = z.at(i, 0);
    for (std::size_t j = 1; j < z.dim(1); ++j) m = std::max(m, z.at(i, j));
    row_max[i] = m;
  }
  Var shifted = logits - logits.tape().constant(std::move(row_max));
  return shifted - log(sum(exp(shifted), 1));
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite_diff_grad: step must be positive");
  std::vector<double> point(x.begin(), x.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double step = h * (1.0 + std::abs(x[i]));
    point[i] = x[i] + step;
    const double up = f(point);
    point[i] = x[i] - step;
    const double down = f(point);
    point[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("finite_diff_grad: non-finite function value at coordinate " + std::to_string(i));
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

}  // namespace bnn::ad
