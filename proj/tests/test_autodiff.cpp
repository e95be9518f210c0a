#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "bnn/autodiff.hpp"
#include "bnn/error.hpp"
#include "test_util.hpp"

using namespace bnn;
using bnn::testing::max_rel_err;
using bnn::testing::random_tensor;

namespace {

// Builds f on a fresh tape with `x` as the only parameter; returns the value
// and the autodiff gradient.
std::pair<double, std::vector<double>> value_and_grad(const std::function<ad::Var(ad::Var)>& f, const Tensor& x) {
  ad::Tape tape;
  ad::Var v = tape.parameter("x", x);
  ad::Var out = f(v);
  tape.backward(out);
  return {out.value().item(), tape.grad(v).values()};
}

double value_only(const std::function<ad::Var(ad::Var)>& f, const Tensor& shape_like, std::span<const double> p) {
  ad::Tape tape;
  Tensor x(shape_like.shape(), std::vector<double>(p.begin(), p.end()));
  return f(tape.parameter("x", x)).value().item();
}

void expect_grad_matches_fd(const std::function<ad::Var(ad::Var)>& f, const Tensor& x, double tol = 1e-5) {
  const auto [val, g] = value_and_grad(f, x);
  const auto fd = ad::finite_diff_grad([&](std::span<const double> p) { return value_only(f, x, p); }, x.data(), 1e-6);
  EXPECT_LT(max_rel_err(g, fd), tol) << "value " << val;
}

}  // namespace

TEST(Tape, IdentityForward) {
  ad::Tape tape;
  ad::Var x = tape.input("x", Tensor::vector({1, 2, 3}));
  tape.mark_output("y", x);
  auto out = tape.forward_eval({{"x", Tensor::vector({1, 2, 3})}});
  EXPECT_EQ(out.at("y"), Tensor::vector({1, 2, 3}));
}

TEST(Tape, SquareValueAndDerivative) {
  auto [v, g] = value_and_grad([](ad::Var x) { return ad::sum(x * x); }, Tensor::scalar(3.0));
  EXPECT_DOUBLE_EQ(v, 9.0);
  EXPECT_DOUBLE_EQ(g[0], 6.0);
}

TEST(Tape, SigmoidDerivativeAtOrigin) {
  auto [v, g] = value_and_grad([](ad::Var x) { return ad::sum(ad::sigmoid(x)); }, Tensor::scalar(0.0));
  EXPECT_DOUBLE_EQ(v, 0.5);
  EXPECT_NEAR(g[0], 0.25, 1e-15);
}

TEST(Tape, ReluSubgradientAtZeroIsZero) {
  auto [v, g] = value_and_grad([](ad::Var x) { return ad::sum(ad::relu(x)); }, Tensor::vector({0.0, 1.0, -1.0}));
  EXPECT_EQ(v, 1.0);
  EXPECT_EQ(g, (std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(Tape, ForwardEvalRebindsInputs) {
  ad::Tape tape;
  ad::Var x = tape.input("x", Tensor::scalar(3.0));
  tape.mark_output("sq", x * x);
  EXPECT_DOUBLE_EQ(tape.forward_eval({{"x", Tensor::scalar(3.0)}}).at("sq").item(), 9.0);
  EXPECT_DOUBLE_EQ(tape.forward_eval({{"x", Tensor::scalar(-4.0)}}).at("sq").item(), 16.0);
  EXPECT_THROW(tape.forward_eval({}), InvalidArgument);
}

TEST(Tape, ShapeMismatchNamesNode) {
  ad::Tape tape;
  ad::Var a = tape.input("a", Tensor(Shape{2, 3}, 1.0));
  ad::Var b = tape.input("b", Tensor(Shape{3, 2}, 1.0));
  tape.mark_output("c", ad::matmul(a, b));
  try {
    tape.forward_eval({{"a", Tensor(Shape{2, 3}, 1.0)}, {"b", Tensor(Shape{4, 2}, 1.0)}});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("node #2"), std::string::npos);
  }
}

TEST(Tape, BackwardRequiresScalar) {
  ad::Tape tape;
  ad::Var x = tape.parameter("x", Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(x * x), ShapeError);
}

TEST(Tape, UnvisitedLeafHasZeroGradient) {
  ad::Tape tape;
  ad::Var x = tape.parameter("x", Tensor::vector({1, 2}));
  ad::Var unused = tape.parameter("u", Tensor::vector({5, 6, 7}));
  auto grads = tape.gradients(ad::sum(x));
  EXPECT_EQ(grads.at("u"), Tensor(Shape{3}, 0.0));
  EXPECT_EQ(tape.grad(unused), Tensor(Shape{3}, 0.0));
}

TEST(Tape, TwoLayerMlpMatchesDenseOracle) {
  Rng rng(7);
  const Tensor x = random_tensor({4, 3}, rng);
  const Tensor w1 = random_tensor({3, 5}, rng);
  const Tensor w2 = random_tensor({5, 2}, rng);
  ad::Tape tape;
  ad::Var out = ad::matmul(ad::tanh(ad::matmul(tape.input("x", x), tape.parameter("w1", w1))), tape.parameter("w2", w2));

  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t k = 0; k < 2; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        double pre = 0.0;
        for (std::size_t i = 0; i < 3; ++i) pre += x.at(n, i) * w1.at(i, j);
        acc += std::tanh(pre) * w2.at(j, k);
      }
      EXPECT_NEAR(out.value().at(n, k), acc, 1e-14);
    }
}

// Every primitive against central differences on inputs in [-5, 5].
TEST(TapeProperty, PrimitivesMatchFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({3, 4}, rng, -5.0, 5.0);
    const Tensor pos = random_tensor({3, 4}, rng, 0.2, 5.0);
    const Tensor other = random_tensor({3, 4}, rng, -5.0, 5.0);
    const Tensor row = random_tensor({1, 4}, rng, -5.0, 5.0);
    const Tensor mat = random_tensor({4, 2}, rng, -1.0, 1.0);
    const Tensor kernel = random_tensor({2, 1, 2, 2}, rng, -1.0, 1.0);
    // Scaled down so the exp does not dominate the relative error.
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::exp(ad::scale(v, 0.5))); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::log(v)); }, pos);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::tanh(v)); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::reciprocal(v)); }, pos);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(v * v.tape().constant(other)); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(square(v + v.tape().constant(row))); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::square(ad::matmul(v, v.tape().constant(mat)))); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::square(ad::sum(v, 1))); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::square(ad::slice(v, 1, 1, 3))); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::square(ad::reshape(v, {12}))); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::log_softmax(v)); }, x);
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::softplus(v)); }, x);
    expect_grad_matches_fd(
        [&](ad::Var v) { return ad::sum(ad::square(ad::conv2d(ad::reshape(v, {1, 1, 3, 4}), v.tape().constant(kernel)))); },
        x);
    expect_grad_matches_fd(
        [&](ad::Var v) {
          return ad::sum(ad::square(ad::conv2d(v.tape().constant(x.reshaped({1, 1, 3, 4})), ad::reshape(slice(reshape(v, {12}), 0, 0, 8), {2, 1, 2, 2}), 1, 1)));
        },
        x);
    // maximum away from ties
    Tensor shifted = other;
    for (std::size_t i = 0; i < shifted.size(); ++i)
      if (std::abs(shifted[i] - x[i]) < 1e-3) shifted[i] += 0.01;
    expect_grad_matches_fd([&](ad::Var v) { return ad::sum(ad::square(ad::maximum(v, v.tape().constant(shifted)))); }, x);
  }
}

TEST(TapeProperty, GradientIsLinear) {
  Rng rng(3);
  const Tensor x = random_tensor({6}, rng, -2.0, 2.0);
  const double a = 0.7, b = -1.3;
  auto f = [](ad::Var v) { return ad::sum(ad::tanh(v) * v); };
  auto g = [](ad::Var v) { return ad::sum(ad::exp(ad::scale(v, 0.3))); };
  const auto gf = value_and_grad(f, x).second;
  const auto gg = value_and_grad(g, x).second;
  const auto gc = value_and_grad([&](ad::Var v) { return ad::scale(f(v), a) + ad::scale(g(v), b); }, x).second;
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-12);
}

TEST(TapeProperty, RerunIsBitIdentical) {
  Rng rng(5);
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor w = random_tensor({3, 4}, rng);
  auto run = [&] {
    ad::Tape tape;
    ad::Var p = tape.parameter("w", w);
    ad::Var out = ad::sum(ad::square(ad::tanh(ad::matmul(tape.input("x", x), p))));
    auto g = tape.gradients(out);
    return std::make_pair(out.value().item(), g.at("w"));
  };
  const auto first = run();
  const auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(FiniteDiff, SquareAtThree) {
  const double x = 3.0;
  auto g = ad::finite_diff_grad([](std::span<const double> p) { return p[0] * p[0]; }, std::span<const double>(&x, 1), 1e-6);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantFunctionIsZero) {
  const std::vector<double> x{1.0, -2.0, 3.0};
  auto g = ad::finite_diff_grad([](std::span<const double>) { return 4.2; }, x, 1e-6);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, NonFiniteValueThrows) {
  const std::vector<double> x{0.0};
  EXPECT_THROW(ad::finite_diff_grad([](std::span<const double> p) { return std::log(p[0] - 1.0); }, x, 1e-6),
               NumericalError);
}
