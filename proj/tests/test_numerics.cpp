#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "d2v/grad_check.hpp"
#include "d2v/ops.hpp"
#include "d2v/rng.hpp"

using namespace d2v;

namespace {

template <class Real>
Tensor<Real> random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.normal() * scale);
  return Tensor<Real>(std::move(shape), std::move(v), requires_grad);
}

Shape random_shape(Rng& rng, std::size_t rank) {
  Shape s;
  for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.below(16));
  return s;
}

// Contracts an op output against fixed random weights so every output
// coordinate contributes a distinct gradient.
template <class Real, class Op>
double check_op(Op op, const Shape& shape, Real eps, Rng& rng) {
  auto x = random_tensor<Real>(shape, rng);
  Tensor<Real> probe_out;
  {
    NoGradScope<Real> off;
    probe_out = op(x);
  }
  // Scaled so the contracted scalar stays O(1) and float rounding of the
  // loss value does not dominate the central difference.
  auto w = random_tensor<Real>(probe_out.shape(), rng, false, 1.0 / std::sqrt(double(probe_out.numel())));
  return grad_check<Real>([&](const Tensor<Real>& t) { return sum(mul(op(t), w)); }, x, eps);
}

}  // namespace

TEST(Forward, SoftmaxOfZerosIsUniform) {
  auto y = softmax(Tensor<double>({3}, {0, 0, 0}), 0);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Forward, IdentityMatmul) {
  Rng rng(1);
  auto eye = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto a = random_tensor<double>({3, 5}, rng);
  auto y = matmul(eye, a);
  EXPECT_EQ(y.shape(), a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(y[i], a[i]);
}

TEST(Forward, ConvStackLengthMatchesLayerwiseArithmetic) {
  const std::vector<std::size_t> strides{5, 2, 2, 2, 2, 2, 2}, kernels{10, 3, 3, 3, 3, 2, 2};
  // Oracle: floor((L - k) / s) + 1 per layer, written out by hand.
  long len = 16000;
  for (std::size_t l = 0; l < 7; ++l) len = (len - static_cast<long>(kernels[l])) / static_cast<long>(strides[l]) + 1;
  ASSERT_EQ(len, 49);

  Rng rng(2);
  auto x = random_tensor<float>({16000, 1}, rng);
  std::size_t channels = 1;
  for (std::size_t l = 0; l < 7; ++l) {
    auto w = random_tensor<float>({kernels[l], channels, 2}, rng, false, 0.1);
    x = conv1d(x, w, Tensor<float>::zeros({2}), strides[l]);
    channels = 2;
  }
  EXPECT_EQ(x.dim(0), static_cast<std::size_t>(len));
}

TEST(Forward, ShapeMismatchIsConfigError) {
  auto a = Tensor<double>::zeros({2, 3});
  EXPECT_THROW(add(a, Tensor<double>::zeros({2})), ConfigError);
  EXPECT_THROW(matmul(a, a), ConfigError);
  EXPECT_NO_THROW(add(a, Tensor<double>::zeros({3})));  // trailing-axis expansion
}

TEST(Forward, NonFiniteResultNamesTheOp) {
  auto a = Tensor<double>({1}, {1e300});
  try {
    mul(a, a);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos);
  }
}

TEST(Forward, NormalizeZeroVarianceStrictFails) {
  EXPECT_THROW(normalize(Tensor<double>({1, 2}, {2, 2}), -1, 0.0), NumericError);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(3);
  auto x = random_tensor<double>({2, 3, 4}, rng, true);
  Graph<double> g;
  {
    GraphScope<double> scope(g);
    g.backward(sum(x));
  }
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquare) {
  auto x = Tensor<double>({1}, {3.0}, true);
  Graph<double> g;
  GraphScope<double> scope(g);
  g.backward(scale(sum(mul(x, x)), 0.5));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Backward, TwiceWithoutResetIsStateError) {
  auto x = Tensor<double>({1}, {3.0}, true);
  Graph<double> g;
  GraphScope<double> scope(g);
  auto loss = sum(x);
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), StateError);
  g.reset();
  EXPECT_NO_THROW(g.backward(sum(x)));
}

TEST(Backward, TapeIsReplayedInReverseOrder) {
  auto x = Tensor<double>({2}, {1.0, 2.0}, true);
  Graph<double> g;
  GraphScope<double> scope(g);
  auto y = sum(gelu(scale(x, 2.0)));
  const auto ops = g.ops();
  ASSERT_EQ(ops.size(), 3u);
  EXPECT_EQ(ops[0], "scale");
  EXPECT_EQ(ops[1], "gelu");
  EXPECT_EQ(ops[2], "sum");
  g.backward(y);
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, UnusedLeafInGraphStillGetsZeroGrad) {
  auto x = Tensor<double>({2}, {1.0, 2.0}, true);
  auto y = Tensor<double>({2}, {1.0, 2.0}, true);
  Graph<double> g;
  GraphScope<double> scope(g);
  auto loss = sum(mul(x, y.detach()));
  g.backward(loss);
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(y.has_grad());
}

TEST(GradCheck, ExactPolynomialWide) {
  Rng rng(4);
  auto x = random_tensor<double>({5, 3}, rng);
  const double err = grad_check<double>([](const Tensor<double>& t) { return sum(mul(t, t)); }, x, 1e-5);
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, LayerNormThenSumWide) {
  Rng rng(5);
  auto x = random_tensor<double>({6, 8}, rng);
  auto w = random_tensor<double>({6, 8}, rng);
  const double err = grad_check<double>(
      [&](const Tensor<double>& t) { return sum(mul(normalize(t, -1, 1e-5), w)); }, x, 1e-5);
  EXPECT_LT(err, 1e-6);
}

// Every forward op, random shapes with extents up to 16, both precisions.
template <class Real>
void check_all_ops(Real eps, double tol, std::uint64_t seed) {
  Rng rng(seed);
  for (int trial = 0; trial < 3; ++trial) {
    const auto s2 = random_shape(rng, 2);
    const auto s3 = random_shape(rng, 3);
    const int axis = static_cast<int>(rng.below(3));
    auto other2 = random_tensor<Real>(s2, rng);
    auto bias = random_tensor<Real>({s2[1]}, rng);
    const std::size_t k = 1 + rng.below(16);
    auto rhs = random_tensor<Real>({s2[1], k}, rng);

    EXPECT_LT(check_op<Real>([&](auto& t) { return matmul(t, rhs); }, s2, eps, rng), tol) << "matmul";
    EXPECT_LT(check_op<Real>([&](auto& t) { return matmul(other2, transpose(t)); }, s2, eps, rng), tol) << "matmul rhs";
    EXPECT_LT(check_op<Real>([&](auto& t) { return add(t, bias); }, s2, eps, rng), tol) << "add";
    EXPECT_LT(check_op<Real>([&](auto& t) { return sub(other2, t); }, s2, eps, rng), tol) << "sub";
    EXPECT_LT(check_op<Real>([&](auto& t) { return mul(t, other2); }, s2, eps, rng), tol) << "mul";
    EXPECT_LT(check_op<Real>([&](auto& t) { return scale(t, Real(-1.7)); }, s3, eps, rng), tol) << "scale";
    EXPECT_LT(check_op<Real>([&](auto& t) { return gelu(t); }, s3, eps, rng), tol) << "gelu";
    EXPECT_LT(check_op<Real>([&](auto& t) { return softmax(t, axis); }, s3, eps, rng), tol) << "softmax";
    EXPECT_LT(check_op<Real>([&](auto& t) { return mean(t, axis); }, s3, eps, rng), tol) << "mean";
    EXPECT_LT(check_op<Real>([&](auto& t) { return variance(t, axis); }, s3, eps, rng), tol) << "variance";
    Shape s3n = s3;
    s3n[static_cast<std::size_t>(axis)] = std::max<std::size_t>(2, s3n[static_cast<std::size_t>(axis)]);
    EXPECT_LT(check_op<Real>([&](auto& t) { return normalize(t, axis, Real(1e-5)); }, s3n, eps, rng), tol) << "normalize";
    EXPECT_LT(check_op<Real>([&](auto& t) { return reshape(t, Shape{numel(s3)}); }, s3, eps, rng), tol) << "reshape";
    EXPECT_LT(check_op<Real>([&](auto& t) { return transpose(t); }, s2, eps, rng), tol) << "transpose";
    EXPECT_LT(check_op<Real>([&](auto& t) { return concat(std::vector<Tensor<Real>>{t, other2, t}, 0); }, s2, eps, rng), tol)
        << "concat0";
    EXPECT_LT(check_op<Real>([&](auto& t) { return concat(std::vector<Tensor<Real>>{t, t}, axis); }, s3, eps, rng), tol)
        << "concat";
    const std::size_t len = s3[static_cast<std::size_t>(axis)];
    const std::size_t start = rng.below(len);
    EXPECT_LT(check_op<Real>([&](auto& t) { return slice(t, axis, start, len - start); }, s3, eps, rng), tol) << "slice";
    std::vector<std::size_t> rows{0, s2[0] - 1, 0};
    EXPECT_LT(check_op<Real>([&](auto& t) { return gather_rows(t, std::span<const std::size_t>(rows)); }, s2, eps, rng), tol)
        << "gather";
    std::vector<int> ids{0, static_cast<int>(s2[0] - 1), 0};
    EXPECT_LT(check_op<Real>([&](auto& t) { return embedding(t, std::span<const int>(ids)); }, s2, eps, rng), tol)
        << "embedding";
    auto fill = random_tensor<Real>({s2[1]}, rng);
    std::vector<std::size_t> replace{s2[0] - 1};
    EXPECT_LT(check_op<Real>([&](auto& t) { return row_replace(t, std::span<const std::size_t>(replace), fill); }, s2, eps, rng), tol)
        << "row_replace x";
    EXPECT_LT(check_op<Real>([&](auto& t) { return row_replace(other2, std::span<const std::size_t>(replace), t); }, Shape{s2[1]}, eps, rng), tol)
        << "row_replace v";
    const std::size_t kernel = 1 + rng.below(4), stride = 1 + rng.below(3);
    auto conv_w = random_tensor<Real>({kernel, 3, 4}, rng);
    auto conv_b = random_tensor<Real>({4}, rng);
    EXPECT_LT(check_op<Real>([&](auto& t) { return conv1d(t, conv_w, conv_b, stride); }, Shape{kernel + 1 + rng.below(12), 3}, eps, rng), tol)
        << "conv1d input";
    auto conv_x = random_tensor<Real>({9, 3}, rng);
    EXPECT_LT(check_op<Real>([&](auto& t) { return conv1d(conv_x, t, conv_b, stride); }, Shape{kernel, 3, 4}, eps, rng), tol)
        << "conv1d weight";
    auto target = random_tensor<Real>(s2, rng);
    EXPECT_LT(grad_check<Real>([&](const Tensor<Real>& t) { return smooth_l1_loss(t, target, Real(1)); },
                               random_tensor<Real>(s2, rng, false, 0.3), eps), tol)
        << "smooth_l1";
    EXPECT_LT(grad_check<Real>([&](const Tensor<Real>& t) { return l2_loss(t, target); }, random_tensor<Real>(s2, rng), eps), tol)
        << "l2";
  }
}

TEST(GradCheck, EveryOpWide) { check_all_ops<double>(1e-6, 1e-6, 11); }
TEST(GradCheck, EveryOpStandard) { check_all_ops<float>(1e-2f, 1e-4, 12); }

TEST(Properties, LinearityOfBackward) {
  Rng rng(6);
  auto x = random_tensor<double>({4, 5}, rng, true);
  auto w = random_tensor<double>({5, 3}, rng);
  const double a = 1.7, b = -0.4;
  auto f = [&] { return sum(gelu(matmul(x, w))); };
  auto g = [&] { return sum(softmax(x, 1)); };
  auto grad_of = [&](auto fn) {
    x.zero_grad();
    Graph<double> graph;
    GraphScope<double> scope(graph);
    graph.backward(fn());
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto gf = grad_of(f);
  const auto gg = grad_of(g);
  const auto combined = grad_of([&] { return add(scale(f(), a), scale(g(), b)); });
  for (std::size_t i = 0; i < gf.size(); ++i) EXPECT_NEAR(combined[i], a * gf[i] + b * gg[i], 1e-10);
}

TEST(Properties, DeterministicForwardAndBackward) {
  auto run = [] {
    Rng rng(7);
    auto x = random_tensor<float>({6, 8}, rng, true);
    auto w = random_tensor<float>({8, 8}, rng, true);
    Graph<float> g;
    GraphScope<float> scope(g);
    auto y = sum(gelu(normalize(matmul(x, w), -1, 1e-5f)));
    g.backward(y);
    std::vector<float> out{y.item()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Rng, NamedStreamsAreIndependentAndReproducible) {
  Rng root(42);
  auto a1 = root.split("mask"), a2 = root.split("mask"), b = root.split("init");
  EXPECT_EQ(a1(), a2());
  EXPECT_NE(root.split("mask")(), b());
  EXPECT_NE(root.split(1)(), root.split(2)());
}
