#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phreg/grad_check.hpp"
#include "phreg/tensor.hpp"

using namespace phreg;

namespace {

Tensor64 random64(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor64(std::move(shape), std::move(v));
}

// Weighted sum so every output element carries a distinct gradient.
Tensor64 probe_sum(const Tensor64& y, std::uint64_t seed) {
  return sum_all(mul(y, random64(y.shape(), seed)));
}

}  // namespace

TEST(TensorForward, MatmulFixture) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{19, 22, 43, 50}));
}

TEST(TensorForward, SoftmaxOfZeroAndLogThree) {
  Tensor x({1, 2}, {0.0f, std::log(3.0f)});
  const auto s = softmax_rows(x);
  EXPECT_NEAR(s.at(0), 0.25f, 1e-6);
  EXPECT_NEAR(s.at(1), 0.75f, 1e-6);
}

TEST(TensorForward, LayerNormOfTwoValues) {
  Tensor64 x({1, 2}, {1.0, 3.0});
  const auto y = layer_norm(x, Tensor64::full({2}, 1.0), Tensor64::zeros({2}), 0.0);
  EXPECT_NEAR(y.at(0), -1.0, 1e-12);
  EXPECT_NEAR(y.at(1), 1.0, 1e-12);
}

TEST(TensorForward, GeluMatchesErfForm) {
  Tensor64 x({3}, {-1.0, 0.0, 2.0});
  const auto y = gelu(x);
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.at(i);
    EXPECT_NEAR(y.at(i), 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))), 1e-14);
  }
}

TEST(TensorForward, ConcatAndSliceRoundTrip) {
  Tensor64 a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor64 b({1, 3}, {7, 8, 9});
  const auto c = concat<double>({a, b}, 0);
  EXPECT_EQ(c.shape(), (Shape{3, 3}));
  const auto s = slice(c, 0, 2, 1);
  EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()), (std::vector<double>{7, 8, 9}));
  const auto cols = slice(a, 1, 1, 2);
  EXPECT_EQ(std::vector<double>(cols.data().begin(), cols.data().end()), (std::vector<double>{2, 3, 5, 6}));
}

TEST(TensorForward, ShapeErrors) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4}), ShapeError);
}

TEST(TensorForward, CosineRowsGuardsZeroRows) {
  Tensor64 a({2, 2}, {0, 0, 1, 0});
  Tensor64 b({2, 2}, {1, 0, 1, 0});
  const auto c = cosine_rows(a, b);
  EXPECT_EQ(c.at(0), 0.0);
  EXPECT_NEAR(c.at(1), 1.0, 1e-15);
}

TEST(Autodiff, BackwardRejectsNonScalar) {
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0f)), ShapeError);
}

TEST(Autodiff, FrozenLeafReceivesNoGradient) {
  Tensor w({2, 2}, {1, 2, 3, 4}, true);
  Tensor frozen({2, 2}, {1, 0, 0, 1});
  backward(sum_all(matmul(w, frozen)));
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  Tensor64 x({1}, {3.0}, true);
  const auto y = mul(x, x);
  backward(sum_all(add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, TapeOrderIsTopological) {
  Tensor64 x({2}, {1.0, 2.0}, true);
  const auto y = sum_all(gelu(scale(x, 2.0)));
  const auto tape = ComputationTape<double>::record(y);
  ASSERT_EQ(tape.nodes().size(), 4u);
  EXPECT_EQ(tape.nodes().front(), x.node().get());
  EXPECT_EQ(tape.nodes().back(), y.node().get());
}

TEST(Autodiff, DeepChainDoesNotOverflowStack) {
  Tensor64 x({1}, {1.0}, true);
  Tensor64 y = x;
  for (int i = 0; i < 20000; ++i) y = add_scalar(y, 1e-6);
  backward(sum_all(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

// Each op's gradient against a double-precision central-difference oracle.
struct OpCase {
  const char* name;
  Shape shape;
  std::function<Tensor64(const Tensor64&)> f;
};

void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto& c = GetParam();
  const Tensor64 x = random64(c.shape, 11);
  const double err = grad_check([&](const Tensor64& t) { return probe_sum(c.f(t), 99); }, x, 1e-5);
  EXPECT_LT(err, 1e-6) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"add", {2, 3}, [](const Tensor64& x) { return add(x, random64({2, 3}, 1)); }},
        OpCase{"sub", {2, 3}, [](const Tensor64& x) { return sub(random64({2, 3}, 1), x); }},
        OpCase{"mul", {2, 3}, [](const Tensor64& x) { return mul(x, x); }},
        OpCase{"div", {2, 3}, [](const Tensor64& x) { return div(random64({2, 3}, 2), add_scalar(mul(x, x), 1.0)); }},
        OpCase{"gelu", {2, 3}, [](const Tensor64& x) { return gelu(x); }},
        OpCase{"add_bias", {3, 4}, [](const Tensor64& x) { return add_bias(random64({3, 4}, 3), slice(reshape(x, {12}), 0, 0, 4)); }},
        OpCase{"matmul_left", {3, 4}, [](const Tensor64& x) { return matmul(x, random64({4, 2}, 4)); }},
        OpCase{"matmul_right", {4, 2}, [](const Tensor64& x) { return matmul(random64({3, 4}, 4), x); }},
        OpCase{"transpose", {2, 5}, [](const Tensor64& x) { return transpose(x); }},
        OpCase{"concat_cols", {2, 3}, [](const Tensor64& x) { return concat<double>({x, scale(x, 2.0)}, 1); }},
        OpCase{"slice_rows", {4, 3}, [](const Tensor64& x) { return slice(x, 0, 1, 2); }},
        OpCase{"softmax", {3, 5}, [](const Tensor64& x) { return softmax_rows(x); }},
        OpCase{"layer_norm", {3, 6}, [](const Tensor64& x) {
          return layer_norm(x, random64({6}, 5), random64({6}, 6));
        }},
        OpCase{"l2_norm", {3, 4}, [](const Tensor64& x) { return l2_norm_last(x); }},
        OpCase{"cosine", {3, 4}, [](const Tensor64& x) { return cosine_rows(x, random64({3, 4}, 7)); }},
        OpCase{"mean_all", {3, 4}, [](const Tensor64& x) { return reshape(mean_all(x), {1}); }},
        OpCase{"mean_axis0", {3, 4}, [](const Tensor64& x) { return mean_axis(x, 0); }},
        OpCase{"mean_axis1", {3, 4}, [](const Tensor64& x) { return mean_axis(x, 1); }}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Autodiff, LayerNormGammaBetaGradients) {
  const Tensor64 x = random64({4, 5}, 21);
  const Tensor64 beta = random64({5}, 22);
  const double err = grad_check(
      [&](const Tensor64& g) { return probe_sum(layer_norm(x, g, beta), 23); }, random64({5}, 24), 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, DirectionalProbeDetectsWrongGradient) {
  ScalarFn f = [](std::span<const double> v) { return v[0] * v[0] + 3.0 * v[1]; };
  const std::vector<double> x{1.0, 2.0};
  const std::vector<double> good{2.0, 3.0}, bad{2.0, 4.0};
  const std::vector<std::vector<double>> dirs{{1.0, 0.0}, {0.0, 1.0}, {0.6, 0.8}};
  EXPECT_LT(directional_check(f, x, good, dirs, 1e-4), 1e-8);
  EXPECT_GT(directional_check(f, x, bad, dirs, 1e-4), 0.1);
}
