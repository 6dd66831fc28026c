#include <gtest/gtest.h>

#include <cmath>

#include "adr/gradcheck.hpp"
#include "adr/ops.hpp"
#include "adr/optim.hpp"
#include "test_util.hpp"

using namespace adr;
using adr::testing::random_away_from;
using adr::testing::random_tensor;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

constexpr double kOpTol = 1e-4;

double check(const std::function<TD(const std::vector<TD>&)>& f, std::vector<TD> inputs,
             GradCheckOptions opts = {}) {
  return grad_check(f, std::move(inputs), opts).max_rel_error;
}

}  // namespace

TEST(Conv2d, IdentityKernelReproducesInput) {
  auto x = random_tensor<float>({1, 1, 3, 3}, 1);
  TF w({1, 1, 1, 1}, 1.0f), b({1}, 0.0f);
  auto y = conv2d(x, w, b);
  EXPECT_TRUE(adr::testing::bit_equal(x, y));
}

TEST(Conv2d, OnesKernelCountsOverlap) {
  TF x({1, 1, 3, 3}, 1.0f), w({1, 1, 3, 3}, 1.0f), b({1}, 0.0f);
  auto y = conv2d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_FLOAT_EQ(y.at(0, 0, 1, 1), 9.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 0), 4.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 2, 2), 4.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 1), 6.0f);
}

TEST(Conv2d, StrideOutputSize) {
  TF x({1, 2, 7, 7}, 1.0f), w({4, 2, 3, 3}, 0.5f), b({4}, 0.0f);
  auto y = conv2d(x, w, b, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 4, 4}));
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  TF x({1, 2, 4, 4}), w({1, 3, 3, 3}), b({1});
  try {
    conv2d(x, w, b, 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dim 1"), std::string::npos);
  }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  auto x = random_tensor({2, 3, 5, 5}, 2);
  auto w = random_tensor({4, 3, 3, 3}, 3);
  auto b = random_tensor({4}, 4);
  EXPECT_LT(check([](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); }, {x, w, b}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); }, {x, w, b}), kOpTol);
  auto w1 = random_tensor({4, 3, 1, 1}, 5);
  EXPECT_LT(check([](const auto& in) { return conv2d(in[0], in[1], in[2]); }, {x, w1, b}), kOpTol);
}

TEST(MaxPool, PicksMaximum) {
  TF x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  auto y = max_pool2d(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 4.0f);
}

TEST(MaxPool, ConstantHalvesShape) {
  TF x({2, 3, 4, 6}, 0.25f);
  auto y = max_pool2d(x);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 2, 3}));
  for (float v : y.data()) EXPECT_EQ(v, 0.25f);
}

TEST(MaxPool, RejectsIndivisibleDims) {
  TF x({1, 1, 3, 4});
  EXPECT_THROW(max_pool2d(x), ShapeError);
}

TEST(MaxPool, TieRoutesGradientToFirstMaximum) {
  TD x({1, 1, 2, 2}, std::vector<double>{5, 5, 5, 5});
  x.set_requires_grad();
  backward(sum(max_pool2d(x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));

  // On a copy where the first entry is nudged to be the unique maximum, the
  // finite difference confirms the same routing.
  TD nudged({1, 1, 2, 2}, std::vector<double>{5 + 1e-9, 5, 5, 5});
  auto err = check([](const auto& in) { return max_pool2d(in[0]); }, {nudged}, {.eps = 1e-12, .abs_floor = 1e-6});
  EXPECT_LT(err, 1e-3);
}

TEST(MaxPool, GradientMatchesFiniteDifferences) {
  auto x = random_tensor({2, 2, 4, 4}, 6);
  EXPECT_LT(check([](const auto& in) { return max_pool2d(in[0]); }, {x}), kOpTol);
}

TEST(Upsample, ScaleOneIsIdentity) {
  auto x = random_tensor<float>({1, 2, 3, 5}, 7);
  EXPECT_TRUE(adr::testing::bit_equal(x, upsample_bilinear(x, 1)));
}

TEST(Upsample, ConstantStaysConstant) {
  TD x({1, 2, 3, 3}, 0.7);
  auto y = upsample_bilinear(x, 3);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 9, 9}));
  for (double v : y.data()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Upsample, MatchesScalarLoopOracle) {
  TD x({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  auto y = upsample_bilinear(x, 2);
  // Independent scalar oracle, half-pixel centers clamped at the border.
  auto src = [](int o, int in, int scale) {
    double s = (o + 0.5) / scale - 0.5;
    return std::clamp(s, 0.0, double(in - 1));
  };
  for (int oy = 0; oy < 4; ++oy) {
    for (int ox = 0; ox < 4; ++ox) {
      const double sy = src(oy, 2, 2), sx = src(ox, 2, 2);
      const int y0 = int(std::floor(sy)), x0 = int(std::floor(sx));
      const int y1 = std::min(y0 + 1, 1), x1 = std::min(x0 + 1, 1);
      const double fy = sy - y0, fx = sx - x0;
      auto v = [&](int r, int c) { return x.at(0, 0, r, c); };
      const double expect = (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x1)) +
                            fy * ((1 - fx) * v(y1, x0) + fx * v(y1, x1));
      EXPECT_NEAR(y.at(0, 0, oy, ox), expect, 1e-15) << oy << "," << ox;
    }
  }
  // Frozen values from the oracle.
  const std::vector<double> frozen{0, .25, .75, 1, .5, .75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2, 2.25, 2.75, 3};
  for (std::size_t i = 0; i < frozen.size(); ++i) EXPECT_NEAR(y[i], frozen[i], 1e-15);
}

TEST(Upsample, GradientMatchesFiniteDifferences) {
  auto x = random_tensor({2, 2, 3, 4}, 8);
  EXPECT_LT(check([](const auto& in) { return upsample_bilinear(in[0], 2); }, {x}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return interp_bilinear(in[0], 5, 2); }, {x}), kOpTol);
}

TEST(GlobalAvgPool, Means) {
  TF c({1, 2, 3, 3}, 0.3f);
  auto y = global_avg_pool(c);
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_FLOAT_EQ(y[0], 0.3f);
  TF x({1, 1, 2, 2}, std::vector<float>{1, 3, 5, 7});
  EXPECT_FLOAT_EQ(global_avg_pool(x)[0], 4.0f);
}

TEST(GlobalAvgPool, GradientIsUniform) {
  auto x = random_tensor({2, 3, 4, 5}, 9);
  EXPECT_LT(check([](const auto& in) { return global_avg_pool(in[0]); }, {x}), kOpTol);
  TD y({1, 1, 4, 5}, 0.0);
  y.set_requires_grad();
  backward(sum(global_avg_pool(y)));
  for (double g : y.grad()) EXPECT_DOUBLE_EQ(g, 1.0 / 20.0);
}

TEST(Linear, IdentityAndBias) {
  auto x = random_tensor({2, 3}, 10);
  TD eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  TD zero_bias({3}, 0.0);
  EXPECT_TRUE(adr::testing::bit_equal(linear(x, eye, zero_bias), x));
  TD w0({2, 3}, 0.0), b({2}, std::vector<double>{0.5, -2});
  auto y = linear(x, w0, b);
  EXPECT_EQ(y.shape(), (Shape{2, 2}));
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], -2);
  EXPECT_EQ(y[2], 0.5);
  EXPECT_THROW(linear(x, TD({2, 4}), b), ShapeError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  auto x = random_tensor({2, 4}, 11), w = random_tensor({3, 4}, 12), b = random_tensor({3}, 13);
  // Central differences carry no truncation error on an affine map, so a
  // wide step only reduces round-off.
  auto r = grad_check([](const auto& in) { return linear(in[0], in[1], in[2]); }, {x, w, b}, {.eps = 1e-2});
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(Activation, PointValues) {
  TF x({2}, std::vector<float>{-1, 2});
  auto r = relu(x);
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 2.0f);
  TF z({1}, 0.0f);
  EXPECT_FLOAT_EQ(sigmoid(z)[0], 0.5f);
  EXPECT_FLOAT_EQ(tanh(z)[0], 0.0f);
  EXPECT_FLOAT_EQ(gelu(z)[0], 0.0f);
}

TEST(Activation, SigmoidAndTanhRanges) {
  auto x = random_tensor({1000}, 14, -30, 30);
  auto sx = sigmoid(x), tx = tanh(x);
  for (double v : sx.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (double v : tx.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  TF big({2}, std::vector<float>{-10.f, 10.f});
  auto s = sigmoid(big);
  EXPECT_GT(s[0], 0.0f);
  EXPECT_LT(s[1], 1.0f);
}

TEST(Activation, GradientsAtRandomPoints) {
  for (auto kind : {Activation::relu, Activation::sigmoid, Activation::tanh, Activation::gelu}) {
    auto x = kind == Activation::relu ? random_away_from({100}, 15, 0.0, 1e-3, 3.0) : random_tensor({100}, 15, -3, 3);
    const double err = check([kind](const auto& in) { return activation(kind, in[0]); }, {x});
    EXPECT_LT(err, kind == Activation::relu ? 1e-6 : kOpTol) << static_cast<int>(kind);
  }
}

TEST(Elementwise, NeutralElements) {
  auto x = random_tensor<float>({2, 3, 4, 4}, 16);
  EXPECT_TRUE(adr::testing::bit_equal(add(x, TF::scalar(0.0f)), x));
  EXPECT_TRUE(adr::testing::bit_equal(mul(x, TF::scalar(1.0f)), x));
}

TEST(Elementwise, ClampMinAtTransmissionFloor) {
  TF t({2}, std::vector<float>{0.05f, 0.5f});
  auto c = clamp_min(t, 0.1f);
  EXPECT_FLOAT_EQ(c[0], 0.1f);
  EXPECT_FLOAT_EQ(c[1], 0.5f);
}

TEST(Elementwise, PowSquareRoot) {
  TD a({1}, 0.25), b({1}, 0.5);
  EXPECT_DOUBLE_EQ(pow(a, b)[0], 0.5);
  EXPECT_LT(check([](const auto& in) { return pow(in[0], in[1]); }, {a, b}), kOpTol);
}

TEST(Elementwise, CheckedModeRejectsDomainErrors) {
  CheckedModeGuard on(true);
  TD a({2}, std::vector<double>{1, 2}), z({2}, std::vector<double>{1, 0});
  EXPECT_THROW(div(a, z), NumericError);
  TD neg_base({1}, -0.5), e({1}, 0.5);
  EXPECT_THROW(pow(neg_base, e), NumericError);
  CheckedModeGuard off(false);
  EXPECT_NO_THROW(div(a, z));
}

TEST(Elementwise, BroadcastPatterns) {
  // scalar, per-channel and 1×H×W against C×H×W
  auto x = random_tensor({2, 3, 4, 5}, 17);
  auto s = random_tensor({1}, 18, 0.5, 1.5);
  auto ch = random_tensor({1, 3, 1, 1}, 19, 0.5, 1.5);
  auto plane = random_tensor({2, 1, 4, 5}, 20, 0.5, 1.5);
  for (auto* other : {&s, &ch, &plane}) {
    auto o = *other;
    EXPECT_LT(check([](const auto& in) { return add(in[0], in[1]); }, {x, o}), kOpTol);
    EXPECT_LT(check([](const auto& in) { return sub(in[1], in[0]); }, {x, o}), kOpTol);
    EXPECT_LT(check([](const auto& in) { return mul(in[0], in[1]); }, {x, o}), kOpTol);
    EXPECT_LT(check([](const auto& in) { return div(in[0], in[1]); }, {x, o}), kOpTol);
  }
  auto y = mul(x, ch);
  EXPECT_DOUBLE_EQ(y.at(1, 2, 3, 4), x.at(1, 2, 3, 4) * ch[2]);
  EXPECT_THROW(add(x, random_tensor({1, 2, 1, 1}, 21)), ShapeError);
}

TEST(Elementwise, UnaryGradients) {
  auto pos = random_tensor({30}, 22, 0.1, 2.0);
  EXPECT_LT(check([](const auto& in) { return exp(in[0]); }, {pos}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return log(in[0]); }, {pos}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return pow_scalar(in[0], 1.7); }, {pos}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return square(in[0]); }, {pos}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return rsub_scalar(1.0, in[0]); }, {pos}), kOpTol);
  auto around_floor = random_away_from({30}, 23, 0.1, 1e-3, 0.5);
  EXPECT_LT(check([](const auto& in) { return clamp_min(in[0], 0.1); }, {around_floor}), kOpTol);
  auto around_unit = random_away_from({30}, 24, 0.5, 1e-3, 1.0);
  for (double& v : around_unit.mutable_data()) {
    if (std::abs(v) < 1e-3 || std::abs(v - 1) < 1e-3) v += 0.01;
  }
  EXPECT_LT(check([](const auto& in) { return clamp01(in[0]); }, {around_unit}), kOpTol);
  auto signed_x = random_away_from({30}, 25, 0.0, 1e-3);
  EXPECT_LT(check([](const auto& in) { return abs(in[0]); }, {signed_x}), kOpTol);
}

TEST(Reduce, Values) {
  TF v({3}, std::vector<float>{1, 2, 3});
  EXPECT_FLOAT_EQ(mean(v).item(), 2.0f);
  EXPECT_FLOAT_EQ(sum(TF({4}, 0.0f)).item(), 0.0f);
  EXPECT_THROW(mean(TF(Shape{0})), ShapeError);
  TD m({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  auto rows = reduce(Reduce::sum, m, {1});
  EXPECT_EQ(rows.shape(), (Shape{2, 1}));
  EXPECT_EQ(rows[1], 15.0);
  auto cols = reduce(Reduce::mean, m, {0});
  EXPECT_EQ(cols[2], 4.5);
}

TEST(Reduce, Gradients) {
  auto x = random_tensor({3, 4}, 26);
  EXPECT_LT(check([](const auto& in) { return mean(in[0]); }, {x}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return sum(in[0]); }, {x}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return reduce(Reduce::mean, in[0], {1}); }, {x}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return reduce(Reduce::sum, in[0], {0}); }, {x}), kOpTol);
}

TEST(Concat, StageChannelLayoutHasTwentyChannels) {
  std::vector<TF> parts;
  std::size_t seed = 30;
  for (std::size_t c : {3, 3, 1, 3, 1, 3, 3, 3}) parts.push_back(random_tensor<float>({1, c, 4, 4}, seed++));
  auto y = concat_channels(parts);
  EXPECT_EQ(y.dim(1), 20u);
  std::size_t start = 0;
  for (const auto& p : parts) {
    EXPECT_TRUE(adr::testing::bit_equal(slice_channels(y, start, p.dim(1)), p));
    start += p.dim(1);
  }
}

TEST(Concat, SingleInputIsIdentity) {
  auto x = random_tensor<float>({2, 3, 4, 4}, 40);
  EXPECT_TRUE(adr::testing::bit_equal(concat_channels<float>({x}), x));
}

TEST(Concat, SpatialMismatchNamesIndex) {
  try {
    concat_channels<float>({TF({1, 1, 4, 4}), TF({1, 2, 4, 4}), TF({1, 1, 4, 5})});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("input 2"), std::string::npos);
  }
}

TEST(Concat, Gradients) {
  auto a = random_tensor({2, 1, 3, 3}, 41), b = random_tensor({2, 2, 3, 3}, 42);
  EXPECT_LT(check([](const auto& in) { return concat_channels(std::vector<TD>{in[0], in[1]}); }, {a, b}), kOpTol);
}

TEST(Matmul, IdentityAndScalars) {
  auto a = random_tensor({2, 3, 4}, 43);
  std::vector<double> eye(2 * 16, 0.0);
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 4; ++i) eye[b * 16 + i * 5] = 1.0;
  EXPECT_TRUE(adr::testing::bit_equal(matmul_batched(a, TD({2, 4, 4}, eye)), a));
  EXPECT_EQ(matmul_batched(TD({1, 1, 1}, 3.0), TD({1, 1, 1}, -2.0))[0], -6.0);
  EXPECT_THROW(matmul_batched(a, TD({2, 3, 4})), ShapeError);
}

TEST(Matmul, Gradients) {
  auto a = random_tensor({2, 3, 4}, 44), b = random_tensor({2, 4, 5}, 45);
  EXPECT_LT(check([](const auto& in) { return matmul_batched(in[0], in[1]); }, {a, b}), kOpTol);
}

TEST(Softmax, ValuesAndStability) {
  TD z({1, 2}, 0.0);
  auto s = softmax_lastdim(z);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  TF big({1, 2}, std::vector<float>{1000.f, 0.f});
  auto sb = softmax_lastdim(big);
  EXPECT_TRUE(std::isfinite(sb[0]));
  EXPECT_NEAR(sb[0], 1.0f, 1e-6);
  EXPECT_NEAR(sb[1], 0.0f, 1e-6);
}

TEST(Softmax, RowsAreStochastic) {
  auto x = random_tensor({5, 7, 9}, 46, -20, 20);
  auto y = softmax_lastdim(x);
  for (std::size_t r = 0; r < 35; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      const double v = y[r * 9 + j];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, Gradients) {
  auto x = random_tensor({3, 6}, 47, -2, 2);
  EXPECT_LT(check([](const auto& in) { return softmax_lastdim(in[0]); }, {x}), kOpTol);
}

TEST(Layout, PermuteAndReshapeGradients) {
  auto x = random_tensor({2, 3, 4}, 48);
  auto p = permute(x, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(p[1 * 6 + 1 * 3 + 2], x[1 * 12 + 2 * 4 + 1]);
  EXPECT_LT(check([](const auto& in) { return permute(in[0], {1, 2, 0}); }, {x}), kOpTol);
  EXPECT_LT(check([](const auto& in) { return reshape(in[0], {6, 4}); }, {x}), kOpTol);
}

TEST(LayerNorm, Gradients) {
  auto x = random_tensor({2, 3, 8}, 49), g = random_tensor({8}, 50), b = random_tensor({8}, 51);
  EXPECT_LT(check([](const auto& in) { return layer_norm_lastdim(in[0], in[1], in[2]); }, {x, g, b}), kOpTol);
}

TEST(SeparableFilter, GradientAndSizeContract) {
  auto x = random_tensor({1, 2, 7, 6}, 52);
  std::vector<double> k{0.25, 0.5, 0.25};
  EXPECT_EQ(separable_filter_valid(x, k).shape(), (Shape{1, 2, 5, 4}));
  EXPECT_LT(check([&](const auto& in) { return separable_filter_valid(in[0], k); }, {x}), kOpTol);
  EXPECT_THROW(separable_filter_valid(x, std::vector<double>(7, 1.0 / 7)), ShapeError);
}

TEST(Backward, SumAndMeanSquare) {
  TD x({3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  TD y({2}, std::vector<double>{1, 2});
  y.set_requires_grad();
  backward(mean(square(y)));
  EXPECT_DOUBLE_EQ(y.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(y.grad()[1], 2.0);
}

TEST(Backward, RejectsNonScalarAndRepeatedCalls) {
  TD x({2}, 1.0);
  x.set_requires_grad();
  EXPECT_THROW(backward(mul_scalar(x, 2.0)), ShapeError);
  auto loss = sum(mul_scalar(x, 2.0));
  backward(loss);
  EXPECT_THROW(backward(loss), std::logic_error);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  TD x({1}, 3.0);
  x.set_requires_grad();
  auto y = mul(x, x);
  backward(sum(add(y, y)));  // 2x² -> 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, ForwardIsBitwiseDeterministic) {
  auto x = random_tensor<float>({2, 3, 8, 8}, 53);
  auto w = random_tensor<float>({5, 3, 3, 3}, 54);
  auto b = random_tensor<float>({5}, 55);
  auto f = [&] { return softmax_lastdim(relu(conv2d(x, w, b, 1, 1))); };
  EXPECT_TRUE(adr::testing::bit_equal(f(), f()));
}

// --- Adam -------------------------------------------------------------------

namespace {

struct ScalarAdam {
  double m = 0, v = 0, lr = 1e-4, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;
  double step(double p, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return p - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace

TEST(Adam, ZeroGradientIsNoOp) {
  ParameterStore<double> store;
  auto p = store.add("p", random_tensor({4}, 60));
  const auto before = p.values();
  Adam<double> opt(store);
  backward(sum(mul_scalar(p, 0.0)));
  opt.step(store);
  EXPECT_EQ(p.values(), before);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(Adam, FirstStepMovesAgainstGradientSign) {
  ParameterStore<double> store;
  auto p = store.add("p", TD({3}, std::vector<double>{1.0, -2.0, 0.5}));
  Adam<double> opt(store);
  TD g({3}, std::vector<double>{0.3, -4.0, 1e-3});
  backward(sum(mul(p, g)));
  opt.step(store);
  const std::vector<double> start{1.0, -2.0, 0.5};
  for (int i = 0; i < 3; ++i) {
    ScalarAdam oracle;
    const double expect = oracle.step(start[i], g[i]);
    EXPECT_NEAR(p[i], expect, 1e-15);
    EXPECT_NEAR(p[i] - start[i], -std::copysign(1e-4, g[i]), 1e-8);
  }
}

TEST(Adam, TwoStepsMatchScalarOracle) {
  ParameterStore<double> store;
  auto p = store.add("p", TD({2}, std::vector<double>{0.7, -0.1}));
  Adam<double> opt(store);
  ScalarAdam o0, o1;
  double e0 = 0.7, e1 = -0.1;
  for (int s = 0; s < 2; ++s) {
    store.zero_grad();
    backward(sum(square(p)));  // grad 2p
    e0 = o0.step(e0, 2 * p[0]);
    e1 = o1.step(e1, 2 * p[1]);
    opt.step(store);
  }
  EXPECT_NEAR(p[0], e0, 1e-7);
  EXPECT_NEAR(p[1], e1, 1e-7);
}

TEST(Adam, NonFiniteGradientRejectedInCheckedMode) {
  CheckedModeGuard on(true);
  ParameterStore<double> store;
  auto p = store.add("p", TD({1}, 1.0));
  Adam<double> opt(store);
  backward(sum(mul(p, TD({1}, std::numeric_limits<double>::quiet_NaN()))));
  EXPECT_THROW(opt.step(store), NumericError);
}

TEST(GradCheck, AffineIsExact) {
  auto x = random_tensor({3, 5}, 61), w = random_tensor({2, 5}, 62), b = random_tensor({2}, 63);
  auto r = grad_check([](const auto& in) { return linear(in[0], in[1], in[2]); }, {x, w, b}, {.eps = 1e-2});
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.probes, 15u + 10u + 2u);
}

TEST(GradCheck, DetectsWrongGradient) {
  auto x = random_tensor({10}, 64);
  auto faulty = [](const std::vector<TD>& in) {
    return detail::unary<double>("faulty", in[0], [](double v) { return v * v; }, [](double v, double) { return v; });
  };
  EXPECT_GT(check(faulty, {x}), 0.4);
}
