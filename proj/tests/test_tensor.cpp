#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <set>

#include "dcaunet/autograd.hpp"
#include "dcaunet/errors.hpp"
#include "dcaunet/gradcheck.hpp"
#include "dcaunet/nn.hpp"
#include "dcaunet/ops.hpp"
#include "support.hpp"

using namespace dcaunet;
using testing_support::max_abs_diff;
using testing_support::random_leaf;
using testing_support::random_tensor;

TEST(Tensor, ShapeAndValueCount) {
  Tensor t({2, 3, 4}, 1.5);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.values().size(), 24u);
  EXPECT_EQ(t.dim(-1), 4u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, GradientHasValueShape) {
  Tensor x = random_leaf({3, 5}, 1);
  backward(sum(square(x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Tensor, NonFiniteResultIsDetected) {
  Tensor x({2}, std::vector<double>{-1.0, 1.0});
  EXPECT_THROW(log(x), NumericError);
  Tensor z({1}, std::vector<double>{0.0});
  EXPECT_THROW(div(Tensor::ones({1}), z), NumericError);
}

TEST(Tensor, BroadcastMismatchNamesShapes) {
  try {
    add(Tensor::ones({2, 3}), Tensor::ones({4}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4]"), std::string::npos) << msg;
  }
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor a({2, 2}, std::vector<double>{3.5, -2, 7, 0.25});
  EXPECT_EQ(matmul(eye, a).to_vector(), a.to_vector());
}

TEST(Matmul, HandMultipliedExample) {
  Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor b({2, 2}, std::vector<double>{5, 6, 7, 8});
  EXPECT_EQ(matmul(a, b).to_vector(), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, BatchedAgainstLoops) {
  Tensor a = random_tensor({3, 4, 5}, 2), b = random_tensor({5, 2}, 3);
  const auto out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{3, 4, 2}));
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < 5; ++k) acc += a[(z * 4 + i) * 5 + k] * b[k * 2 + j];
        EXPECT_NEAR(out[(z * 4 + i) * 2 + j], acc, 1e-14);
      }
}

TEST(Matmul, GradientOfSumIsRowOfBTransposed) {
  Tensor a = random_leaf({2, 3}, 4), b = random_tensor({3, 4}, 5);
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double expect = 0;
      for (std::size_t j = 0; j < 4; ++j) expect += b[k * 4 + j];
      EXPECT_NEAR(a.grad()[i * 3 + k], expect, 1e-14);
    }
  const auto r = check_gradients([&] { return sum(matmul(a, b)); }, {{"a", a, ParamKind::weight}});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Softmax, UniformAndSingleton) {
  const auto u = softmax_lastdim(Tensor::full({3}, 2.7)).to_vector();
  for (double v : u) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(softmax_lastdim(Tensor::full({1}, -40.0)).item(), 1.0);
}

TEST(Softmax, ReferenceValues) {
  // e^k / (1 + e + e^2) evaluated to 8 digits
  const auto s = softmax_lastdim(Tensor({3}, std::vector<double>{0, 1, 2})).to_vector();
  EXPECT_NEAR(s[0], 0.09003057, 5e-9);
  EXPECT_NEAR(s[1], 0.24472847, 5e-9);
  EXPECT_NEAR(s[2], 0.66524096, 5e-9);
}

TEST(Softmax, RowsSumToOneAndArePositive) {
  const auto s = softmax_lastdim(random_tensor({7, 9}, 6, 30.0));
  for (std::size_t r = 0; r < 7; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GT(s[r * 9 + c], 0.0);
      acc += s[r * 9 + c];
    }
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
}

TEST(Conv2d, OneByOneKernelIsChannelMatmul) {
  Tensor x = random_tensor({1, 3, 3, 4}, 7), w = random_tensor({1, 1, 4, 5}, 8);
  const auto out = conv2d(x, w, {}, {});
  const auto ref = matmul(reshape(x, {9, 4}), reshape(w, {4, 5}));
  EXPECT_LT(max_abs_diff(out.to_vector(), ref.to_vector()), 1e-14);
}

TEST(Conv2d, DepthwiseOnesOnConstantImage) {
  const double c = 1.75;
  Tensor x = Tensor::full({1, 5, 5, 3}, c), w = Tensor::ones({3, 3, 1, 3});
  const auto out = conv2d(x, w, {}, {1, 1, 3});
  for (std::size_t y = 1; y < 4; ++y)
    for (std::size_t xx = 1; xx < 4; ++xx)
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_DOUBLE_EQ(out[((y * 5) + xx) * 3 + ch], 9 * c);
  EXPECT_DOUBLE_EQ(out[0], 4 * c);  // corner sees a 2x2 patch
}

struct ConvCase {
  std::size_t n, h, w, cin, cout, k, stride, pad, groups;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, MatchesNestedLoops) {
  const auto p = GetParam();
  Tensor x = random_tensor({p.n, p.h, p.w, p.cin}, 11 + p.k);
  Tensor w = random_tensor({p.k, p.k, p.cin / p.groups, p.cout}, 12 + p.stride);
  Tensor b = random_tensor({p.cout}, 13);
  std::size_t oh = 0, ow = 0;
  const auto ref = testing_support::naive_conv2d(x.to_vector(), p.n, p.h, p.w, p.cin, w.to_vector(), p.k, p.k,
                                                 p.cout, b.to_vector(), p.stride, p.pad, p.groups, oh, ow);
  const auto out = conv2d(x, w, b, {p.stride, p.pad, p.groups});
  ASSERT_EQ(out.shape(), (Shape{p.n, oh, ow, p.cout}));
  EXPECT_LT(max_abs_diff(out.to_vector(), ref), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvOracle,
                         ::testing::Values(ConvCase{1, 5, 5, 2, 3, 3, 1, 1, 1}, ConvCase{2, 8, 8, 3, 4, 3, 2, 1, 1},
                                           ConvCase{1, 8, 8, 4, 4, 3, 1, 1, 4}, ConvCase{1, 8, 8, 1, 6, 4, 4, 0, 1},
                                           ConvCase{2, 7, 6, 4, 2, 3, 1, 0, 2}));

TEST(Pool2d, AverageOfTwoByTwo) {
  Tensor x({1, 2, 2, 1}, std::vector<double>{1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(pool2d(x, {PoolKind::avg, 2, 0}).item(), 2.5);
}

TEST(Pool2d, GlobalMaxOfConstant) {
  EXPECT_DOUBLE_EQ(pool2d(Tensor::full({1, 6, 6, 1}, -3.25), {PoolKind::max, 6, 0}).item(), -3.25);
}

TEST(Pool2d, MatchesNestedLoops) {
  Tensor x = random_tensor({2, 8, 8, 3}, 21);
  for (auto kind : {PoolKind::avg, PoolKind::max}) {
    const auto out = pool2d(x, {kind, 2, 0});
    ASSERT_EQ(out.shape(), (Shape{2, 4, 4, 3}));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t xx = 0; xx < 4; ++xx)
          for (std::size_t c = 0; c < 3; ++c) {
            double acc = kind == PoolKind::max ? -INFINITY : 0.0;
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const double v = x[((b * 8 + 2 * y + dy) * 8 + 2 * xx + dx) * 3 + c];
                acc = kind == PoolKind::max ? std::max(acc, v) : acc + v;
              }
            if (kind == PoolKind::avg) acc /= 4.0;
            EXPECT_EQ(out[((b * 4 + y) * 4 + xx) * 3 + c], acc);
          }
  }
}

TEST(Pool2d, MaxGradientTiesGoToFirstElement) {
  Tensor x({1, 2, 2, 1}, std::vector<double>{5, 5, 5, 5});
  x.set_requires_grad(true);
  backward(sum(pool2d(x, {PoolKind::max, 2, 0})));
  EXPECT_EQ(x.to_vector().size(), 4u);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Normalize, RmsNormOfOnes) {
  for (double v : rms_norm(Tensor::ones({3}), 1e-6).to_vector()) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Normalize, RmsNormClosedForm) {
  const auto r = rms_norm(Tensor({2}, std::vector<double>{3, 4}), 1e-300).to_vector();
  EXPECT_NEAR(r[0], 3 / std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(r[1], 4 / std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(r[0], 0.8485, 1e-4);
  EXPECT_NEAR(r[1], 1.1314, 1e-4);
}

TEST(Normalize, LayerNormStandardizes) {
  const auto y = layer_norm(random_tensor({5, 16}, 31, 4.0), {}, {}, 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Normalize, BatchNormTrainAndEval) {
  Tensor x = random_tensor({4, 3, 3, 2}, 32, 2.0);
  Tensor g = Tensor::ones({2}), b = Tensor::zeros({2});
  Tensor rm = Tensor::zeros({2}), rv = Tensor::ones({2});
  BatchNormOptions o;
  const auto y = batch_norm(x, g, b, rm, rv, o);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, xm = 0;
    for (std::size_t i = c; i < y.numel(); i += 2) {
      m += y[i];
      xm += x[i];
    }
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(rm[c], 0.1 * xm / 36.0, 1e-12);
  }
  o.training = false;
  Tensor rm0 = Tensor::zeros({2}), rv0 = Tensor::ones({2});
  const auto e = batch_norm(x, g, b, rm0, rv0, o);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(e[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(Elementwise, ScalarFacts) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(relu(Tensor::scalar(-2.5)).item(), 0.0);
  EXPECT_EQ(relu(Tensor::scalar(2.5)).item(), 2.5);
  EXPECT_NEAR(gelu(Tensor::scalar(1.0)).item(), 0.8413447460685429, 1e-15);
}

TEST(Elementwise, ConcatShape) {
  const auto c = concat({Tensor::ones({2, 3, 4}), Tensor::zeros({2, 3, 5})}, -1);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 9}));
  EXPECT_EQ(c[3], 1.0);
  EXPECT_EQ(c[4], 0.0);
}

TEST(Elementwise, PixelShuffleIndexOracle) {
  // 2x2x4 -> 4x4x1: input channel i*2+j lands at sub-pixel (i, j)
  std::vector<double> v(16);
  for (std::size_t k = 0; k < 16; ++k) v[k] = static_cast<double>(k);
  const auto out = pixel_shuffle(Tensor({1, 2, 2, 4}, v), 2);
  ASSERT_EQ(out.shape(), (Shape{1, 4, 4, 1}));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const std::size_t src = ((y / 2) * 2 + x / 2) * 4 + (y % 2) * 2 + (x % 2);
      EXPECT_EQ(out[y * 4 + x], v[src]);
    }
  EXPECT_EQ(space_to_depth(out, 2).to_vector(), v);
}

TEST(Backward, SumAndSquare) {
  Tensor x = random_leaf({4}, 41);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  backward(sum(square(x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, NonScalarLossIsUsageError) { EXPECT_THROW(backward(random_leaf({2}, 1)), UsageError); }

TEST(Tape, VisitsEachNodeOnceInTopologicalOrder) {
  Tensor x = random_leaf({3}, 51);
  Tensor y = mul(x, x);
  Tensor loss = sum(add(y, y));  // y shared by two paths
  auto tape = GradTape::record(loss);
  std::set<const detail::Node*> seen;
  for (auto* n : tape.nodes()) {
    EXPECT_TRUE(seen.insert(n).second);
    for (const auto& in : n->inputs) EXPECT_TRUE(seen.count(in.get())) << "input after consumer";
  }
  EXPECT_EQ(tape.nodes().back(), loss.node().get());
  tape.replay();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 4 * x[i]);
}

TEST(Tape, ReplayAfterClearingLeavesNoStaleGradient) {
  Tensor x = random_leaf({3}, 52);
  auto tape = GradTape::record(sum(exp(x)));
  tape.replay();
  const std::vector<double> first(x.grad().begin(), x.grad().end());
  x.zero_grad();
  tape.replay();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), first);
  tape.replay();  // leaves accumulate without a clear
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * first[i]);
}

TEST(Tape, DeterministicGradients) {
  auto run = [] {
    Tensor x = random_leaf({2, 4, 4, 3}, 53);
    Tensor w = random_leaf({3, 3, 3, 2}, 54);
    backward(projection_loss(gelu(conv2d(x, w, {}, {1, 1, 1})), 9));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable kernel against central differences at extents <= 6.
struct KernelCase {
  const char* name;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
  std::vector<Shape> shapes;
  double scale = 1.0;
};

class KernelGrad : public ::testing::TestWithParam<KernelCase> {};

TEST_P(KernelGrad, MatchesCentralDifferences) {
  const auto& kc = GetParam();
  std::vector<Tensor> inputs;
  std::vector<NamedParam> named;
  for (std::size_t i = 0; i < kc.shapes.size(); ++i) {
    inputs.push_back(random_leaf(kc.shapes[i], 100 + i, kc.scale));
    named.push_back({"in" + std::to_string(i), inputs.back(), ParamKind::weight});
  }
  const auto r = check_gradients([&] { return projection_loss(kc.fn(inputs), 77); }, named);
  EXPECT_LT(r.max_rel_error, 1e-4) << kc.name << " worst " << r.worst_name << "[" << r.worst_index << "]";
}

using V = const std::vector<Tensor>&;
INSTANTIATE_TEST_SUITE_P(
    Kernels, KernelGrad,
    ::testing::Values(
        KernelCase{"add", [](V t) { return add(t[0], t[1]); }, {{3, 4}, {4}}},
        KernelCase{"sub", [](V t) { return sub(t[0], t[1]); }, {{3, 1}, {3, 4}}},
        KernelCase{"mul", [](V t) { return mul(t[0], t[1]); }, {{2, 3, 4}, {1, 3, 1}}},
        KernelCase{"div", [](V t) { return div(t[0], add_scalar(square(t[1]), 0.5)); }, {{3, 4}, {3, 4}}},
        KernelCase{"sigmoid", [](V t) { return sigmoid(t[0]); }, {{5, 3}}, 3.0},
        KernelCase{"gelu", [](V t) { return gelu(t[0]); }, {{5, 3}}, 3.0},
        KernelCase{"exp_log", [](V t) { return log(add_scalar(exp(t[0]), 1.0)); }, {{4, 4}}},
        KernelCase{"sqrt", [](V t) { return sqrt(add_scalar(square(t[0]), 0.3)); }, {{6}}},
        KernelCase{"reduce_axes", [](V t) { return mean(sum(t[0], {1}, true), {0, 2}); }, {{3, 4, 5}}},
        KernelCase{"max_axes", [](V t) { return max(t[0], {-1}); }, {{4, 6}}},
        KernelCase{"permute", [](V t) { return permute(t[0], {2, 0, 1}); }, {{2, 3, 4}}},
        KernelCase{"slice_concat",
                   [](V t) { return concat({slice(t[0], 1, 1, 3), t[1]}, 1); }, {{2, 4, 3}, {2, 1, 3}}},
        KernelCase{"matmul", [](V t) { return matmul(t[0], t[1]); }, {{2, 3, 4}, {4, 5}}},
        KernelCase{"linear", [](V t) { return linear(t[0], t[1], t[2]); }, {{2, 3, 4}, {4, 5}, {5}}},
        KernelCase{"softmax", [](V t) { return softmax_lastdim(t[0]); }, {{4, 6}}, 2.0},
        KernelCase{"log_softmax", [](V t) { return log_softmax_lastdim(t[0]); }, {{4, 6}}, 2.0},
        KernelCase{"conv_pad", [](V t) { return conv2d(t[0], t[1], t[2], {1, 1, 1}); },
                   {{2, 5, 5, 3}, {3, 3, 3, 2}, {2}}},
        KernelCase{"conv_stride", [](V t) { return conv2d(t[0], t[1], {}, {2, 0, 1}); }, {{1, 6, 6, 2}, {2, 2, 2, 3}}},
        KernelCase{"conv_depthwise", [](V t) { return conv2d(t[0], t[1], {}, {1, 1, 4}); },
                   {{1, 4, 4, 4}, {3, 3, 1, 4}}},
        KernelCase{"avg_pool", [](V t) { return pool2d(t[0], {PoolKind::avg, 2, 0}); }, {{2, 6, 6, 2}}},
        KernelCase{"max_pool", [](V t) { return pool2d(t[0], {PoolKind::max, 3, 0}); }, {{1, 6, 6, 2}}},
        KernelCase{"layer_norm", [](V t) { return layer_norm(t[0], t[1], t[2]); }, {{3, 5}, {5}, {5}}},
        KernelCase{"rms_norm", [](V t) { return rms_norm(t[0]); }, {{3, 6}}},
        KernelCase{"pixel_shuffle", [](V t) { return pixel_shuffle(t[0], 2); }, {{1, 2, 3, 8}}},
        KernelCase{"space_to_depth", [](V t) { return space_to_depth(t[0], 2); }, {{1, 4, 6, 2}}},
        KernelCase{"batch_norm",
                   [](V t) {
                     Tensor rm = Tensor::zeros({3}), rv = Tensor::ones({3});
                     return batch_norm(t[0], t[1], t[2], rm, rv, {1e-5, 0.1, true, false});
                   },
                   {{2, 3, 3, 3}, {3}, {3}}}),
    [](const auto& info) { return std::string(info.param.name); });
