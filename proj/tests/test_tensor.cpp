#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "nvs/gradcheck.hpp"
#include "nvs/ops.hpp"
#include "nvs/tensor.hpp"

using namespace nvs;

namespace {

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Direct quadruple loop cross-correlation.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(B * Co * Ho * Wo);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long y = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                s += w[((o * Ci + c) * k + u) * k + v] * x[((n * Ci + c) * H + y) * W + xx];
              }
          out[((n * Co + o) * Ho + i) * Wo + j] = s;
        }
  return out;
}

}  // namespace

TEST(Tensor, RejectsDataShapeMismatch) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Tensor, GradHasDataLength) {
  Tensor x({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Tensor, LeafDataRefusesNonLeaf) {
  Tensor x({2}, {1, 2}, true);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(y.leaf_data(), std::logic_error);
}

TEST(Backward, SumGivesOnes) {
  Tensor x({2, 3}, {0.1, -2, 3, 4, 5, -6}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x({1}, {3.0}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x({3}, {1, 2, 3}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, RejectsNonFiniteLoss) {
  Tensor x({1}, {0.0}, true);
  EXPECT_THROW(backward(reciprocal(x)), NumericalError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x({2}, {1.0, -2.0}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], -8.0);
  x.zero_grad();
  backward(loss);
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, SharedSubexpressionCountsTwice) {
  Tensor x({1}, {2.0}, true);
  Tensor y = mul(x, x);
  backward(sum(add(y, y)));
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(Tape, IsTopologicallyOrdered) {
  Tensor x({2}, {1, 2}, true), w({2}, {3, 4}, true);
  Tensor loss = sum(mul(add(x, w), x));
  const Tape tape = Tape::record(loss);
  std::set<const Node*> seen;
  for (const Node* n : tape.nodes()) {
    for (const auto& in : n->inputs)
      if (in->requires_grad) {
        EXPECT_TRUE(seen.count(in.get())) << n->op;
      }
    seen.insert(n);
  }
  EXPECT_EQ(tape.nodes().back(), &loss.node());
}

TEST(NoGrad, RecordsNothing) {
  Tensor x({2}, {1, 2}, true);
  NoGradGuard ng;
  Tensor y = scale(x, 3.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, LinearityOfGradients) {
  std::mt19937_64 rng(4);
  Tensor x = Tensor::uniform({3, 4}, -1, 1, rng, true);
  auto l1 = [&] { return sum(mul(x, x)); };
  auto l2 = [&] { return mean(nvs::exp(x)); };
  const double a = 0.7, b = -1.3;
  backward(l1());
  const std::vector<double> g1(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(l2());
  const std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(add(scale(l1(), a), scale(l2(), b)));
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(x.grad()[i], a * g1[i] + b * g2[i], 1e-10);
}

TEST(Backward, Deterministic) {
  auto run = [] {
    std::mt19937_64 rng(9);
    Tensor x = Tensor::uniform({1, 2, 6, 6}, -1, 1, rng, true);
    Tensor w = Tensor::uniform({3, 2, 3, 3}, -1, 1, rng, true);
    Tensor y = conv2d(x, w, Tensor(), 1, 1);
    backward(mean(nvs::tanh(y)));
    return std::make_pair(to_vec(y), std::vector<double>(w.grad().begin(), w.grad().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(Conv2d, OneByOneKernelScales) {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, Tensor({1, 1, 1, 1}, {2.0}), Tensor({1}, {0.0}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, SumKernel) {
  Tensor y = conv2d(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), Tensor::full({1, 1, 2, 2}, 1.0), Tensor({1}, {0.0}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 10.0);
}

TEST(Conv2d, MatchesDirectLoop) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::uniform({2, 3, 9, 9}, -1, 1, rng);
  Tensor w = Tensor::uniform({4, 3, 3, 3}, -1, 1, rng);
  Tensor b = Tensor::uniform({4}, -1, 1, rng);
  Tensor y = conv2d(x, w, b, 2, 1);
  const auto ref = naive_conv(x, w, b, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 5, 5}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-10);
}

TEST(Conv2d, ShapeErrorsNameDimensions) {
  Tensor x({1, 3, 5, 5}, std::vector<double>(75));
  try {
    conv2d(x, Tensor({2, 2, 3, 3}, std::vector<double>(36)), Tensor(), 1, 1);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
  }
  // (5 + 2 - 4) / 2 + 1 is not integral.
  EXPECT_THROW(conv2d(x, Tensor({1, 3, 4, 4}, std::vector<double>(48)), Tensor(), 2, 1), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor({1, 3, 3, 3}, std::vector<double>(27)), Tensor({2}, {0, 0}), 1, 1), ShapeError);
}

TEST(Linear, IdentityWeight) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor I({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(to_vec(linear(x, I, Tensor::zeros({3}))), to_vec(x));
}

TEST(Linear, ZeroWeightGivesBias) {
  Tensor y = linear(Tensor({1, 2}, {1, 2}), Tensor::zeros({2, 2}), Tensor({2}, {5, 7}));
  EXPECT_EQ(to_vec(y), (std::vector<double>{5, 7}));
}

TEST(Linear, MatchesDotProducts) {
  std::mt19937_64 rng(2);
  Tensor x = Tensor::uniform({3, 4}, -1, 1, rng), w = Tensor::uniform({5, 4}, -1, 1, rng),
         b = Tensor::uniform({5}, -1, 1, rng);
  Tensor y = linear(x, w, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t m = 0; m < 5; ++m) {
      double s = b[m];
      for (std::size_t n = 0; n < 4; ++n) s += x[i * 4 + n] * w[m * 4 + n];
      EXPECT_NEAR(y[i * 5 + m], s, 1e-12);
    }
  EXPECT_THROW(linear(x, Tensor::zeros({5, 3}), b), ShapeError);
}

TEST(Activation, Values) {
  EXPECT_EQ(to_vec(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(Tensor({1}, {0.0}))[0], 0.5);
  EXPECT_DOUBLE_EQ(leaky_relu(Tensor({1}, {-5.0}), 0.2)[0], -1.0);
  EXPECT_NEAR(elu(Tensor({1}, {-1.0}))[0], std::exp(-1.0) - 1.0, 1e-15);
  EXPECT_NEAR(nvs::tanh(Tensor({1}, {0.5}))[0], std::tanh(0.5), 1e-15);
  EXPECT_THROW(leaky_relu(Tensor({1}, {1.0}), 0.0), std::invalid_argument);
  EXPECT_THROW(leaky_relu(Tensor({1}, {1.0}), -0.1), std::invalid_argument);
}

TEST(Resize, ConstantStaysConstant) {
  Tensor y = resize_bilinear(Tensor::full({1, 2, 3, 5}, 0.375), 7, 11, false);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 7, 11}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.375);
  Tensor z = resize_bilinear(Tensor::full({1, 1, 3, 5}, 0.375), 2, 2, true);
  for (double v : z.data()) EXPECT_DOUBLE_EQ(v, 0.375);
}

TEST(Resize, AlignCornersPinsEndpoints) {
  Tensor y = resize_bilinear(Tensor({1, 1, 1, 2}, {0, 1}), 1, 3, true);
  EXPECT_EQ(to_vec(y), (std::vector<double>{0, 0.5, 1}));
}

TEST(Resize, MatchesPerPixelInterpolation) {
  std::mt19937_64 rng(3);
  Tensor x = Tensor::uniform({1, 2, 4, 4}, -1, 1, rng);
  for (bool align : {false, true}) {
    Tensor y = resize_bilinear(x, 7, 7, align);
    auto src = [&](std::size_t o, std::size_t in, std::size_t out) {
      if (align) return static_cast<double>(o) * (in - 1.0) / (out - 1.0);
      return std::max(0.0, (o + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5);
    };
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 7; ++j) {
          const double sy = src(i, 4, 7), sx = src(j, 4, 7);
          const std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
          const std::size_t y1 = std::min<std::size_t>(y0 + 1, 3), x1 = std::min<std::size_t>(x0 + 1, 3);
          const double fy = sy - y0, fx = sx - x0;
          auto at = [&](std::size_t yy, std::size_t xx) { return x[(c * 4 + yy) * 4 + xx]; };
          const double ref = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
          EXPECT_NEAR(y[(c * 7 + i) * 7 + j], ref, 1e-10);
        }
  }
}

TEST(Concat, EmptyRightIsIdentity) {
  std::mt19937_64 rng(5);
  Tensor x = Tensor::uniform({1, 2, 3, 3}, -1, 1, rng);
  Tensor y = concat_channels(x, Tensor({1, 0, 3, 3}, {}));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(to_vec(y), to_vec(x));
}

TEST(Concat, ShapesAndGradientRouting) {
  Tensor a = Tensor::full({1, 2, 4, 4}, 1.0, true), b = Tensor::full({1, 3, 4, 4}, 2.0, true);
  Tensor y = concat_channels(a, b);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 4, 4}));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[2 * 16], 2.0);
  backward(sum(y));
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_THROW(concat_channels(a, Tensor::zeros({1, 1, 4, 3})), ShapeError);
}

TEST(Reshape, RejectsWrongCount) { EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4, 2}), ShapeError); }

TEST(GradCheck, EveryPrimitivePasses) {
  for (const auto& r : primitive_grad_checks()) {
    EXPECT_TRUE(r.passed()) << r.name << " max error " << r.max_error;
    EXPECT_GT(r.checked, 0u) << r.name;
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // sum(x^2) with a gradient scaled by 2 must fail.
  GradFn bad = [](const std::vector<Tensor>& v) {
    const Tensor& x = v[0];
    std::vector<double> y(x.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
    return detail::make_result("bad_square", x.shape(), std::move(y), {x}, [](Node& self) {
      double* g = detail::input_grad(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += 4 * self.inputs[0]->data[i] * self.grad[i];
    });
  };
  std::mt19937_64 rng(1);
  EXPECT_FALSE(check_gradients("bad", bad, {Tensor::uniform({4}, 0.5, 1.0, rng, true)}).passed());
}
