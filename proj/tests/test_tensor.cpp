#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace mixmatch;
using testing_support::max_gradient_error;
using testing_support::random_tensor;

namespace {

using TD = Tensor<double>;

std::vector<double> vals(const TD& t) { return {t.values().begin(), t.values().end()}; }
std::vector<double> grads(const TD& t) { return {t.grad().begin(), t.grad().end()}; }

// Brute-force zero-padded cross-correlation.
std::vector<double> conv_oracle(const std::vector<double>& x, std::size_t n, std::size_t c,
                                std::size_t h, std::size_t w, const std::vector<double>& k,
                                std::size_t o, std::size_t kh, std::size_t kw, std::size_t pad) {
  const std::size_t oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long iy = static_cast<long>(y + dy) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx + dx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                  continue;
                acc += x[((b * c + ch) * h + iy) * w + ix] * k[((f * c + ch) * kh + dy) * kw + dx];
              }
          out[((b * o + f) * oh + y) * ow + xx] = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(TD::constant({2, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_EQ(TD::zeros({2, 3}).size(), 6u);
  EXPECT_EQ(TD::scalar(4).item(), 4);
  EXPECT_THROW(TD::zeros({2}).item(), std::invalid_argument);
}

TEST(Tensor, AddIsComponentwise) {
  EXPECT_EQ(vals(add(TD::constant({2}, {1, 2}), TD::constant({2}, {3, 4}))),
            (std::vector<double>{4, 6}));
}

TEST(Tensor, ShapeMismatchNamesOpAndShapes) {
  try {
    add(TD::zeros({2}), TD::zeros({3}));
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "add: shape mismatch [2] vs [3]");
  }
  try {
    matmul(TD::zeros({2, 3}), TD::zeros({2, 3}));
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "matmul: shape mismatch [2,3] vs [2,3]");
  }
  EXPECT_THROW(sub(TD::zeros({2}), TD::zeros({2, 1})), std::invalid_argument);
  EXPECT_THROW(mul(TD::zeros({1}), TD::zeros({2})), std::invalid_argument);
  EXPECT_THROW(conv2d(TD::zeros({1, 2, 4, 4}), TD::zeros({1, 3, 3, 3}), 1), std::invalid_argument);
  EXPECT_THROW(concat0<double>({TD::zeros({1, 2}), TD::zeros({1, 3})}), std::invalid_argument);
  EXPECT_THROW(reshape(TD::zeros({2, 3}), {4}), std::invalid_argument);
}

TEST(Tensor, MatmulByIdentity) {
  Stream s(3);
  for (std::size_t k = 1; k <= 4; ++k) {
    const auto a = random_tensor({3, k}, s);
    const auto eye = TD::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    EXPECT_EQ(vals(matmul(eye, a)), vals(a));
  }
}

TEST(Tensor, ConvAllOnesCenterAndCorner) {
  const auto img = TD::constant({1, 1, 5, 5}, std::vector<double>(25, 1.0));
  const auto ker = TD::constant({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  const auto out = conv2d(img, ker, 1);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 5, 5}));
  EXPECT_EQ(out[12], 9);
  EXPECT_EQ(out[0], 4);
  EXPECT_EQ(out[24], 4);
  EXPECT_EQ(out[2], 6);
}

TEST(Tensor, ConvMatchesBruteForce) {
  Stream s(11);
  for (std::size_t pad : {0u, 1u, 2u}) {
    const auto x = random_tensor({2, 3, 5, 4}, s);
    const auto k = random_tensor({4, 3, 3, 2}, s);
    const auto out = conv2d(x, k, pad);
    const auto ref = conv_oracle(vals(x), 2, 3, 5, 4, vals(k), 4, 3, 2, pad);
    ASSERT_EQ(out.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(Tensor, ElementwiseOps) {
  const auto a = TD::constant({3}, {-1, 0, 2});
  EXPECT_EQ(vals(relu(a)), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(vals(scale(a, 2.0)), (std::vector<double>{-2, 0, 4}));
  EXPECT_EQ(vals(mul(a, a)), (std::vector<double>{1, 0, 4}));
  EXPECT_EQ(vals(sub(a, a)), (std::vector<double>{0, 0, 0}));
  EXPECT_DOUBLE_EQ(exp(a)[2], std::exp(2.0));
  EXPECT_DOUBLE_EQ(log(TD::constant({1}, {std::exp(1.5)}))[0], 1.5);
  EXPECT_EQ(sum(a).item(), 1);
  EXPECT_DOUBLE_EQ(mean(a).item(), 1.0 / 3);
  EXPECT_EQ(sum(a).rank(), 0u);
}

TEST(Tensor, ReshapeConcatGather) {
  const auto a = TD::constant({2, 2}, {1, 2, 3, 4});
  const auto b = TD::constant({1, 2}, {5, 6});
  EXPECT_EQ(reshape(a, {4}).shape(), (Shape{4}));
  const auto c = concat0<double>({a, b});
  EXPECT_EQ(c.shape(), (Shape{3, 2}));
  EXPECT_EQ(vals(c), (std::vector<double>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(vals(gather_rows(c, {2, 0, 2})), (std::vector<double>{5, 6, 1, 2, 5, 6}));
  EXPECT_THROW(gather_rows(c, {3}), std::out_of_range);
}

TEST(Tensor, MeanPool) {
  const auto x = TD::constant({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_EQ(vals(mean_pool2(x)), (std::vector<double>{3.5, 5.5}));
  EXPECT_THROW(mean_pool2(TD::zeros({1, 1, 3, 4})), std::invalid_argument);
}

TEST(Softmax, ExamplesAndSimplex) {
  EXPECT_EQ(vals(softmax(TD::constant({2}, {0, 0}))), (std::vector<double>{0.5, 0.5}));
  for (double c : {-700.0, -3.0, 0.0, 12.5, 700.0}) {
    const auto p = softmax(TD::constant({3}, {c, c, c}));
    for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
  }
  // [ln 1, ln 3] -> [1/4, 3/4]
  const auto p = softmax(TD::constant({2}, {0.0, std::log(3.0)}));
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
  const auto lp = log_softmax(TD::constant({2}, {0.0, std::log(3.0)}));
  EXPECT_NEAR(lp[0], std::log(0.25), 1e-15);
}

TEST(Softmax, Rejections) {
  EXPECT_THROW(softmax(TD::constant({1}, {0})), std::invalid_argument);
  EXPECT_THROW(softmax(TD::constant({2}, {0, std::nan("")})), std::invalid_argument);
  EXPECT_THROW(softmax(TD::constant({2}, {0, INFINITY})), std::invalid_argument);
  EXPECT_THROW(log_softmax(TD::scalar(1)), std::invalid_argument);
}

TEST(Softmax, FloatRowsStayOnSimplex) {
  Stream s(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto z = random_tensor<float>({4, 5}, s, false, -50, 50);
    const auto p = softmax(z);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(p[r * 5 + j], 0.0f);
        total += p[r * 5 + j];
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(StopGradient, ValuesIdenticalAndGradientZero) {
  Stream s(2);
  const auto w = random_tensor({3}, s, true);
  const auto f = mul(w, w);
  const auto sg = stop_gradient(f);
  EXPECT_EQ(vals(sg), vals(f));
  EXPECT_FALSE(sg.requires_grad());
  auto loss = add(sum(sg), scale(sum(w), 0.0));
  backward(loss);
  EXPECT_EQ(grads(w), (std::vector<double>{0, 0, 0}));
}

TEST(StopGradient, InnerProductMatchesFrozenConstant) {
  Stream s(8);
  const auto w = random_tensor({4}, s, true);
  const auto frozen = stop_gradient(exp(w));
  // FD with c frozen at its current value
  const double err = max_gradient_error({w}, [&] { return sum(mul(frozen, exp(w))); });
  EXPECT_LE(err, 1e-7);
  // and autodiff through stop_gradient(f(w)) equals the frozen version exactly
  w.node()->grad.clear();
  backward(sum(mul(stop_gradient(exp(w)), exp(w))));
  const auto through = grads(w);
  auto w2 = w.clone();
  backward(sum(mul(frozen, exp(w2))));
  EXPECT_EQ(through, grads(w2));
}

TEST(Backward, Basics) {
  auto w = TD::parameter({2}, {1, -2});
  backward(sum(w));
  EXPECT_EQ(grads(w), (std::vector<double>{1, 1}));
  w.zero_grad();
  backward(sum(mul(w, w)));
  EXPECT_EQ(grads(w), (std::vector<double>{2, -4}));
  // accumulation without reset
  backward(sum(mul(w, w)));
  EXPECT_EQ(grads(w), (std::vector<double>{4, -8}));
  EXPECT_THROW(backward(mul(w, w)), std::invalid_argument);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto w = TD::parameter({1}, {3});
  const auto sq = mul(w, w);
  const auto y = add(sq, sq);  // 2 w^2
  backward(sum(y));
  EXPECT_EQ(w.grad()[0], 12);
  // repeated pass on the same graph gives the same increment
  backward(sum(y));
  EXPECT_EQ(w.grad()[0], 24);
}

TEST(Backward, LinearityOverSummedLosses) {
  Stream s(17);
  const auto a = random_tensor({3, 4}, s, true);
  const auto b = random_tensor({4, 2}, s, true);
  auto f1 = [&] { return sum(mul(matmul(a, b), matmul(a, b))); };
  auto f2 = [&] { return sum(exp(matmul(a, b))); };
  backward(add(f1(), f2()));
  const auto ga = grads(a), gb = grads(b);
  a.node()->grad.clear();
  b.node()->grad.clear();
  backward(f1());
  backward(f2());
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(ga[i], a.grad()[i], 1e-12);
  for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_NEAR(gb[i], b.grad()[i], 1e-12);
}

TEST(GradientCheck, EveryOp) {
  Stream s(23);
  const auto a = random_tensor({2, 3}, s, true, 0.5, 1.5);
  const auto b = random_tensor({2, 3}, s, true, 0.5, 1.5);
  const auto m = random_tensor({3, 2}, s, true);
  const auto bias = random_tensor({3}, s, true);
  EXPECT_LE(max_gradient_error({a, b}, [&] { return sum(mul(sub(a, b), add(a, b))); }), 1e-6);
  EXPECT_LE(max_gradient_error({a}, [&] { return sum(mul(log(a), exp(a))); }), 1e-6);
  EXPECT_LE(max_gradient_error({a, m}, [&] { return mean(mul(matmul(a, m), matmul(a, m))); }),
            1e-6);
  EXPECT_LE(max_gradient_error({a, bias},
                               [&] { return sum(mul(add(a, expand_rows(bias, 2)), a)); }),
            1e-6);
  EXPECT_LE(max_gradient_error({a, b},
                               [&] {
                                 const auto c = concat0<double>({a, b});
                                 return sum(mul(gather_rows(c, {3, 0, 0}),
                                                scale_rows(gather_rows(c, {1, 2, 3}),
                                                           std::vector<double>{0.3, -1, 2})));
                               }),
            1e-6);
  EXPECT_LE(max_gradient_error({a}, [&] { return sum(mul(reshape(a, {6}), reshape(a, {6}))); }),
            1e-6);
  const auto t = random_tensor({3, 4}, s);
  EXPECT_LE(max_gradient_error({a}, [&] { return sum(mul(log_softmax(a), softmax(a))); }), 1e-6);
  const auto p = random_tensor({2, 3}, s, true, 0.1, 1.0);
  EXPECT_LE(max_gradient_error({p}, [&] { return sum(mul(sharpen_rows(p, 0.5), b)); }), 1e-6);
  EXPECT_LE(max_gradient_error({p}, [&] { return sum(mul(sharpen_rows(p, 2.0), b)); }), 1e-6);
  (void)t;
}

TEST(GradientCheck, ConvPoolAndChannelBias) {
  Stream s(29);
  const auto x = random_tensor({2, 2, 4, 4}, s, true);
  const auto k = random_tensor({3, 2, 3, 3}, s, true);
  const auto cb = random_tensor({3}, s, true);
  const auto probe = random_tensor({2, 3, 2, 2}, s);
  EXPECT_LE(max_gradient_error({x, k, cb},
                               [&] {
                                 const auto y = add(conv2d(x, k, 1), expand_channels(cb, 2, 4, 4));
                                 return sum(mul(mean_pool2(y), probe));
                               }),
            1e-6);
}

TEST(GradientCheck, TwoLayerMlpCrossEntropy) {
  Stream s(31);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor({4, 3}, s);
    const auto w1 = random_tensor({3, 5}, s, true);
    const auto b1 = random_tensor({5}, s, true);
    const auto w2 = random_tensor({5, 4}, s, true);
    const auto b2 = random_tensor({4}, s, true);
    const auto y = TD::constant({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0.5, 0, 0, 0.5});
    const double err = max_gradient_error({w1, b1, w2, b2}, [&] {
      const auto h = relu(add(matmul(x, w1), expand_rows(b1, 4)));
      const auto logits = add(matmul(h, w2), expand_rows(b2, 4));
      return scale(sum(mul(y, log_softmax(logits))), -0.25);
    });
    EXPECT_LE(err, 1e-4);
  }
}

TEST(Sharpen, ExactValuesAndZeros) {
  // [0.6, 0.4] at T = 0.5 -> [9/13, 4/13]
  const auto q = sharpen_rows(TD::constant({1, 2}, {0.6, 0.4}), 0.5);
  EXPECT_NEAR(q[0], 9.0 / 13, 1e-15);
  EXPECT_NEAR(q[1], 4.0 / 13, 1e-15);
  const auto z = sharpen_rows(TD::constant({1, 3}, {0.0, 0.25, 0.75}), 0.5);
  EXPECT_EQ(z[0], 0.0);
  EXPECT_NEAR(z[1], 0.1, 1e-15);
  EXPECT_THROW(sharpen_rows(TD::constant({1, 2}, {0.5, 0.5}), 0.0), std::invalid_argument);
  EXPECT_THROW(sharpen_rows(TD::constant({1, 2}, {0.5, 0.5}), -1.0), std::invalid_argument);
}
