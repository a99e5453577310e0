#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "quadformer/gradcheck.hpp"
#include "quadformer/ops.hpp"

namespace qf {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

void expect_values(const Tensor& t, std::vector<double> expected, double tol) {
  ASSERT_EQ(t.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t[i], expected[i], tol) << i;
}

TEST(Matmul, IdentityZeroAndHandComputed) {
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor a(Shape{2, 2}, {1, 2, 3, 4});
  expect_values(matmul(eye, a), {1, 2, 3, 4}, 0.0);
  expect_values(matmul(a, Tensor(Shape{2, 2})), {0, 0, 0, 0}, 0.0);
  expect_values(matmul(a, Tensor(Shape{2, 2}, {5, 6, 7, 8})), {19, 22, 43, 50}, 0.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, BatchedBroadcastsRightOperand) {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < 4; ++p) s += a[t * 12 + i * 4 + p] * b[p * 5 + j];
        EXPECT_NEAR(c[t * 15 + i * 5 + j], s, 1e-14);
      }
  EXPECT_LT(finite_diff_check([&](const Tensor& x) { return sum(mul(matmul(x, b), matmul(x, b))); }, a), 1e-6);
  EXPECT_LT(finite_diff_check([&](const Tensor& y) { return sum(mul(matmul(a, y), matmul(a, y))); }, b), 1e-6);
}

TEST(Softmax, Examples) {
  expect_values(softmax_lastdim(Tensor::from({0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
  Tensor big = softmax_lastdim(Tensor::from({1000, 0}));
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
  // reference values evaluated at 40 digits
  expect_values(softmax_lastdim(Tensor::from({1, 2, 3})),
                {0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953}, 1e-15);
}

TEST(Softmax, RowsSumToOneForLargeMagnitudes) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({7, 9}, rng, -1e3, 1e3);
    Tensor p = softmax_lastdim(x);
    for (std::size_t r = 0; r < 7; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_GE(p[r * 9 + j], 0.0);
        s += p[r * 9 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, Examples) {
  Tensor ones = Tensor::from({1, 1, 1}), zeros(Shape{3});
  expect_values(layer_norm(Tensor::from({1, 1, 1}), ones, zeros), {0, 0, 0}, 0.0);
  Tensor g2 = Tensor::from({1, 1}), b2(Shape{2});
  expect_values(layer_norm(Tensor::from({0, 2}), g2, b2, 1e-300), {-1, 1}, 1e-15);
  // 40-digit reference with eps = 1e-6
  expect_values(layer_norm(Tensor::from({1, 2, 3}), Tensor::from({2, 2, 2}), Tensor::from({1, 1, 1})),
                {-1.4494879056679377652, 1.0, 3.4494879056679377652}, 1e-14);
}

TEST(LayerNorm, NormalizesEachRow) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 16}, rng, -5, 5);
  Tensor y = layer_norm(x, Tensor(Shape{16}, 1.0), Tensor(Shape{16}), 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 16; ++j) m += y[r * 16 + j];
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y[r * 16 + j] - m) * (y[r * 16 + j] - m);
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v / 16, 1.0, 1e-9);
  }
}

TEST(Gelu, Examples) {
  Tensor y = gelu(Tensor::from({0.0, 1.0, 30.0, -30.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.84134474606854294859, 1e-15);
  EXPECT_NEAR(y[2], 30.0, 1e-12);
  EXPECT_NEAR(y[3], 0.0, 1e-12);
}

// Nested-loop reference: out[co][oy][ox] = b[co] + Σ w·x with zero padding.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t s, std::size_t p) {
  const long cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const long cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const long oh = (h + 2 * long(p) - kh) / long(s) + 1, ow = (wd + 2 * long(p) - kw) / long(s) + 1;
  Tensor out(Shape{std::size_t(cout), std::size_t(oh), std::size_t(ow)});
  auto o = out.mutable_values();
  for (long co = 0; co < cout; ++co)
    for (long oy = 0; oy < oh; ++oy)
      for (long ox = 0; ox < ow; ++ox) {
        double acc = b[co];
        for (long ci = 0; ci < cin; ++ci)
          for (long ky = 0; ky < kh; ++ky)
            for (long kx = 0; kx < kw; ++kx) {
              const long iy = oy * long(s) + ky - long(p), ix = ox * long(s) + kx - long(p);
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += w[((co * cin + ci) * kh + ky) * kw + kx] * x[(ci * h + iy) * wd + ix];
            }
        o[(co * oh + oy) * ow + ox] = acc;
      }
  return out;
}

TEST(Conv2d, Examples) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor one(Shape{2, 2, 1, 1}, {1, 0, 0, 1});
  expect_values(conv2d(x, one, Tensor(Shape{2})), std::vector<double>(x.values().begin(), x.values().end()), 0.0);
  Tensor zero_out = conv2d(x, Tensor(Shape{3, 2, 3, 3}), Tensor(Shape{3}), {2, 1});
  for (double v : zero_out.values()) EXPECT_EQ(v, 0.0);

  Tensor x3 = random_tensor({1, 3, 3}, rng);
  Tensor k2 = random_tensor({1, 1, 2, 2}, rng);
  Tensor y = conv2d(x3, k2, Tensor(Shape{1}));
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  Tensor ref = conv_oracle(x3, k2, Tensor(Shape{1}), 1, 0);
  expect_values(y, std::vector<double>(ref.values().begin(), ref.values().end()), 1e-15);
}

TEST(Conv2d, MatchesOracleAcrossStridesAndPadding) {
  std::mt19937_64 rng(8);
  for (auto [k, s, p] : {std::tuple{3, 2, 1}, {4, 2, 1}, {4, 4, 0}, {3, 1, 1}}) {
    Tensor x = random_tensor({3, 9, 8}, rng);
    Tensor w = random_tensor({2, 3, std::size_t(k), std::size_t(k)}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor y = conv2d(x, w, b, {std::size_t(s), std::size_t(p)});
    Tensor ref = conv_oracle(x, w, b, s, p);
    ASSERT_EQ(y.shape(), ref.shape());
    expect_values(y, std::vector<double>(ref.values().begin(), ref.values().end()), 1e-13);
  }
}

TEST(Conv2d, NonPositiveOutputIsShapeError) {
  EXPECT_THROW(conv2d(Tensor(Shape{1, 2, 2}), Tensor(Shape{1, 1, 4, 4}), Tensor(Shape{1})), ShapeError);
}

TEST(Upsample, ConstantIdentityAndOracle) {
  Tensor c(Shape{2, 3, 2}, 5.0);
  Tensor up = upsample_bilinear(c, 7, 9);
  for (double v : up.values()) EXPECT_NEAR(v, 5.0, 1e-15);

  std::mt19937_64 rng(9);
  Tensor x = random_tensor({1, 3, 4}, rng);
  Tensor same = upsample_bilinear(x, 3, 4);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(same[i], x[i]);

  // 2×2 → 4×4, per-pixel half-pixel-centre formula.
  Tensor s(Shape{1, 2, 2}, {1, 2, 3, 4});
  Tensor u = upsample_bilinear(s, 4, 4);
  auto sample = [&](double fy, double fx) {
    auto clampc = [](double v) { return std::min(std::max(v, 0.0), 1.0); };
    const double yy = clampc(fy), xx = clampc(fx);
    const std::size_t y0 = std::size_t(yy), x0 = std::size_t(xx);
    const std::size_t y1 = std::min<std::size_t>(y0 + 1, 1), x1 = std::min<std::size_t>(x0 + 1, 1);
    const double ly = yy - y0, lx = xx - x0;
    auto at = [&](std::size_t r, std::size_t q) { return s[r * 2 + q]; };
    return (1 - ly) * ((1 - lx) * at(y0, x0) + lx * at(y0, x1)) + ly * ((1 - lx) * at(y1, x0) + lx * at(y1, x1));
  };
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t xo = 0; xo < 4; ++xo)
      EXPECT_NEAR(u[y * 4 + xo], sample((y + 0.5) / 2 - 0.5, (xo + 0.5) / 2 - 0.5), 1e-15);
  EXPECT_DOUBLE_EQ(u[0], 1.0);
  EXPECT_DOUBLE_EQ(u[5], 1.75);  // (1,1): quarter-pixel inside the top-left cell
}

TEST(Backward, IdentitySquareAndFanOut) {
  {
    Tape tape;
    Tensor x = tape.watch(Tensor::scalar(3.0));
    Tensor y = reshape(x, Shape{});
    tape.backward(y);
    EXPECT_EQ(tape.grad(x)[0], 1.0);
  }
  {
    Tape tape;
    Tensor x = tape.watch(Tensor::from({1, 2, 3}));
    tape.backward(sum(mul(x, x)));
    EXPECT_EQ(tape.grad(x), (std::vector<double>{2, 4, 6}));
  }
  {
    // y = sum(3x + x∘x): branches sum to 3 + 2x.
    Tape tape;
    Tensor x = tape.watch(Tensor::from({-1, 0.5}));
    Tensor y = sum(add(scale(x, 3.0), mul(x, x)));
    tape.backward(y);
    EXPECT_EQ(tape.grad(x), (std::vector<double>{1.0, 4.0}));
  }
}

TEST(Backward, NonScalarRootIsContractError) {
  Tape tape;
  Tensor x = tape.watch(Tensor::from({1, 2}));
  EXPECT_THROW(tape.backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, NonFiniteForwardIsHardError) {
  EXPECT_THROW(scale(Tensor::from({1e308}), 10.0), NumericError);
}

TEST(FiniteDiff, SumIsExact) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({5, 3}, rng);
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(t); }, x), 1e-10);
}

TEST(FiniteDiff, SoftmaxCrossEntropyOfRandomLogits) {
  std::mt19937_64 rng(2);
  Tensor logits = random_tensor({3, 4, 4}, rng, -3, 3);
  std::vector<std::uint8_t> labels(16);
  for (auto& l : labels) l = std::uint8_t(rng() % 3);
  EXPECT_LT(finite_diff_check([&](const Tensor& t) { return softmax_cross_entropy(t, labels); }, logits, 1e-5), 1e-6);
}

// Every differentiable op against central differences on ≤64-element inputs.
TEST(FiniteDiff, EveryOpBelowOneInAMillion) {
  std::mt19937_64 rng(4);
  const double tol = 1e-6;
  auto w = random_tensor({4, 6}, rng);
  auto check = [&](const char* name, auto&& f, const Tensor& x) {
    const double err = finite_diff_check(f, x, 1e-5);
    EXPECT_LT(err, tol) << name;
  };
  // weight the output so the gradient is not uniform
  auto weighted = [&](const Tensor& y) {
    std::mt19937_64 r(99);
    return sum(mul(y, random_tensor(y.shape(), r)));
  };
  check("add", [&](const Tensor& x) { return weighted(add(x, mul(x, x))); }, random_tensor({3, 4}, rng));
  check("sub", [&](const Tensor& x) { return weighted(sub(mul(x, x), x)); }, random_tensor({3, 4}, rng));
  check("mean", [&](const Tensor& x) { return mean(mul(x, x)); }, random_tensor({3, 4}, rng));
  check("transpose", [&](const Tensor& x) { return weighted(transpose(x)); }, random_tensor({3, 4}, rng));
  check("linear", [&](const Tensor& x) { return weighted(gelu(linear(x, w, Tensor(Shape{6}, 0.1)))); }, random_tensor({5, 4}, rng));
  check("linear_w", [&](const Tensor& ww) {
    std::mt19937_64 r(4);
    return weighted(gelu(linear(random_tensor({5, 4}, r), ww, Tensor(Shape{6}))));
  }, w);
  check("softmax", [&](const Tensor& x) { return weighted(softmax_lastdim(x)); }, random_tensor({4, 5}, rng, -2, 2));
  check("layer_norm", [&](const Tensor& x) {
    return weighted(layer_norm(x, Tensor::from({1.5, -0.5, 2.0, 1.0}), Tensor::from({0.1, 0.2, 0.3, 0.4})));
  }, random_tensor({3, 4}, rng));
  check("layer_norm_gamma", [&](const Tensor& g) {
    std::mt19937_64 r(5);
    return weighted(layer_norm(random_tensor({3, 4}, r), g, Tensor(Shape{4})));
  }, random_tensor({4}, rng));
  check("gelu", [&](const Tensor& x) { return weighted(gelu(x)); }, random_tensor({20}, rng, -3, 3));
  check("leaky_relu", [&](const Tensor& x) { return weighted(leaky_relu(x, 0.2)); }, random_tensor({20}, rng));
  check("conv2d_x", [&](const Tensor& x) {
    std::mt19937_64 r(6);
    return weighted(conv2d(x, random_tensor({2, 2, 3, 3}, r), Tensor::from({0.1, -0.1}), {2, 1}));
  }, random_tensor({2, 5, 5}, rng));
  check("conv2d_w", [&](const Tensor& k) {
    std::mt19937_64 r(7);
    return weighted(conv2d(random_tensor({2, 5, 5}, r), k, Tensor::from({0.1, -0.1}), {2, 1}));
  }, random_tensor({2, 2, 3, 3}, rng));
  check("depthwise", [&](const Tensor& x) {
    std::mt19937_64 r(8);
    return weighted(depthwise_conv2d(x, random_tensor({2, 3, 3}, r), Tensor::from({0.0, 1.0}), {1, 1}));
  }, random_tensor({2, 4, 4}, rng));
  check("depthwise_w", [&](const Tensor& k) {
    std::mt19937_64 r(9);
    return weighted(depthwise_conv2d(random_tensor({2, 4, 4}, r), k, Tensor::from({0.0, 1.0}), {1, 1}));
  }, random_tensor({2, 3, 3}, rng));
  check("upsample", [&](const Tensor& x) { return weighted(upsample_bilinear(x, 7, 5)); }, random_tensor({2, 3, 2}, rng));
  check("space_to_depth", [&](const Tensor& x) { return weighted(space_to_depth(x, 4, 4, 2)); }, random_tensor({16, 3}, rng));
  check("tokens_chw", [&](const Tensor& x) { return weighted(chw_to_tokens(tokens_to_chw(gelu(x), 2, 3))); }, random_tensor({6, 2}, rng));
  check("concat", [&](const Tensor& x) {
    std::vector<Tensor> parts{x, gelu(x), Tensor(Shape{3, 1}, 0.5)};
    return weighted(concat_cols(parts));
  }, random_tensor({3, 2}, rng));
  check("attention_q", [&](const Tensor& q) {
    std::mt19937_64 r(10);
    return weighted(attention(q, random_tensor({3, 4}, r), random_tensor({3, 4}, r), 2));
  }, random_tensor({5, 4}, rng));
  check("attention_kv", [&](const Tensor& kv) {
    std::mt19937_64 r(11);
    return weighted(attention(random_tensor({5, 4}, r), kv, gelu(kv), 2));
  }, random_tensor({3, 4}, rng));
  check("softmax_channels", [&](const Tensor& x) { return weighted(softmax_channels(x)); }, random_tensor({3, 2, 2}, rng));
  check("bce", [&](const Tensor& x) { return bce_with_logits(x, 1.0); }, random_tensor({8}, rng, -4, 4));
  std::vector<std::uint8_t> labels{0, 1, 1, 0}, valid{1, 0, 1, 1};
  std::vector<double> cw{1.0, 10.0};
  check("weighted_ce", [&](const Tensor& x) { return softmax_cross_entropy(x, labels, valid, cw); }, random_tensor({2, 2, 2}, rng));
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({6, 8}, rng);
  auto run = [&] { return attention(gelu(x), x, x, 2); };
  Tensor a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Faults, InjectedBackwardFaultIsDetected) {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({10}, rng);
  inject_fault(Fault::kGeluBackward);
  const double bad = finite_diff_check([](const Tensor& t) { return sum(gelu(t)); }, x);
  inject_fault(Fault::kNone);
  EXPECT_GT(bad, 1e-3);
}

}  // namespace
}  // namespace qf
