// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "murtree/grad_check.hpp"
#include "murtree/ops.hpp"
#include "test_util.hpp"

using namespace murtree;
using murtree::testing::random_tensor;

namespace {

// Contracts y with fixed random weights so every output element matters.
Var probe(Graph& g, Var y, std::uint64_t seed) {
  const Tensor w = random_tensor(g.value(y).shape(), seed ^ 0xabcdef);
  return sum(g, mul(g, y, g.constant(w)));
}

Tensor eval(const std::function<Var(Graph&)>& f) {
  Graph g;
  return g.value(f(g));
}

}  // namespace

// ------------------------------------------------------------ affine

TEST(Affine, Examples) {
  const Tensor eye(Shape{2, 2}, std::vector<float>{1, 0, 0, 1});
  Tensor y = eval([&](Graph& g) {
    return affine(g, g.constant(Tensor::vector({1, 0})), g.constant(eye), g.constant(Tensor(Shape{2})));
  });
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_EQ(y[1], 0.0f);
  y = eval([](Graph& g) {
    return affine(g, g.constant(Tensor::vector({1, 2})), g.constant(Tensor(Shape{2, 1}, 1.0f)),
                  g.constant(Tensor::vector({3})));
  });
  EXPECT_EQ(y[0], 6.0f);
}

TEST(Affine, MatchesTripleLoop) {
  const Tensor x = random_tensor(Shape{4, 3}, 1), w = random_tensor(Shape{3, 2}, 2), b = random_tensor(Shape{2}, 3);
  const Tensor y = eval([&](Graph& g) { return affine(g, g.constant(x), g.constant(w), g.constant(b)); });
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t j = 0; j < 2; ++j) {
      float acc = b[j];
      for (std::size_t i = 0; i < 3; ++i) acc += x.at(m, i) * w.at(i, j);
      EXPECT_EQ(y.at(m, j), acc);
    }
}

TEST(Affine, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    affine(g, g.constant(Tensor(Shape{2, 3})), g.constant(Tensor(Shape{4, 2})), g.constant(Tensor(Shape{2})));
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("[2,3]"), std::string::npos);
    EXPECT_NE(m.find("[4,2]"), std::string::npos);
  }
}

// -------------------------------------------------------- activations

TEST(Activation, Examples) {
  const Tensor r = eval([](Graph& g) { return activation(g, g.constant(Tensor::vector({-1, 2})), Activation::relu); });
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 2.0f);
  const Tensor s = eval([](Graph& g) { return activation(g, g.constant(Tensor::vector({0})), Activation::sigmoid); });
  EXPECT_EQ(s[0], 0.5f);
  Graph g;
  const Var x = g.variable(Tensor::vector({0}));
  g.backward(sum(g, sigmoid(g, x)));
  EXPECT_NEAR(g.grad(x)[0], 0.25, 1e-6);
  const double numeric = (1.0 / (1.0 + std::exp(-1e-3)) - 1.0 / (1.0 + std::exp(1e-3))) / 2e-3;
  EXPECT_NEAR(g.grad(x)[0], numeric, 1e-4);
}

TEST(Activation, SigmoidIsStableForLargeInputs) {
  const Tensor s = eval([](Graph& g) { return sigmoid(g, g.constant(Tensor::vector({-80, 80}))); });
  EXPECT_GE(s[0], 0.0f);
  EXPECT_EQ(s[1], 1.0f);
}

// ------------------------------------------------------------ softmax

TEST(Softmax, Examples) {
  Tensor y = eval([](Graph& g) { return softmax(g, g.constant(Tensor::vector({0, 0, 0}))); });
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3.0, 1e-7);
  y = eval([](Graph& g) { return softmax(g, g.constant(Tensor::vector({1000, 0}))); });
  EXPECT_NEAR(y[0], 1.0, 1e-6);
  EXPECT_NEAR(y[1], 0.0, 1e-6);
}

TEST(Softmax, SumsToOneAndKeepsOrder) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_tensor(Shape{16}, seed, -10, 10);
    const Tensor y = eval([&](Graph& g) { return softmax(g, g.constant(x)); });
    double total = 0;
    for (float v : y.data()) total += v;
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_EQ(std::max_element(x.data().begin(), x.data().end()) - x.data().begin(),
              std::max_element(y.data().begin(), y.data().end()) - y.data().begin());
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j)
        if (x[i] < x[j]) {
          EXPECT_LE(y[i], y[j]);
        }
  }
}

// ------------------------------------------------------------ conv2d

TEST(Conv2d, DeltaKernelIsIdentity) {
  const Tensor x = random_tensor(Shape{2, 5, 5}, 4);
  Tensor k(Shape{2, 2, 3, 3});
  k[((0 * 2 + 0) * 3 + 1) * 3 + 1] = 1.0f;
  k[((1 * 2 + 1) * 3 + 1) * 3 + 1] = 1.0f;
  const Tensor y = eval([&](Graph& g) { return conv2d(g, g.constant(x), g.constant(k), g.constant(Tensor(Shape{2}))); });
  EXPECT_TRUE(bitwise_equal(y, x));
}

TEST(Conv2d, OnesKernelOnConstantImage) {
  const Tensor x(Shape{1, 4, 4}, 2.0f), k(Shape{1, 1, 3, 3}, 1.0f);
  const Tensor y = eval([&](Graph& g) { return conv2d(g, g.constant(x), g.constant(k), g.constant(Tensor(Shape{1}))); });
  EXPECT_EQ(y.at(0, 1, 1), 18.0f);
  EXPECT_EQ(y.at(0, 0, 0), 8.0f);
  EXPECT_EQ(y.at(0, 0, 1), 12.0f);
}

TEST(Conv2d, MatchesSixLoopOracle) {
  for (std::size_t stride : {1u, 2u}) {
    const Tensor x = random_tensor(Shape{2, 5, 5}, 5), k = random_tensor(Shape{3, 2, 3, 3}, 6),
                 b = random_tensor(Shape{3}, 7);
    const Tensor y =
        eval([&](Graph& g) { return conv2d(g, g.constant(x), g.constant(k), g.constant(b), stride); });
    const long H = 5, W = 5, OH = (H - 1) / static_cast<long>(stride) + 1;
    ASSERT_EQ(y.dim(1), static_cast<std::size_t>(OH));
    for (long f = 0; f < 3; ++f)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OH; ++ox) {
          double acc = b[f];
          for (long c = 0; c < 2; ++c)
            for (long ky = 0; ky < 3; ++ky)
              for (long kx = 0; kx < 3; ++kx) {
                const long iy = oy * static_cast<long>(stride) + ky - 1, ix = ox * static_cast<long>(stride) + kx - 1;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += static_cast<double>(k[((f * 2 + c) * 3 + ky) * 3 + kx]) * x.at(c, iy, ix);
              }
          EXPECT_NEAR(y.at(f, oy, ox), acc, 1e-5);
        }
  }
}

TEST(Conv2d, ChannelMismatchIsRejected) {
  Graph g;
  EXPECT_THROW(conv2d(g, g.constant(Tensor(Shape{2, 4, 4})), g.constant(Tensor(Shape{1, 3, 3, 3})),
                      g.constant(Tensor(Shape{1}))),
               std::invalid_argument);
}

// ---------------------------------------------------------- upsample

TEST(Upsample, ConstantAndSinglePixel) {
  const Tensor c = eval([](Graph& g) { return bilinear_upsample2x(g, g.constant(Tensor(Shape{2, 3, 3}, 0.7f))); });
  for (float v : c.data()) EXPECT_FLOAT_EQ(v, 0.7f);
  const Tensor one = eval([](Graph& g) { return bilinear_upsample2x(g, g.constant(Tensor(Shape{1, 1, 1}, 4.0f))); });
  ASSERT_EQ(one.size(), 4u);
  for (float v : one.data()) EXPECT_EQ(v, 4.0f);
}

TEST(Upsample, RampMatchesFormulaOracle) {
  const Tensor x(Shape{1, 2, 2}, std::vector<float>{0, 1, 2, 3});
  const Tensor y = eval([&](Graph& g) { return bilinear_upsample2x(g, g.constant(x)); });
  auto src = [](int o) { return std::clamp((o + 0.5) / 2.0 - 0.5, 0.0, 1.0); };
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox) {
      const double sy = src(oy), sx = src(ox);
      const double v = (1 - sy) * ((1 - sx) * 0 + sx * 1) + sy * ((1 - sx) * 2 + sx * 3);
      EXPECT_NEAR(y.at(0, oy, ox), v, 1e-6);
    }
}

// --------------------------------------------------------------- pool

TEST(GlobalMaxPool, Examples) {
  Tensor spike(Shape{2, 3, 3});
  spike.at(0, 2, 1) = 5.0f;
  spike.at(1, 0, 0) = -1.0f;
  for (std::size_t i = 9; i < 18; ++i) spike[i] -= 2.0f;
  spike.at(1, 0, 0) = -1.0f;
  const Tensor y = eval([&](Graph& g) { return global_max_pool(g, g.constant(spike)); });
  EXPECT_EQ(y[0], 5.0f);
  EXPECT_EQ(y[1], -1.0f);
  const Tensor x = random_tensor(Shape{3, 4, 5}, 8);
  const Tensor z = eval([&](Graph& g) { return global_max_pool(g, g.constant(x)); });
  for (std::size_t c = 0; c < 3; ++c) {
    float m = x[c * 20];
    for (std::size_t p = 0; p < 20; ++p) m = std::max(m, x[c * 20 + p]);
    EXPECT_EQ(z[c], m);
  }
}

// --------------------------------------------------------- batch norm

TEST(BatchNorm, Examples) {
  Tensor x = random_tensor(Shape{3, 8, 8}, 9, -3, 5);
  for (std::size_t p = 0; p < 64; ++p) x[p] = 1.5f;  // constant channel 0
  const Tensor y = eval([&](Graph& g) {
    return batch_norm(g, g.constant(x), g.constant(Tensor(Shape{3}, 1.0f)), g.constant(Tensor(Shape{3})));
  });
  for (std::size_t p = 0; p < 64; ++p) EXPECT_EQ(y[p], 0.0f);
  for (std::size_t c = 1; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t p = 0; p < 64; ++p) m += y[c * 64 + p];
    m /= 64;
    for (std::size_t p = 0; p < 64; ++p) v += (y[c * 64 + p] - m) * (y[c * 64 + p] - m);
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(v / 64, 1.0, 1e-3);
  }
  const Tensor z = eval([&](Graph& g) {
    return batch_norm(g, g.constant(x), g.constant(Tensor(Shape{3})), g.constant(Tensor::vector({1, 2, 3})));
  });
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(z[c * 64 + 5], static_cast<float>(c + 1));
}

// ------------------------------------------------------ determinism

TEST(Ops, BitwiseDeterministic) {
  const Tensor x = random_tensor(Shape{4, 6, 6}, 10), k = random_tensor(Shape{4, 4, 3, 3}, 11);
  auto run = [&] {
    Graph g;
    const Var xv = g.variable(x);
    const Var y = batch_norm(g, conv2d(g, xv, g.constant(k), g.constant(Tensor(Shape{4}))), g.constant(Tensor(Shape{4}, 1.0f)),
                             g.constant(Tensor(Shape{4})));
    g.backward(probe(g, y, 1));
    return std::pair{g.value(y), g.grad(xv)};
  };
  const auto a = run(), b = run();
  EXPECT_TRUE(bitwise_equal(a.first, b.first));
  EXPECT_TRUE(bitwise_equal(a.second, b.second));
}

// ---------------------------------------------------------- gradients

struct GradCase {
  const char* name;
  Shape shape;
  std::function<Var(Graph&, Var, std::uint64_t)> f;
  double lo = -1.0, hi = 1.0;
};

class OpGradient : public ::testing::TestWithParam<GradCase> {};

TEST_P(OpGradient, TenSeeds) {
  const GradCase& c = GetParam();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor x = random_tensor(c.shape, seed * 31 + 1, c.lo, c.hi);
    // Keep kinks (relu at 0) well outside the finite-difference step.
    for (float& v : x.data())
      if (std::abs(v) < 0.01f) v = v < 0 ? -0.01f : 0.01f;
    const double err = grad_check([&](Graph& g, Var v) { return probe(g, c.f(g, v, seed), seed); }, x);
    EXPECT_LT(err, 1e-3) << c.name << " seed " << seed;
  }
}

namespace {

Var const_of(Graph& g, Shape s, std::uint64_t seed) { return g.constant(random_tensor(s, seed)); }

}  // namespace

INSTANTIATE_TEST_SUITE_P(
    Ops, OpGradient,
    ::testing::Values(
        GradCase{"affine_x", Shape{3, 4},
                 [](Graph& g, Var x, std::uint64_t s) {
                   return affine(g, x, const_of(g, Shape{4, 2}, s + 100), const_of(g, Shape{2}, s + 200));
                 }},
        GradCase{"affine_w", Shape{4, 2},
                 [](Graph& g, Var w, std::uint64_t s) {
                   return affine(g, const_of(g, Shape{3, 4}, s + 100), w, const_of(g, Shape{2}, s + 200));
                 }},
        GradCase{"relu", Shape{12}, [](Graph& g, Var x, std::uint64_t) { return relu(g, x); }},
        GradCase{"sigmoid", Shape{12}, [](Graph& g, Var x, std::uint64_t) { return sigmoid(g, x); }, -4, 4},
        GradCase{"exp", Shape{8}, [](Graph& g, Var x, std::uint64_t) { return murtree::exp(g, x); }},
        GradCase{"softmax", Shape{2, 6}, [](Graph& g, Var x, std::uint64_t) { return softmax(g, x); }, -3, 3},
        GradCase{"conv2d_x", Shape{2, 5, 5},
                 [](Graph& g, Var x, std::uint64_t s) {
                   return conv2d(g, x, const_of(g, Shape{3, 2, 3, 3}, s + 1), const_of(g, Shape{3}, s + 2));
                 }},
        GradCase{"conv2d_k_stride2", Shape{3, 2, 3, 3},
                 [](Graph& g, Var k, std::uint64_t s) {
                   return conv2d(g, const_of(g, Shape{2, 6, 5}, s + 1), k, const_of(g, Shape{3}, s + 2), 2);
                 }},
        GradCase{"conv1x1", Shape{3, 4, 4},
                 [](Graph& g, Var x, std::uint64_t s) {
                   return conv1x1(g, x, const_of(g, Shape{3, 2}, s + 1), const_of(g, Shape{2}, s + 2));
                 }},
        GradCase{"upsample", Shape{2, 3, 4}, [](Graph& g, Var x, std::uint64_t) { return bilinear_upsample2x(g, x); }},
        GradCase{"max_pool", Shape{2, 4, 4}, [](Graph& g, Var x, std::uint64_t) { return global_max_pool(g, x); }},
        GradCase{"batch_norm", Shape{2, 4, 4},
                 [](Graph& g, Var x, std::uint64_t s) {
                   return batch_norm(g, x, const_of(g, Shape{2}, s + 1), const_of(g, Shape{2}, s + 2));
                 }},
        GradCase{"batch_norm_gamma", Shape{3},
                 [](Graph& g, Var gm, std::uint64_t s) {
                   return batch_norm(g, const_of(g, Shape{3, 3, 3}, s + 1), gm, const_of(g, Shape{3}, s + 2));
                 }},
        GradCase{"mul", Shape{6}, [](Graph& g, Var x, std::uint64_t s) { return mul(g, x, const_of(g, Shape{6}, s)); }},
        GradCase{"sub", Shape{6}, [](Graph& g, Var x, std::uint64_t s) { return sub(g, const_of(g, Shape{6}, s), x); }},
        GradCase{"channel_scale", Shape{3, 1, 1},
                 [](Graph& g, Var w, std::uint64_t s) { return channel_scale(g, const_of(g, Shape{3, 2, 2}, s), w); }},
        GradCase{"spatial_scale", Shape{1, 3, 3},
                 [](Graph& g, Var m, std::uint64_t s) { return spatial_scale(g, const_of(g, Shape{2, 3, 3}, s), m); }},
        GradCase{"concat", Shape{1, 2, 2},
                 [](Graph& g, Var x, std::uint64_t s) { return concat_channels(g, const_of(g, Shape{2, 2, 2}, s), x); }},
        GradCase{"transpose_reshape", Shape{3, 4},
                 [](Graph& g, Var x, std::uint64_t) { return reshape(g, transpose2d(g, x), Shape{2, 6}); }},
        GradCase{"gather_rows", Shape{5, 2},
                 [](Graph& g, Var x, std::uint64_t) {
                   const std::size_t idx[] = {4, 1, 1};
                   return gather_rows(g, x, idx);
                 }},
        GradCase{"weighted_sum", Shape{},
                 [](Graph& g, Var x, std::uint64_t) {
                   return weighted_sum(g, {x, mul(g, x, x)}, {0.5f, 2.0f});
                 }},
        GradCase{"mean", Shape{7}, [](Graph& g, Var x, std::uint64_t) { return mean(g, x); }}),
    [](const auto& info) { return std::string(info.param.name); });
