// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "murtree/grad_check.hpp"
#include "murtree/losses.hpp"
#include "test_util.hpp"

using namespace murtree;
using murtree::testing::random_tensor;

namespace {

Tensor binary(Shape s, std::uint64_t seed, double p = 0.5) {
  const Stream r(seed);
  Tensor t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.uniform(i) < p ? 1.0f : 0.0f;
  return t;
}

}  // namespace

// ------------------------------------------------------------ soft IoU

TEST(SoftIouLoss, Examples) {
  Graph g;
  const Tensor y = binary(Shape{1, 8, 8}, 1);
  EXPECT_NEAR(g.value(soft_iou_loss(g, g.constant(y), y)).item(), 0.0, 1e-5);
  EXPECT_NEAR(g.value(soft_iou_loss(g, g.constant(map(y, [](float v) { return 1 - v; })), y)).item(), 1.0, 1e-5);
  Tensor half(Shape{1, 4, 4});
  for (std::size_t i = 0; i < 8; ++i) half[i] = 1.0f;
  EXPECT_NEAR(g.value(soft_iou_loss(g, g.constant(Tensor(Shape{1, 4, 4}, 0.5f)), half)).item(), 2.0 / 3.0, 1e-4);
}

TEST(SoftIouLoss, RangeMonotonicityAndErrors) {
  Graph g;
  const Tensor y = binary(Shape{64}, 2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const float l = g.value(soft_iou_loss(g, g.constant(random_tensor(Shape{64}, seed, 0, 1)), y)).item();
    EXPECT_GE(l, 0.0f);
    EXPECT_LE(l, 1.0f);
  }
  // Raising p on a positive pixel adds TP and removes FN: the loss falls.
  Tensor p(Shape{64}, 0.3f);
  const float before = g.value(soft_iou_loss(g, g.constant(p), y)).item();
  std::size_t pos = 0;
  while (y[pos] < 0.5f) ++pos;
  p[pos] = 0.9f;
  EXPECT_LT(g.value(soft_iou_loss(g, g.constant(p), y)).item(), before);
  p[pos] = 1.5f;
  EXPECT_THROW(soft_iou_loss(g, g.constant(p), y), std::domain_error);
  EXPECT_THROW(soft_iou_loss(g, g.constant(Tensor(Shape{63})), y), std::invalid_argument);
}

TEST(SoftIouLoss, Gradient) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor y = binary(Shape{1, 5, 5}, seed + 10);
    EXPECT_LT(grad_check([&](Graph& g, Var x) { return soft_iou_loss(g, sigmoid(g, x), y); },
                         random_tensor(Shape{1, 5, 5}, seed, -2, 2)),
              1e-3);
  }
}

// ---------------------------------------------------------- total loss

TEST(TotalLoss, Examples) {
  Graph g;
  auto terms = [&](float v) {
    const Var c = g.constant(Tensor::scalar(v));
    return LossTerms{c, c, c, c, c};
  };
  EXPECT_EQ(g.value(total_loss(g, terms(0.0f), LossWeights{})).item(), 0.0f);
  EXPECT_NEAR(g.value(total_loss(g, terms(1.0f), LossWeights{})).item(), 2.0, 1e-6);
  LossWeights bad;
  bad.kl = -0.1f;
  EXPECT_THROW(total_loss(g, terms(1.0f), bad), std::invalid_argument);
}

TEST(TotalLoss, GradientIsLinearInWeights) {
  auto grad_cdm = [](float lambda) {
    Graph g;
    const Var c = g.constant(Tensor::scalar(0.7f));
    const Var cdm = g.variable(Tensor::scalar(0.4f));
    LossWeights w;
    w.cdm = lambda;
    g.backward(total_loss(g, {c, c, c, c, cdm}, w));
    return g.grad(cdm).item();
  };
  EXPECT_EQ(grad_cdm(0.3f), 0.3f);
  EXPECT_EQ(grad_cdm(0.6f), 2 * grad_cdm(0.3f));
}

// ----------------------------------------------------------- confusion

TEST(Confusion, Examples) {
  const Tensor y = binary(Shape{1, 4, 4}, 3);
  const auto same = confusion(y, y);
  EXPECT_EQ(same.fp, 0u);
  EXPECT_EQ(same.fn, 0u);
  const auto all = confusion(Tensor(Shape{1, 4, 4}, 1.0f), Tensor(Shape{1, 4, 4}));
  EXPECT_EQ(all.fp, 16u);
  EXPECT_EQ(all.tp + all.fn + all.tn, 0u);
  EXPECT_THROW(confusion(y, Tensor(Shape{1, 4, 5})), std::invalid_argument);
}

TEST(Confusion, MatchesPixelLoopOracle) {
  const Tensor p = random_tensor(Shape{1, 32, 32}, 4, 0, 1), y = binary(Shape{1, 32, 32}, 5);
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] >= 0.5f, b = y[i] == 1.0f;
    tp += a && b;
    fp += a && !b;
    fn += !a && b;
    tn += !a && !b;
  }
  const auto c = confusion(p, y);
  EXPECT_EQ(c.tp, tp);
  EXPECT_EQ(c.fp, fp);
  EXPECT_EQ(c.fn, fn);
  EXPECT_EQ(c.tn, tn);
  EXPECT_EQ(c.total(), 1024u);
}

// ------------------------------------------------------------- metrics

TEST(Metrics, Examples) {
  const auto perfect = metrics({10, 0, 0, 6});
  EXPECT_EQ(perfect.iou, 1.0);
  EXPECT_EQ(perfect.miou, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  const auto m = metrics({3, 1, 1, 0});
  EXPECT_NEAR(m.iou, 0.6, 1e-12);
  EXPECT_NEAR(m.precision, 0.75, 1e-12);
  EXPECT_NEAR(m.recall, 0.75, 1e-12);
  EXPECT_NEAR(m.f1, 0.75, 1e-12);
}

TEST(Metrics, EmptyClassesCountAsPerfect) {
  const auto none = metrics({0, 0, 0, 16});
  EXPECT_EQ(none.iou, 1.0);
  EXPECT_EQ(none.precision, 1.0);
  EXPECT_EQ(none.recall, 1.0);
  EXPECT_EQ(none.miou, 1.0);
  const auto missed = metrics({0, 0, 4, 12});
  EXPECT_EQ(missed.iou, 0.0);
  EXPECT_EQ(missed.recall, 0.0);
  EXPECT_EQ(missed.f1, 0.0);
  const auto wrong = metrics({0, 5, 4, 7});  // precision and recall both 0
  EXPECT_EQ(wrong.f1, 0.0);
}

TEST(Metrics, MatchesFormulaOracle) {
  const Stream r(6);
  for (std::uint64_t t = 0; t < 1000; ++t) {
    const ConfusionCounts c{1 + r.below(1000, 4 * t), r.below(1000, 4 * t + 1), r.below(1000, 4 * t + 2),
                            1 + r.below(1000, 4 * t + 3)};
    const double tp = c.tp, fp = c.fp, fn = c.fn, tn = c.tn;
    const double p = tp / (tp + fp), rc = tp / (tp + fn);
    const auto m = metrics(c);
    EXPECT_NEAR(m.iou, tp / (tp + fp + fn), 1e-9);
    EXPECT_NEAR(m.miou, 0.5 * (tp / (tp + fp + fn) + tn / (tn + fp + fn)), 1e-9);
    EXPECT_NEAR(m.f1, 2 * p * rc / (p + rc), 1e-9);
  }
}

// ----------------------------------------------------------- optimizer

TEST(SgdStep, Examples) {
  ParamStore p, g;
  p.set("w", Tensor::vector({1.0f, -3.0f}));
  g.set("w", Tensor(Shape{2}));
  sgd_step(p, g, 0.01f);
  EXPECT_EQ(p.at("w")[0], 1.0f);
  EXPECT_EQ(p.at("w")[1], -3.0f);
  g.set("w", Tensor::vector({2.0f, 0.0f}));
  sgd_step(p, g, 0.01f);
  EXPECT_FLOAT_EQ(p.at("w")[0], 0.98f);
  EXPECT_THROW(sgd_step(p, g, 0.0f), std::invalid_argument);
  EXPECT_THROW(sgd_step(p, g, 0.01f, 0.9f), std::invalid_argument);
  g.set("w", Tensor(Shape{3}));
  EXPECT_THROW(sgd_step(p, g, 0.01f), std::invalid_argument);
}

TEST(SgdStep, QuadraticBowlConverges) {
  ParamStore p;
  p.set("w", Tensor::vector({1.0f, 1.0f}));
  for (int it = 0; it < 1000; ++it) {
    Graph g;
    ParamBinder b(g, p);
    const Var w = b("w");
    g.backward(sum(g, mul(g, w, w)));
    sgd_step(p, b.gradients(), 0.1f);
  }
  const Tensor& w = p.at("w");
  EXPECT_LT(w[0] * w[0] + w[1] * w[1], 1e-6);
}

TEST(SgdStep, MomentumAccumulatesVelocity) {
  ParamStore p, g, v;
  p.set("w", Tensor::scalar(0.0f));
  g.set("w", Tensor::scalar(1.0f));
  sgd_step(p, g, 0.1f, 0.5f, &v);
  sgd_step(p, g, 0.1f, 0.5f, &v);
  EXPECT_FLOAT_EQ(v.at("w").item(), 1.5f);
  EXPECT_FLOAT_EQ(p.at("w").item(), -0.25f);
}

TEST(ClipGradNorm, ScalesOnlyAboveTheCap) {
  ParamStore g;
  g.set("a", Tensor::vector({3.0f}));
  g.set("b", Tensor::vector({4.0f}));
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 10.0), 5.0);
  EXPECT_EQ(g.at("a")[0], 3.0f);
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_FLOAT_EQ(g.at("a")[0], 0.6f);
  EXPECT_FLOAT_EQ(g.at("b")[0], 0.8f);
  ParamStore h;
  h.set("a", Tensor::vector({30.0f}));
  clip_grad_norm(h, 0.0);
  EXPECT_EQ(h.at("a")[0], 30.0f);
}
