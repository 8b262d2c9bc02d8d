// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "murtree/ops.hpp"
#include "murtree/params.hpp"

namespace murtree {

inline constexpr double kSoftIouEps = 1e-6;
inline constexpr double kMetricEps = 1e-12;

/// 1 - (TP + eps) / (TP + FP + FN + eps) over soft counts.
inline Var soft_iou_loss(Graph& g, Var prob, const Tensor& target) {
  const Tensor& p = g.value(prob);
  if (!(p.shape() == target.shape())) {
    throw std::invalid_argument("soft_iou_loss: prob " + p.shape().str() + " vs target " + target.shape().str());
  }
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0f && p[i] <= 1.0f)) {
      throw std::domain_error("soft_iou_loss: probability " + std::to_string(p[i]) + " outside [0,1] at " +
                              std::to_string(i));
    }
    const double pi = p[i], yi = target[i];
    tp += pi * yi;
    fp += pi * (1.0 - yi);
    fn += (1.0 - pi) * yi;
  }
  const double num = tp + kSoftIouEps, den = tp + fp + fn + kSoftIouEps;
  return g.record("soft_iou_loss", Tensor::scalar(static_cast<float>(1.0 - num / den)), {prob},
                  [prob, target, num, den](Graph& gr, const Tensor& go) {
                    // den = sum p + sum y - sum p*y, num = sum p*y + eps.
                    Tensor& gp = gr.grad_buffer(prob);
                    const double s = -static_cast<double>(go[0]) / (den * den);
                    for (std::size_t i = 0; i < gp.size(); ++i) {
                      const double y = target[i];
                      gp[i] += static_cast<float>(s * (y * den - num * (1.0 - y)));
                    }
                  });
}

struct LossWeights {
  float seg = 1.0f;
  float edge = 0.3f;
  float mse = 0.2f;
  float kl = 0.2f;
  float cdm = 0.3f;

  void validate() const {
    if (seg < 0 || edge < 0 || mse < 0 || kl < 0 || cdm < 0) throw std::invalid_argument("loss weights must be >= 0");
  }
};

struct LossTerms {
  Var seg, edge, mse, kl, cdm;
};

/// seg*L_seg + edge*L_edge + (mse*L_MSE + kl*L_KL) + cdm*L_CDM.
inline Var total_loss(Graph& g, const LossTerms& t, const LossWeights& w) {
  w.validate();
  return weighted_sum(g, {t.seg, t.edge, t.mse, t.kl, t.cdm}, {w.seg, w.edge, w.mse, w.kl, w.cdm});
}

// ------------------------------------------------------------ metrics

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  [[nodiscard]] std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

/// Tree (value >= 0.5) is the positive class.
inline ConfusionCounts confusion(const Tensor& pred, const Tensor& label) {
  if (!(pred.shape() == label.shape())) {
    throw std::invalid_argument("confusion: pred " + pred.shape().str() + " vs label " + label.shape().str());
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5f, y = label[i] >= 0.5f;
    if (p && y) ++c.tp;
    else if (p) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct Metrics {
  double miou = 0, iou = 0, precision = 0, recall = 0, f1 = 0;
};

inline Metrics metrics(const ConfusionCounts& c) {
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn),
             tn = static_cast<double>(c.tn);
  auto ratio = [](double a, double b) { return b <= 0.0 ? (a <= 0.0 ? 1.0 : 0.0) : a / std::max(b, kMetricEps); };
  Metrics m;
  m.iou = ratio(tp, tp + fp + fn);
  // Background: its TP is tn, its FP is our FN and vice versa.
  const double iou_bg = ratio(tn, tn + fn + fp);
  m.miou = 0.5 * (m.iou + iou_bg);
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn);
  return m;
}

// ------------------------------------------------------------ optimizer

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParamStore& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (float v : g.data()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto& [name, g] : grads)
      for (float& v : g.data()) v *= s;
  }
  return norm;
}

/// p <- p - lr * (v <- momentum * v + g). With momentum 0 this is plain SGD.
inline void sgd_step(ParamStore& params, const ParamStore& grads, float lr, float momentum = 0.0f,
                     ParamStore* velocity = nullptr) {
  if (!(lr > 0.0f)) throw std::invalid_argument("sgd_step: lr must be positive");
  if (momentum != 0.0f && velocity == nullptr) throw std::invalid_argument("sgd_step: momentum needs a velocity store");
  for (auto& [name, p] : params) {
    if (!grads.contains(name)) continue;
    const Tensor& gr = grads.at(name);
    if (!(gr.shape() == p.shape())) throw std::invalid_argument("sgd_step: gradient shape mismatch for " + name);
    if (momentum == 0.0f) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * gr[i];
      continue;
    }
    if (!velocity->contains(name)) velocity->set(name, Tensor(p.shape()));
    Tensor& v = velocity->at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + gr[i];
      p[i] -= lr * v[i];
    }
  }
}

}  // namespace murtree
