// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Cross-modal distillation: both patch sequences go through their own affine
// head, and the loss is one minus the mean per-patch cosine similarity.

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "murtree/ops.hpp"
#include "murtree/params.hpp"

namespace murtree::cdm {

inline constexpr double kNormEps = 1e-8;

struct ProjectionHeads {
  Dense primary;
  Dense auxiliary;
};

inline void init(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, std::uint64_t seed) {
  init_dense(store, prefix + ".proj_primary", in, out, seed, 1.0f);
  init_dense(store, prefix + ".proj_auxiliary", in, out, seed, 1.0f);
}

inline ProjectionHeads bind(ParamBinder& p, const std::string& prefix) {
  return {p.dense(prefix + ".proj_primary"), p.dense(prefix + ".proj_auxiliary")};
}

/// Rowwise affine [N, D] -> [N, D_proj].
inline Var project(Graph& g, Var x, const Dense& head) {
  const Tensor& xv = g.value(x);
  const Tensor& w = g.value(head.weight);
  require_rank(xv, 2, "cdm::project");
  if (w.rank() != 2 || w.dim(0) != xv.dim(1)) {
    throw std::invalid_argument("cdm::project: features " + xv.shape().str() + " do not fit head " + w.shape().str());
  }
  return affine(g, x, head.weight, head.bias);
}

/// 1 - mean_i cos(p_i, a_i), in [0, 2].
inline Var cdm_loss(Graph& g, Var p, Var a) {
  const Tensor& pv = g.value(p);
  const Tensor& av = g.value(a);
  if (!(pv.shape() == av.shape()) || pv.rank() != 2) {
    throw std::invalid_argument("cdm_loss: shapes " + pv.shape().str() + " vs " + av.shape().str());
  }
  const std::size_t N = pv.dim(0), D = pv.dim(1);
  if (N == 0) throw std::invalid_argument("cdm_loss: empty sequence");
  struct Row {
    double pp, aa, pa, denom;
  };
  std::vector<Row> rows(N);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    Row r{0, 0, 0, 0};
    for (std::size_t k = 0; k < D; ++k) {
      const double x = pv[i * D + k], y = av[i * D + k];
      r.pp += x * x;
      r.aa += y * y;
      r.pa += x * y;
    }
    r.denom = std::max(std::sqrt(r.pp) * std::sqrt(r.aa), kNormEps);
    total += r.pa / r.denom;
    rows[i] = r;
  }
  const auto loss = static_cast<float>(1.0 - total / static_cast<double>(N));
  return g.record("cdm_loss", Tensor::scalar(loss), {p, a}, [p, a, rows = std::move(rows), N, D](Graph& gr, const Tensor& go) {
    const Tensor& pv = gr.value(p);
    const Tensor& av = gr.value(a);
    Tensor* gp = gr.requires_grad(p) ? &gr.grad_buffer(p) : nullptr;
    Tensor* ga = gr.requires_grad(a) ? &gr.grad_buffer(a) : nullptr;
    const double s = -static_cast<double>(go[0]) / static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const Row& r = rows[i];
      // Cosine is undefined at a zero row; treat that row as a constant.
      if (std::sqrt(r.pp) * std::sqrt(r.aa) < kNormEps) continue;
      const double c = r.pa / r.denom;
      for (std::size_t k = 0; k < D; ++k) {
        const double x = pv[i * D + k], y = av[i * D + k];
        const double dx = y / r.denom - c * x / r.pp, dy = x / r.denom - c * y / r.aa;
        if (gp) (*gp)[i * D + k] += static_cast<float>(s * dx);
        if (ga) (*ga)[i * D + k] += static_cast<float>(s * dy);
      }
    }
  });
}

/// ||p_i - a_i||^2 per row, for discrepancy heatmaps.
inline Tensor discrepancy(const Tensor& p, const Tensor& a) {
  if (!(p.shape() == a.shape()) || p.rank() != 2) {
    throw std::invalid_argument("cdm::discrepancy: shapes " + p.shape().str() + " vs " + a.shape().str());
  }
  const std::size_t N = p.dim(0), D = p.dim(1);
  Tensor out{Shape{N}};
  for (std::size_t i = 0; i < N; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < D; ++k) {
      const double d = static_cast<double>(p[i * D + k]) - a[i * D + k];
      acc += d * d;
    }
    out[i] = static_cast<float>(acc);
  }
  return out;
}

}  // namespace murtree::cdm
