// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable tensor kernels. Every op reads its inputs from the graph,
// records one node, and accumulates input gradients in a fixed row-major
// order so results are bitwise reproducible.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "murtree/autograd.hpp"
#include "murtree/tensor.hpp"

namespace murtree {

namespace detail {

inline std::string shapes(const Tensor& a, const Tensor& b) { return a.shape().str() + " and " + b.shape().str(); }

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape())) throw std::invalid_argument(std::string(op) + ": shape mismatch " + shapes(a, b));
}

template <class Fwd, class Deriv>
Var unary(Graph& g, Var x, std::string_view name, Fwd fwd, Deriv deriv) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return g.record(name, std::move(out), {x}, [x, deriv](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    Tensor& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * deriv(xv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- dense

/// out = x W + b over the last extent; leading extents are treated as rows.
inline Var affine(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.rank() == 0 || wv.rank() != 2 || bv.rank() != 1 || xv.shape().back() != wv.dim(0) ||
      wv.dim(1) != bv.dim(0)) {
    throw std::invalid_argument("affine: incompatible shapes x" + xv.shape().str() + " W" + wv.shape().str() + " b" +
                                bv.shape().str());
  }
  const std::size_t din = wv.dim(0), dout = wv.dim(1), rows = xv.size() / din;
  std::vector<std::size_t> dims(xv.shape().dims().begin(), xv.shape().dims().end());
  dims.back() = dout;
  Tensor out{Shape(dims)};
  for (std::size_t m = 0; m < rows; ++m) {
    float* o = &out[m * dout];
    std::copy_n(bv.data().data(), dout, o);
    for (std::size_t i = 0; i < din; ++i) {
      const float xi = xv[m * din + i];
      const float* wr = &wv[i * dout];
      for (std::size_t j = 0; j < dout; ++j) o[j] += xi * wr[j];
    }
  }
  return g.record("affine", std::move(out), {x, w, b}, [x, w, b, din, dout, rows](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& wv = gr.value(w);
    if (gr.requires_grad(x)) {
      Tensor& gx = gr.grad_buffer(x);
      for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t i = 0; i < din; ++i) {
          float acc = 0.0f;
          for (std::size_t j = 0; j < dout; ++j) acc += go[m * dout + j] * wv[i * dout + j];
          gx[m * din + i] += acc;
        }
    }
    if (gr.requires_grad(w)) {
      Tensor& gw = gr.grad_buffer(w);
      for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t i = 0; i < din; ++i) {
          const float xi = xv[m * din + i];
          for (std::size_t j = 0; j < dout; ++j) gw[i * dout + j] += xi * go[m * dout + j];
        }
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_buffer(b);
      for (std::size_t m = 0; m < rows; ++m)
        for (std::size_t j = 0; j < dout; ++j) gb[j] += go[m * dout + j];
    }
  });
}

// ----------------------------------------------------------- activation

enum class Activation { relu, sigmoid };

inline Var relu(Graph& g, Var x) {
  return detail::unary(
      g, x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v) { return v > 0.0f ? 1.0f : 0.0f; });
}

inline float sigmoid_value(float v) {
  if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
  const float e = std::exp(v);
  return e / (1.0f + e);
}

inline Var sigmoid(Graph& g, Var x) {
  return detail::unary(g, x, "sigmoid", sigmoid_value, [](float v) {
    const float s = sigmoid_value(v);
    return s * (1.0f - s);
  });
}

inline Var activation(Graph& g, Var x, Activation kind) {
  return kind == Activation::relu ? relu(g, x) : sigmoid(g, x);
}

inline Var exp(Graph& g, Var x) {
  return detail::unary(g, x, "exp", [](float v) { return std::exp(v); }, [](float v) { return std::exp(v); });
}

/// Clamp to [lo, hi]; zero gradient outside the interval.
inline Var clamp(Graph& g, Var x, float lo, float hi) {
  return detail::unary(
      g, x, "clamp", [lo, hi](float v) { return std::clamp(v, lo, hi); },
      [lo, hi](float v) { return (v >= lo && v <= hi) ? 1.0f : 0.0f; });
}

/// Softmax over the last extent, with max subtraction.
inline Var softmax(Graph& g, Var v) {
  const Tensor& xv = g.value(v);
  if (xv.rank() == 0 || xv.shape().back() == 0) throw std::invalid_argument("softmax: empty input");
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = &xv[r * n];
    float* y = &out[r * n];
    const float mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(static_cast<double>(x[i]) - mx);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<float>(std::exp(static_cast<double>(x[i]) - mx) / total);
  }
  return g.record("softmax", out, {v}, [v, out, n, rows](Graph& gr, const Tensor& go) {
    Tensor& gx = gr.grad_buffer(v);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += static_cast<double>(go[r * n + i]) * out[r * n + i];
      for (std::size_t i = 0; i < n; ++i)
        gx[r * n + i] += static_cast<float>(out[r * n + i] * (go[r * n + i] - dot));
    }
  });
}

// ---------------------------------------------------------- convolution

/// 3x3 cross-correlation, zero padding 1. x:[C,H,W], k:[F,C,3,3], b:[F].
/// Output extent per axis is (n - 1) / stride + 1.
inline Var conv2d(Graph& g, Var x, Var k, Var b, std::size_t stride = 1) {
  const Tensor& xv = g.value(x);
  const Tensor& kv = g.value(k);
  const Tensor& bv = g.value(b);
  if (xv.rank() != 3 || kv.rank() != 4 || kv.dim(2) != 3 || kv.dim(3) != 3 || bv.rank() != 1 ||
      bv.dim(0) != kv.dim(0)) {
    throw std::invalid_argument("conv2d: expected x[C,H,W], k[F,C,3,3], b[F]; got x" + xv.shape().str() + " k" +
                                kv.shape().str() + " b" + bv.shape().str());
  }
  if (kv.dim(1) != xv.dim(0)) {
    throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(xv.dim(0)) +
                                " channels, kernel expects " + std::to_string(kv.dim(1)));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const auto C = static_cast<long>(xv.dim(0)), H = static_cast<long>(xv.dim(1)), W = static_cast<long>(xv.dim(2));
  const auto F = static_cast<long>(kv.dim(0)), s = static_cast<long>(stride);
  const long OH = (H - 1) / s + 1, OW = (W - 1) / s + 1;

  // Output columns whose tap ox*s + kx - 1 lands inside [0, W).
  auto col_range = [=](long kx) {
    const long lo = kx == 0 ? 1 : 0;
    const long hi = W - kx < 0 ? -1 : std::min((W - kx) / s, OW - 1);
    return std::pair<long, long>{lo, hi};
  };

  Tensor out{Shape{static_cast<std::size_t>(F), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)}};
  for (long f = 0; f < F; ++f) {
    float* of = &out[static_cast<std::size_t>(f * OH * OW)];
    std::fill(of, of + OH * OW, bv[static_cast<std::size_t>(f)]);
    for (long c = 0; c < C; ++c) {
      const float* xc = &xv[static_cast<std::size_t>(c * H * W)];
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          const float wgt = kv[static_cast<std::size_t>(((f * C + c) * 3 + ky) * 3 + kx)];
          const auto [lo, hi] = col_range(kx);
          for (long oy = 0; oy < OH; ++oy) {
            const long iy = oy * s + ky - 1;
            if (iy < 0 || iy >= H) continue;
            float* orow = of + oy * OW;
            const float* xrow = xc + iy * W;
            for (long ox = lo; ox <= hi; ++ox) orow[ox] += wgt * xrow[ox * s + kx - 1];
          }
        }
    }
  }

  return g.record("conv2d", std::move(out), {x, k, b},
                  [=](Graph& gr, const Tensor& go) {
                    const Tensor& xv = gr.value(x);
                    const Tensor& kv = gr.value(k);
                    const bool need_x = gr.requires_grad(x), need_k = gr.requires_grad(k);
                    Tensor* gx = need_x ? &gr.grad_buffer(x) : nullptr;
                    Tensor* gk = need_k ? &gr.grad_buffer(k) : nullptr;
                    for (long f = 0; f < F; ++f) {
                      const float* gf = &go[static_cast<std::size_t>(f * OH * OW)];
                      for (long c = 0; c < C; ++c) {
                        const float* xc = &xv[static_cast<std::size_t>(c * H * W)];
                        for (long ky = 0; ky < 3; ++ky)
                          for (long kx = 0; kx < 3; ++kx) {
                            const std::size_t widx = static_cast<std::size_t>(((f * C + c) * 3 + ky) * 3 + kx);
                            const float wgt = kv[widx];
                            const auto [lo, hi] = col_range(kx);
                            float acc = 0.0f;
                            for (long oy = 0; oy < OH; ++oy) {
                              const long iy = oy * s + ky - 1;
                              if (iy < 0 || iy >= H) continue;
                              const float* grow = gf + oy * OW;
                              if (need_x) {
                                float* gxrow = &(*gx)[static_cast<std::size_t>(c * H * W + iy * W)];
                                for (long ox = lo; ox <= hi; ++ox) gxrow[ox * s + kx - 1] += wgt * grow[ox];
                              }
                              if (need_k) {
                                const float* xrow = xc + iy * W;
                                for (long ox = lo; ox <= hi; ++ox) acc += grow[ox] * xrow[ox * s + kx - 1];
                              }
                            }
                            if (need_k) (*gk)[widx] += acc;
                          }
                      }
                    }
                    if (gr.requires_grad(b)) {
                      Tensor& gb = gr.grad_buffer(b);
                      for (long f = 0; f < F; ++f) {
                        float acc = 0.0f;
                        for (long i = 0; i < OH * OW; ++i) acc += go[static_cast<std::size_t>(f * OH * OW + i)];
                        gb[static_cast<std::size_t>(f)] += acc;
                      }
                    }
                  });
}

/// Per-pixel fully connected layer (1x1 convolution). x:[C,H,W], w:[C,F], b:[F].
inline Var conv1x1(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.rank() != 3 || wv.rank() != 2 || bv.rank() != 1 || wv.dim(0) != xv.dim(0) || wv.dim(1) != bv.dim(0)) {
    throw std::invalid_argument("conv1x1: incompatible shapes x" + xv.shape().str() + " w" + wv.shape().str() +
                                " b" + bv.shape().str());
  }
  const std::size_t C = xv.dim(0), P = xv.dim(1) * xv.dim(2), F = wv.dim(1);
  Tensor out{Shape{F, xv.dim(1), xv.dim(2)}};
  for (std::size_t f = 0; f < F; ++f) {
    float* o = &out[f * P];
    std::fill(o, o + P, bv[f]);
    for (std::size_t c = 0; c < C; ++c) {
      const float wgt = wv[c * F + f];
      const float* xc = &xv[c * P];
      for (std::size_t p = 0; p < P; ++p) o[p] += wgt * xc[p];
    }
  }
  return g.record("conv1x1", std::move(out), {x, w, b}, [=](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& wv = gr.value(w);
    if (gr.requires_grad(x)) {
      Tensor& gx = gr.grad_buffer(x);
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t c = 0; c < C; ++c) {
          const float wgt = wv[c * F + f];
          for (std::size_t p = 0; p < P; ++p) gx[c * P + p] += wgt * go[f * P + p];
        }
    }
    if (gr.requires_grad(w)) {
      Tensor& gw = gr.grad_buffer(w);
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t c = 0; c < C; ++c) {
          float acc = 0.0f;
          for (std::size_t p = 0; p < P; ++p) acc += go[f * P + p] * xv[c * P + p];
          gw[c * F + f] += acc;
        }
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_buffer(b);
      for (std::size_t f = 0; f < F; ++f) {
        float acc = 0.0f;
        for (std::size_t p = 0; p < P; ++p) acc += go[f * P + p];
        gb[f] += acc;
      }
    }
  });
}

// -------------------------------------------------------------- resample

namespace detail {

struct Tap {
  std::size_t i0, i1;
  float w0, w1;
};

// Half-pixel (align_corners = false) source taps for resizing n -> m.
inline std::vector<Tap> bilinear_taps(std::size_t n, std::size_t m) {
  std::vector<Tap> taps(m);
  const double scale = static_cast<double>(n) / static_cast<double>(m);
  for (std::size_t o = 0; o < m; ++o) {
    const double src = std::max(scale * (static_cast<double>(o) + 0.5) - 0.5, 0.0);
    const auto i0 = std::min(static_cast<std::size_t>(src), n - 1);
    const std::size_t i1 = i0 + (i0 + 1 < n ? 1 : 0);
    const auto l1 = static_cast<float>(src - static_cast<double>(i0));
    taps[o] = Tap{i0, i1, 1.0f - l1, l1};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of a [C,H,W] tensor to [C,OH,OW] (half-pixel centres).
inline Tensor resize_bilinear(const Tensor& x, std::size_t oh, std::size_t ow) {
  require_rank(x, 3, "resize_bilinear");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H == 0 || W == 0 || oh == 0 || ow == 0) throw std::invalid_argument("resize_bilinear: empty extent");
  const auto ty = detail::bilinear_taps(H, oh), tx = detail::bilinear_taps(W, ow);
  Tensor out{Shape{C, oh, ow}};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const auto& a = ty[y];
        const auto& b = tx[xo];
        out.at(c, y, xo) = a.w0 * (b.w0 * x.at(c, a.i0, b.i0) + b.w1 * x.at(c, a.i0, b.i1)) +
                           a.w1 * (b.w0 * x.at(c, a.i1, b.i0) + b.w1 * x.at(c, a.i1, b.i1));
      }
  return out;
}

inline Var bilinear_upsample2x(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 3, "bilinear_upsample2x");
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  Tensor out = resize_bilinear(xv, 2 * H, 2 * W);
  return g.record("bilinear_upsample2x", std::move(out), {x}, [=](Graph& gr, const Tensor& go) {
    const auto ty = detail::bilinear_taps(H, 2 * H), tx = detail::bilinear_taps(W, 2 * W);
    Tensor& gx = gr.grad_buffer(x);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t xo = 0; xo < 2 * W; ++xo) {
          const float gv = go.at(c, y, xo);
          const auto& a = ty[y];
          const auto& b = tx[xo];
          gx.at(c, a.i0, b.i0) += gv * a.w0 * b.w0;
          gx.at(c, a.i0, b.i1) += gv * a.w0 * b.w1;
          gx.at(c, a.i1, b.i0) += gv * a.w1 * b.w0;
          gx.at(c, a.i1, b.i1) += gv * a.w1 * b.w1;
        }
  });
}

// ------------------------------------------------------- pooling / norm

/// Per-channel maximum, [C,H,W] -> [C,1,1]; gradient routes to the first argmax.
inline Var global_max_pool(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 3, "global_max_pool");
  const std::size_t C = xv.dim(0), P = xv.dim(1) * xv.dim(2);
  if (P == 0) throw std::invalid_argument("global_max_pool: empty spatial extent");
  Tensor out{Shape{C, 1, 1}};
  std::vector<std::size_t> arg(C);
  for (std::size_t c = 0; c < C; ++c) {
    const float* xc = &xv[c * P];
    arg[c] = static_cast<std::size_t>(std::max_element(xc, xc + P) - xc);
    out[c] = xc[arg[c]];
  }
  return g.record("global_max_pool", std::move(out), {x}, [x, arg, P](Graph& gr, const Tensor& go) {
    Tensor& gx = gr.grad_buffer(x);
    for (std::size_t c = 0; c < arg.size(); ++c) gx[c * P + arg[c]] += go[c];
  });
}

/// Per-sample normalisation over spatial positions of each channel, then
/// scale-shift. x:[C,H,W], gamma/beta:[C].
inline Var batch_norm(Graph& g, Var x, Var gamma, Var beta, float eps = 1e-5f) {
  const Tensor& xv = g.value(x);
  const Tensor& gv = g.value(gamma);
  const Tensor& bv = g.value(beta);
  require_rank(xv, 3, "batch_norm");
  const std::size_t C = xv.dim(0), P = xv.dim(1) * xv.dim(2);
  if (gv.size() != C || bv.size() != C) {
    throw std::invalid_argument("batch_norm: gamma/beta " + gv.shape().str() + "/" + bv.shape().str() +
                                " do not match " + std::to_string(C) + " channels");
  }
  if (!(eps > 0.0f)) throw std::invalid_argument("batch_norm: eps must be positive");
  Tensor xhat(xv.shape());
  std::vector<float> inv_std(C);
  Tensor out(xv.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const float* xc = &xv[c * P];
    double mean = 0.0;
    for (std::size_t p = 0; p < P; ++p) mean += xc[p];
    mean /= static_cast<double>(P);
    double var = 0.0;
    for (std::size_t p = 0; p < P; ++p) var += (xc[p] - mean) * (xc[p] - mean);
    var /= static_cast<double>(P);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[c] = static_cast<float>(is);
    for (std::size_t p = 0; p < P; ++p) {
      xhat[c * P + p] = static_cast<float>((xc[p] - mean) * is);
      out[c * P + p] = gv[c] * xhat[c * P + p] + bv[c];
    }
  }
  return g.record("batch_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std, C, P](Graph& gr, const Tensor& go) {
                    const Tensor& gv = gr.value(gamma);
                    const bool need_x = gr.requires_grad(x);
                    Tensor* gx = need_x ? &gr.grad_buffer(x) : nullptr;
                    Tensor* gg = gr.requires_grad(gamma) ? &gr.grad_buffer(gamma) : nullptr;
                    Tensor* gb = gr.requires_grad(beta) ? &gr.grad_buffer(beta) : nullptr;
                    for (std::size_t c = 0; c < C; ++c) {
                      double sum_g = 0.0, sum_gx = 0.0;
                      for (std::size_t p = 0; p < P; ++p) {
                        sum_g += go[c * P + p];
                        sum_gx += static_cast<double>(go[c * P + p]) * xhat[c * P + p];
                      }
                      if (gg) (*gg)[c] += static_cast<float>(sum_gx);
                      if (gb) (*gb)[c] += static_cast<float>(sum_g);
                      if (need_x) {
                        const double scale = gv[c] * inv_std[c] / static_cast<double>(P);
                        for (std::size_t p = 0; p < P; ++p) {
                          const double d = static_cast<double>(P) * go[c * P + p] - sum_g - xhat[c * P + p] * sum_gx;
                          (*gx)[c * P + p] += static_cast<float>(scale * d);
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------- elementwise

inline Var add(Graph& g, Var a, Var b) {
  detail::same_shape(g.value(a), g.value(b), "add");
  Tensor out = g.value(a);
  out += g.value(b);
  return g.record("add", std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    gr.accumulate(b, go);
  });
}

inline Var sub(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::same_shape(av, bv, "sub");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return g.record("sub", std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    gr.accumulate(a, go);
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

inline Var mul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.record("mul", std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    const Tensor& av = gr.value(a);
    const Tensor& bv = gr.value(b);
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

inline Var scale(Graph& g, Var x, float s) {
  return detail::unary(g, x, "scale", [s](float v) { return s * v; }, [s](float) { return s; });
}

/// Sum of all elements as a rank-0 scalar (accumulated in double).
inline Var sum(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  double acc = 0.0;
  for (float v : xv.data()) acc += v;
  return g.record("sum", Tensor::scalar(static_cast<float>(acc)), {x}, [x](Graph& gr, const Tensor& go) {
    Tensor& gx = gr.grad_buffer(x);
    const float s = go[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s;
  });
}

inline Var mean(Graph& g, Var x) {
  const auto n = static_cast<float>(g.value(x).size());
  return scale(g, sum(g, x), 1.0f / n);
}

/// sum_i w_i * x_i over rank-0 scalars.
inline Var weighted_sum(Graph& g, const std::vector<Var>& xs, const std::vector<float>& ws) {
  if (xs.size() != ws.size() || xs.empty()) throw std::invalid_argument("weighted_sum: term/weight count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) acc += static_cast<double>(ws[i]) * g.value(xs[i]).item();
  return g.record("weighted_sum", Tensor::scalar(static_cast<float>(acc)), xs, [xs, ws](Graph& gr, const Tensor& go) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (gr.requires_grad(xs[i])) gr.grad_buffer(xs[i])[0] += ws[i] * go[0];
    }
  });
}

/// Multiplies each channel of x:[C,H,W] by w:[C,1,1].
inline Var channel_scale(Graph& g, Var x, Var w) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  require_rank(xv, 3, "channel_scale");
  const std::size_t C = xv.dim(0), P = xv.dim(1) * xv.dim(2);
  if (wv.size() != C) throw std::invalid_argument("channel_scale: gate " + wv.shape().str() + " vs " + xv.shape().str());
  Tensor out(xv.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) out[c * P + p] = xv[c * P + p] * wv[c];
  return g.record("channel_scale", std::move(out), {x, w}, [x, w, C, P](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& wv = gr.value(w);
    if (gr.requires_grad(x)) {
      Tensor& gx = gr.grad_buffer(x);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) gx[c * P + p] += go[c * P + p] * wv[c];
    }
    if (gr.requires_grad(w)) {
      Tensor& gw = gr.grad_buffer(w);
      for (std::size_t c = 0; c < C; ++c) {
        float acc = 0.0f;
        for (std::size_t p = 0; p < P; ++p) acc += go[c * P + p] * xv[c * P + p];
        gw[c] += acc;
      }
    }
  });
}

/// Multiplies every channel of x:[C,H,W] by the spatial map m:[1,H,W].
inline Var spatial_scale(Graph& g, Var x, Var m) {
  const Tensor& xv = g.value(x);
  const Tensor& mv = g.value(m);
  require_rank(xv, 3, "spatial_scale");
  if (mv.rank() != 3 || mv.dim(0) != 1 || mv.dim(1) != xv.dim(1) || mv.dim(2) != xv.dim(2)) {
    throw std::invalid_argument("spatial_scale: map " + mv.shape().str() + " vs features " + xv.shape().str());
  }
  const std::size_t C = xv.dim(0), P = xv.dim(1) * xv.dim(2);
  Tensor out(xv.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) out[c * P + p] = xv[c * P + p] * mv[p];
  return g.record("spatial_scale", std::move(out), {x, m}, [x, m, C, P](Graph& gr, const Tensor& go) {
    const Tensor& xv = gr.value(x);
    const Tensor& mv = gr.value(m);
    if (gr.requires_grad(x)) {
      Tensor& gx = gr.grad_buffer(x);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) gx[c * P + p] += go[c * P + p] * mv[p];
    }
    if (gr.requires_grad(m)) {
      Tensor& gm = gr.grad_buffer(m);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) gm[p] += go[c * P + p] * xv[c * P + p];
    }
  });
}

// ------------------------------------------------------------ structure

/// Channel concatenation [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W].
inline Var concat_channels(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_rank(av, 3, "concat_channels");
  require_rank(bv, 3, "concat_channels");
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw std::invalid_argument("concat_channels: spatial mismatch " + detail::shapes(av, bv));
  }
  std::vector<float> data(av.vec());
  data.insert(data.end(), bv.vec().begin(), bv.vec().end());
  const std::size_t na = av.size();
  Tensor out(Shape{av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)}, std::move(data));
  return g.record("concat_channels", std::move(out), {a, b}, [a, b, na](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na + i];
    }
  });
}

inline Var reshape(Graph& g, Var x, Shape s) {
  Tensor out = g.value(x).reshaped(s);
  return g.record("reshape", std::move(out), {x}, [x](Graph& gr, const Tensor& go) {
    Tensor& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
  });
}

/// [R,C] -> [C,R].
inline Var transpose2d(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 2, "transpose2d");
  const std::size_t R = xv.dim(0), C = xv.dim(1);
  Tensor out{Shape{C, R}};
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = xv[r * C + c];
  return g.record("transpose2d", std::move(out), {x}, [x, R, C](Graph& gr, const Tensor& go) {
    Tensor& gx = gr.grad_buffer(x);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += go[c * R + r];
  });
}

/// Rows idx of x:[N,D] -> [K,D].
inline Var gather_rows(Graph& g, Var x, std::span<const std::size_t> idx) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 2, "gather_rows");
  const std::size_t N = xv.dim(0), D = xv.dim(1);
  Tensor out{Shape{idx.size(), D}};
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= N) throw std::out_of_range("gather_rows: index " + std::to_string(idx[k]) + " >= " + std::to_string(N));
    std::copy_n(&xv[idx[k] * D], D, &out[k * D]);
  }
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return g.record("gather_rows", std::move(out), {x}, [x, rows, D](Graph& gr, const Tensor& go) {
    Tensor& gx = gr.grad_buffer(x);
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < D; ++j) gx[rows[k] * D + j] += go[k * D + j];
  });
}

/// Stop-gradient copy.
inline Var detach(Graph& g, Var x) { return g.constant(g.value(x)); }

}  // namespace murtree
