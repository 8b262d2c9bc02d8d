// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Tree-cover refinement decoding: gradient-magnitude attention from the
// primary image, SE-gated align and decoder units, and the two-step
// refinement head with joint segmentation and edge outputs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "murtree/ops.hpp"
#include "murtree/params.hpp"

namespace murtree::decoder {

// ---------------------------------------------------------------- GMA

inline constexpr float kLamEps = 1e-8f;
inline constexpr double kSobelEps = 1e-12;

/// Mean of R,G,B for images with at least three bands, else a copy of band 0.
inline Var luminance(Graph& g, Var img) {
  const Tensor& x = g.value(img);
  require_rank(x, 3, "luminance");
  const std::size_t C = x.dim(0), P = x.dim(1) * x.dim(2);
  if (C == 0) throw std::invalid_argument("luminance: image has no bands");
  const std::size_t used = C >= 3 ? 3 : 1;
  Tensor out{Shape{1, x.dim(1), x.dim(2)}};
  for (std::size_t p = 0; p < P; ++p) {
    float acc = 0.0f;
    for (std::size_t c = 0; c < used; ++c) acc += x[c * P + p];
    out[p] = acc / static_cast<float>(used);
  }
  return g.record("luminance", std::move(out), {img}, [img, used, P](Graph& gr, const Tensor& go) {
    Tensor& gx = gr.grad_buffer(img);
    for (std::size_t c = 0; c < used; ++c)
      for (std::size_t p = 0; p < P; ++p) gx[c * P + p] += go[p] / static_cast<float>(used);
  });
}

struct Enhanced {
  Var map;
  bool degenerate = false;  // max luminance under kLamEps; output is ~1 everywhere
};

/// (1 - L / max L)^gamma. The max is a constant in backward.
inline Enhanced lam_enhance(Graph& g, Var lum, float gamma) {
  if (!(gamma > 1.0f)) throw std::invalid_argument("lam_enhance: gamma must exceed 1, got " + std::to_string(gamma));
  const float mx = max_value(g.value(lum));
  const float m = std::max(mx, kLamEps);
  const Var out = detail::unary(
      g, lum, "lam_enhance", [m, gamma](float v) { return std::pow(std::max(1.0f - v / m, 0.0f), gamma); },
      [m, gamma](float v) {
        const float base = 1.0f - v / m;
        return base > 0.0f ? -gamma / m * std::pow(base, gamma - 1.0f) : 0.0f;
      });
  return {out, mx < kLamEps};
}

/// Sobel magnitude sqrt(gx^2 + gy^2 + eps^2) - eps, divided by its global max.
inline Var grad_magnitude(Graph& g, Var lum) {
  const Tensor& x = g.value(lum);
  if (x.rank() != 3 || x.dim(0) != 1) throw std::invalid_argument("grad_magnitude: expected [1,H,W], got " + x.shape().str());
  Tensor k{Shape{2, 1, 3, 3}};
  const float sobel[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      k[i * 3 + j] = sobel[i * 3 + j];      // G_x
      k[9 + i * 3 + j] = sobel[j * 3 + i];  // G_y = G_x^T
    }
  const Var grads = conv2d(g, lum, g.constant(std::move(k)), g.constant(Tensor(Shape{2})));
  const Tensor& gv = g.value(grads);
  const std::size_t P = x.dim(1) * x.dim(2);
  Tensor mag{Shape{1, x.dim(1), x.dim(2)}};
  for (std::size_t p = 0; p < P; ++p) {
    const double a = gv[p], b = gv[P + p];
    mag[p] = static_cast<float>(std::sqrt(a * a + b * b + kSobelEps * kSobelEps) - kSobelEps);
  }
  const float mx = std::max(max_value(mag), kLamEps);
  const float norm = 1.0f / mx;
  for (std::size_t p = 0; p < P; ++p) mag[p] /= mx;  // division keeps the maximum at exactly 1
  return g.record("grad_magnitude", std::move(mag), {grads}, [grads, P, norm](Graph& gr, const Tensor& go) {
    const Tensor& gv = gr.value(grads);
    Tensor& gg = gr.grad_buffer(grads);
    for (std::size_t p = 0; p < P; ++p) {
      const double a = gv[p], b = gv[P + p];
      const double r = std::sqrt(a * a + b * b + kSobelEps * kSobelEps);
      const double s = static_cast<double>(go[p]) * norm / r;
      gg[p] += static_cast<float>(s * a);
      gg[P + p] += static_cast<float>(s * b);
    }
  });
}

/// A = 1 - exp(-grad).
inline Var gma_attention(Graph& g, Var grad) {
  return detail::unary(
      g, grad, "gma_attention", [](float v) { return -std::expm1(-v); }, [](float v) { return std::exp(-v); });
}

struct Attention {
  Var map;  // [1,H,W]
  bool degenerate = false;
};

/// An all-dark image has no luminance gradient, so its attention is zero
/// rather than the zero-padding border response of the flat enhanced map.
inline Attention gma(Graph& g, Var image, float gamma) {
  const Enhanced e = lam_enhance(g, luminance(g, image), gamma);
  if (e.degenerate) return {g.constant(Tensor(g.value(e.map).shape())), true};
  return {gma_attention(g, grad_magnitude(g, e.map)), false};
}

// ------------------------------------------------------------ units

struct SeParams {
  Dense fc1, fc2;
};

struct AlignParams {
  Dense proj;  // 1x1 projection, weight [C1+C2, C]
  SeParams se;
};

struct UnitParams {
  Conv conv1;
  Norm norm1;
  Conv conv2;
  Norm norm2;
  SeParams se;
};

struct HeadParams {
  Conv conv1;
  Norm norm1;
  Conv conv2;
  Norm norm2;
  Dense seg, edge;  // 1x1 heads
};

inline void init_se(ParamStore& s, const std::string& name, std::size_t channels, std::size_t ratio,
                    std::uint64_t seed) {
  if (ratio == 0 || channels % ratio != 0) {
    throw std::invalid_argument("SE reduction ratio " + std::to_string(ratio) + " does not divide " +
                                std::to_string(channels) + " channels");
  }
  init_dense(s, name + ".fc1", channels, channels / ratio, seed);
  init_dense(s, name + ".fc2", channels / ratio, channels, seed, 1.0f);
}

inline void init_align(ParamStore& s, const std::string& name, std::size_t c_primary, std::size_t c_auxiliary,
                       std::size_t out, std::size_t ratio, std::uint64_t seed) {
  init_dense(s, name + ".proj", c_primary + c_auxiliary, out, seed);
  init_se(s, name + ".se", out, ratio, seed);
}

inline void init_unit(ParamStore& s, const std::string& name, std::size_t channels, std::size_t ratio,
                      std::uint64_t seed) {
  if (channels % 2 != 0) throw std::invalid_argument("decoder unit needs an even channel count");
  const std::size_t half = channels / 2;
  init_conv(s, name + ".conv1", channels, half, seed);
  init_norm(s, name + ".norm1", half);
  init_conv(s, name + ".conv2", half, half, seed);
  init_norm(s, name + ".norm2", half);
  init_se(s, name + ".se", half, ratio, seed);
}

inline void init_head(ParamStore& s, const std::string& name, std::size_t in, std::size_t width, std::uint64_t seed) {
  init_conv(s, name + ".conv1", in, width, seed);
  init_norm(s, name + ".norm1", width);
  init_conv(s, name + ".conv2", width, width, seed);
  init_norm(s, name + ".norm2", width);
  init_dense(s, name + ".seg", width, 1, seed, 1.0f);
  init_dense(s, name + ".edge", width, 1, seed, 1.0f);
}

inline SeParams bind_se(ParamBinder& p, const std::string& name) {
  return {p.dense(name + ".fc1"), p.dense(name + ".fc2")};
}
inline AlignParams bind_align(ParamBinder& p, const std::string& name) {
  return {p.dense(name + ".proj"), bind_se(p, name + ".se")};
}
inline UnitParams bind_unit(ParamBinder& p, const std::string& name) {
  return {p.conv(name + ".conv1"), p.norm(name + ".norm1"), p.conv(name + ".conv2"), p.norm(name + ".norm2"),
          bind_se(p, name + ".se")};
}
inline HeadParams bind_head(ParamBinder& p, const std::string& name) {
  return {p.conv(name + ".conv1"), p.norm(name + ".norm1"), p.conv(name + ".conv2"),
          p.norm(name + ".norm2"), p.dense(name + ".seg"),  p.dense(name + ".edge")};
}

/// f * sigmoid(fc2(relu(fc1(maxpool(f))))) per channel.
inline Var se_block(Graph& g, Var f, const SeParams& se) {
  const Tensor& fv = g.value(f);
  require_rank(fv, 3, "se_block");
  const std::size_t C = fv.dim(0);
  const Tensor& w1 = g.value(se.fc1.weight);
  if (w1.rank() != 2 || w1.dim(0) != C) {
    throw std::invalid_argument("se_block: " + std::to_string(C) + " channels vs fc1 " + w1.shape().str());
  }
  const Var pooled = reshape(g, global_max_pool(g, f), Shape{C});
  const Var hidden = relu(g, affine(g, pooled, se.fc1.weight, se.fc1.bias));
  const Var gate = sigmoid(g, affine(g, hidden, se.fc2.weight, se.fc2.bias));
  return channel_scale(g, f, reshape(g, gate, Shape{C, 1, 1}));
}

inline Var conv_bn_relu(Graph& g, Var x, const Conv& conv, const Norm& norm, std::size_t stride = 1) {
  return relu(g, batch_norm(g, conv2d(g, x, conv.kernel, conv.bias, stride), norm.gamma, norm.beta));
}

/// concat(primary, auxiliary) -> 1x1 -> SE.
inline Var align_unit(Graph& g, Var f_primary, Var f_auxiliary, const AlignParams& p) {
  const Tensor& a = g.value(f_primary);
  const Tensor& b = g.value(f_auxiliary);
  require_rank(a, 3, "align_unit");
  require_rank(b, 3, "align_unit");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw std::invalid_argument("align_unit: spatial mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  const Var merged = conv1x1(g, concat_channels(g, f_primary, f_auxiliary), p.proj.weight, p.proj.bias);
  return se_block(g, merged, p.se);
}

/// [C,H,W] -> [C/2,2H,2W]. With attention, f is first scaled by (1 + A) resized to H x W.
inline Var decoder_unit(Graph& g, Var f, std::optional<Var> attention, const UnitParams& p) {
  const Tensor& fv = g.value(f);
  require_rank(fv, 3, "decoder_unit");
  Var x = f;
  if (attention) {
    Tensor gate = resize_bilinear(g.value(*attention), fv.dim(1), fv.dim(2));
    for (float& v : gate.data()) v += 1.0f;
    x = spatial_scale(g, f, g.constant(std::move(gate)));
  }
  x = bilinear_upsample2x(g, x);
  x = conv_bn_relu(g, x, p.conv1, p.norm1);
  x = conv_bn_relu(g, x, p.conv2, p.norm2);
  return se_block(g, x, p.se);
}

struct SegOutput {
  Var seg_prob;   // [1,H,W]
  Var edge_prob;  // [1,H,W]
};

/// Two rounds of (bilinear x2 -> conv3x3 -> BN -> ReLU), then 1x1 + sigmoid heads.
inline SegOutput refinement_head(Graph& g, Var f, const HeadParams& p) {
  Var x = conv_bn_relu(g, bilinear_upsample2x(g, f), p.conv1, p.norm1);
  x = conv_bn_relu(g, bilinear_upsample2x(g, x), p.conv2, p.norm2);
  return {sigmoid(g, conv1x1(g, x, p.seg.weight, p.seg.bias)), sigmoid(g, conv1x1(g, x, p.edge.weight, p.edge.bias))};
}

}  // namespace murtree::decoder
