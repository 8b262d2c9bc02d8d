// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Selective uncertainty-guided reconstruction.
//
// Each patch embedding x^i of a modality gets a diagonal Gaussian latent
// N(mu^i, diag(sigma^i)) with mu = Le1(x), ln sigma = Le2(x). The entropy
// difference between primary and auxiliary latents scores every patch,
// the K highest-scoring auxiliary patches are re-synthesised from L samples
// of the primary latent, and the reconstructions replace the originals.
//
// sigma is used as the variance in the KL term and as the sample scale in
// the reparameterisation, following the two formulas as written.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "murtree/ops.hpp"
#include "murtree/params.hpp"
#include "murtree/patch_grid.hpp"
#include "murtree/rng.hpp"

namespace murtree::surm {

inline constexpr float kLogSigmaMin = -20.0f;
inline constexpr float kLogSigmaMax = 10.0f;

/// Le1 (mean) and Le2 (log sigma): fc -> ReLU -> fc each.
struct LeHeads {
  Dense mean_fc1, mean_fc2;
  Dense log_sigma_fc1, log_sigma_fc2;
};

/// PatchScore: positionwise 1 -> hidden -> 1 MLP on the entropy difference.
struct PatchScoreMlp {
  Dense fc1, fc2;
};

/// PatchRecon decoder: L*d -> hidden -> D.
struct ReconDecoder {
  Dense fc1, fc2;
};

struct Params {
  Dense embed_primary, embed_auxiliary;
  LeHeads le_primary, le_auxiliary;
  PatchScoreMlp score;
  ReconDecoder decoder;
};

struct Shapes {
  std::size_t primary_channels = 3;
  std::size_t auxiliary_channels = 1;
  std::size_t patch = 4;
  std::size_t embed_dim = 32;
  std::size_t latent_dim = 8;
  std::size_t le_hidden = 16;
  std::size_t recon_hidden = 32;
  std::size_t score_hidden = 8;
  std::size_t samples = 4;
};

enum class ScoreInit {
  identity,   // raw = v
  magnitude,  // raw = |v|
  negated,    // raw = -v
};

/// Sets the PatchScore MLP to an exact piecewise-linear map of v:
/// hidden units relu(v), relu(-v), the rest zero.
inline void init_score_mlp(ParamStore& store, const std::string& name, std::size_t hidden, ScoreInit kind) {
  if (hidden < 2) throw std::invalid_argument("PatchScore hidden width must be at least 2");
  Tensor w1{Shape{1, hidden}}, w2{Shape{hidden, 1}};
  w1[0] = 1.0f;
  w1[1] = -1.0f;
  w2[0] = kind == ScoreInit::negated ? -1.0f : 1.0f;
  w2[1] = kind == ScoreInit::identity ? -1.0f : 1.0f;
  store.set(name + ".fc1.weight", std::move(w1));
  store.set(name + ".fc1.bias", Tensor(Shape{hidden}));
  store.set(name + ".fc2.weight", std::move(w2));
  store.set(name + ".fc2.bias", Tensor(Shape{1}));
}

inline void init(ParamStore& store, const std::string& prefix, const Shapes& s, std::uint64_t seed,
                 ScoreInit score = ScoreInit::magnitude) {
  const std::size_t cpp = s.patch * s.patch;
  init_dense(store, prefix + ".embed_primary", s.primary_channels * cpp, s.embed_dim, seed, 1.0f);
  init_dense(store, prefix + ".embed_auxiliary", s.auxiliary_channels * cpp, s.embed_dim, seed, 1.0f);
  for (const char* m : {"le_primary", "le_auxiliary"}) {
    const std::string base = prefix + "." + m;
    init_dense(store, base + ".mean_fc1", s.embed_dim, s.le_hidden, seed);
    init_dense(store, base + ".mean_fc2", s.le_hidden, s.latent_dim, seed, 1.0f);
    init_dense(store, base + ".log_sigma_fc1", s.embed_dim, s.le_hidden, seed);
    init_dense(store, base + ".log_sigma_fc2", s.le_hidden, s.latent_dim, seed, 1.0f);
  }
  init_score_mlp(store, prefix + ".score", s.score_hidden, score);
  init_dense(store, prefix + ".decoder.fc1", s.samples * s.latent_dim, s.recon_hidden, seed);
  init_dense(store, prefix + ".decoder.fc2", s.recon_hidden, s.embed_dim, seed, 1.0f);
}

inline LeHeads bind_le(ParamBinder& p, const std::string& base) {
  return {p.dense(base + ".mean_fc1"), p.dense(base + ".mean_fc2"), p.dense(base + ".log_sigma_fc1"),
          p.dense(base + ".log_sigma_fc2")};
}

inline Params bind(ParamBinder& p, const std::string& prefix) {
  return {p.dense(prefix + ".embed_primary"),
          p.dense(prefix + ".embed_auxiliary"),
          bind_le(p, prefix + ".le_primary"),
          bind_le(p, prefix + ".le_auxiliary"),
          {p.dense(prefix + ".score.fc1"), p.dense(prefix + ".score.fc2")},
          {p.dense(prefix + ".decoder.fc1"), p.dense(prefix + ".decoder.fc2")}};
}

// ------------------------------------------------------------ latents

struct DistParams {
  Var mu;         // [N,d]
  Var log_sigma;  // [N,d], clamped to [kLogSigmaMin, kLogSigmaMax]
  Modality modality = Modality::primary;
};

inline Var two_layer(Graph& g, Var x, const Dense& fc1, const Dense& fc2) {
  return affine(g, relu(g, affine(g, x, fc1.weight, fc1.bias)), fc2.weight, fc2.bias);
}

inline DistParams dist_params(Graph& g, const PatchSequence& seq, const LeHeads& le) {
  const Var mu = two_layer(g, seq.embeddings, le.mean_fc1, le.mean_fc2);
  const Var ls = two_layer(g, seq.embeddings, le.log_sigma_fc1, le.log_sigma_fc2);
  if (!(g.value(mu).shape() == g.value(ls).shape())) {
    throw std::invalid_argument("dist_params: Le1/Le2 output shapes differ: " + g.value(mu).shape().str() + " vs " +
                                g.value(ls).shape().str());
  }
  return {mu, clamp(g, ls, kLogSigmaMin, kLogSigmaMax), seq.modality};
}

/// v^i = 1/2 (sum_k ln sigma_P^i[k] - sum_k ln sigma_A^i[k]), straight from the logs.
inline Var entropy_difference(Graph& g, const DistParams& primary, const DistParams& auxiliary) {
  const Tensor& lp = g.value(primary.log_sigma);
  const Tensor& la = g.value(auxiliary.log_sigma);
  if (!(lp.shape() == la.shape()) || lp.rank() != 2) {
    throw std::invalid_argument("entropy_difference: latent shapes " + lp.shape().str() + " vs " + la.shape().str());
  }
  const std::size_t N = lp.dim(0), d = lp.dim(1);
  Tensor v{Shape{N}};
  for (std::size_t i = 0; i < N; ++i) {
    double sp = 0.0, sa = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      sp += lp[i * d + k];
      sa += la[i * d + k];
    }
    v[i] = static_cast<float>(0.5 * (sp - sa));
  }
  const Var p = primary.log_sigma, a = auxiliary.log_sigma;
  return g.record("entropy_difference", std::move(v), {p, a}, [p, a, N, d](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(p)) {
      Tensor& gp = gr.grad_buffer(p);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < d; ++k) gp[i * d + k] += 0.5f * go[i];
    }
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < d; ++k) ga[i * d + k] -= 0.5f * go[i];
    }
  });
}

// ---------------------------------------------------------- selection

struct ScoreMaps {
  Var raw;    // RawMap [N]
  Var score;  // ScoreMap [N], softmax(raw)
};

inline ScoreMaps score_map(Graph& g, Var v, const PatchScoreMlp& mlp) {
  const Tensor& vv = g.value(v);
  require_rank(vv, 1, "score_map");
  const std::size_t N = vv.dim(0);
  const Var col = reshape(g, v, Shape{N, 1});
  const Var raw = reshape(g, two_layer(g, col, mlp.fc1, mlp.fc2), Shape{N});
  return {raw, softmax(g, raw)};
}

/// Indices of the K largest scores (ties to the lower index), ascending.
inline std::vector<std::size_t> select_topk(std::span<const float> score, std::size_t k) {
  if (k > score.size()) {
    throw std::invalid_argument("select_topk: K=" + std::to_string(k) + " exceeds N=" + std::to_string(score.size()));
  }
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return score[a] > score[b] || (score[a] == score[b] && a < b); });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

struct UncertaintySelection {
  Tensor raw;
  Tensor score;
  std::vector<std::size_t> selected;
};

// ----------------------------------------------------- reconstruction

enum class NoiseMode { gaussian, zero };

/// eps[k][j][c] ~ N(0,1), keyed by (seed, patch index, sample j, component c).
inline Tensor reparam_noise(std::span<const std::size_t> selected, std::size_t samples, std::size_t latent_dim,
                            std::uint64_t seed, NoiseMode mode = NoiseMode::gaussian) {
  Tensor eps{Shape{selected.size(), samples, latent_dim}};
  if (mode == NoiseMode::zero) return eps;
  const Stream base = Stream(seed).sub("reparameterize");
  for (std::size_t k = 0; k < selected.size(); ++k)
    for (std::size_t j = 0; j < samples; ++j) {
      const Stream s = base.sub(selected[k]).sub(j);
      for (std::size_t c = 0; c < latent_dim; ++c)
        eps[(k * samples + j) * latent_dim + c] = static_cast<float>(s.normal(c));
    }
  return eps;
}

/// z^{i,j} = mu_P^i + exp(ln sigma_P^i) * eps^j for i in the selection -> [K,L,d].
/// Gradients reach mu and ln sigma; eps is a constant.
inline Var reparameterize(Graph& g, const DistParams& primary, std::span<const std::size_t> selected,
                          std::size_t samples, std::uint64_t seed, NoiseMode mode = NoiseMode::gaussian) {
  if (samples == 0) throw std::invalid_argument("reparameterize: need at least one sample");
  const Var mu = gather_rows(g, primary.mu, selected);
  const Var ls = gather_rows(g, primary.log_sigma, selected);
  const Tensor& mv = g.value(mu);
  const Tensor& lv = g.value(ls);
  const std::size_t K = selected.size(), d = g.value(primary.mu).dim(1), L = samples;
  Tensor eps = reparam_noise(selected, L, d, seed, mode);
  Tensor z{Shape{K, L, d}};
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t c = 0; c < d; ++c) {
        const float sigma = std::exp(std::clamp(lv[k * d + c], kLogSigmaMin, kLogSigmaMax));
        z[(k * L + j) * d + c] = mv[k * d + c] + sigma * eps[(k * L + j) * d + c];
      }
  return g.record("reparameterize", std::move(z), {mu, ls},
                  [mu, ls, eps = std::move(eps), K, L, d](Graph& gr, const Tensor& go) {
                    const Tensor& lv = gr.value(ls);
                    Tensor* gm = gr.requires_grad(mu) ? &gr.grad_buffer(mu) : nullptr;
                    Tensor* gl = gr.requires_grad(ls) ? &gr.grad_buffer(ls) : nullptr;
                    for (std::size_t k = 0; k < K; ++k)
                      for (std::size_t c = 0; c < d; ++c) {
                        const float l = lv[k * d + c];
                        const bool inside = l >= kLogSigmaMin && l <= kLogSigmaMax;
                        const float sigma = std::exp(std::clamp(l, kLogSigmaMin, kLogSigmaMax));
                        for (std::size_t j = 0; j < L; ++j) {
                          const std::size_t at = (k * L + j) * d + c;
                          if (gm) (*gm)[k * d + c] += go[at];
                          if (gl && inside) (*gl)[k * d + c] += go[at] * sigma * eps[at];
                        }
                      }
                  });
}

/// x_hat^i = fc(ReLU(fc([z^{i,1}, ..., z^{i,L}]))) -> [K, D].
inline Var reconstruct_patch(Graph& g, Var samples, const ReconDecoder& dec) {
  const Tensor& z = g.value(samples);
  require_rank(z, 3, "reconstruct_patch");
  const Var flat = reshape(g, samples, Shape{z.dim(0), z.dim(1) * z.dim(2)});
  return two_layer(g, flat, dec.fc1, dec.fc2);
}

/// (1/K) sum_i ||recon^i - target^i||^2; zero for an empty selection.
inline Var recon_mse_loss(Graph& g, Var recon, Var target) {
  const Tensor& r = g.value(recon);
  const Tensor& t = g.value(target);
  if (!(r.shape() == t.shape()) || r.rank() != 2) {
    throw std::invalid_argument("recon_mse_loss: shape mismatch " + r.shape().str() + " vs " + t.shape().str());
  }
  const std::size_t K = r.dim(0);
  if (K == 0) return g.constant(Tensor::scalar(0.0f));
  double acc = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) acc += static_cast<double>(r[i] - t[i]) * (r[i] - t[i]);
  return g.record("recon_mse_loss", Tensor::scalar(static_cast<float>(acc / static_cast<double>(K))), {recon, target},
                  [recon, target, K](Graph& gr, const Tensor& go) {
                    const Tensor& r = gr.value(recon);
                    const Tensor& t = gr.value(target);
                    const float s = 2.0f * go[0] / static_cast<float>(K);
                    Tensor* gr_ = gr.requires_grad(recon) ? &gr.grad_buffer(recon) : nullptr;
                    Tensor* gt = gr.requires_grad(target) ? &gr.grad_buffer(target) : nullptr;
                    for (std::size_t i = 0; i < r.size(); ++i) {
                      const float diff = s * (r[i] - t[i]);
                      if (gr_) (*gr_)[i] += diff;
                      if (gt) (*gt)[i] -= diff;
                    }
                  });
}

/// sum_{i in selection} KL(N(mu_A, diag sigma_A) || N(mu_P, diag sigma_P)), sigma = variance:
/// 1/2 sum_k [ln(sigma_P/sigma_A) + (sigma_A + (mu_A - mu_P)^2)/sigma_P - 1].
inline Var kl_loss(Graph& g, const DistParams& auxiliary, const DistParams& primary,
                   std::span<const std::size_t> selected) {
  const Tensor& ma = g.value(auxiliary.mu);
  const Tensor& mp = g.value(primary.mu);
  if (!(ma.shape() == mp.shape()) || ma.rank() != 2) {
    throw std::invalid_argument("kl_loss: latent shapes " + ma.shape().str() + " vs " + mp.shape().str());
  }
  const std::size_t N = ma.dim(0), d = ma.dim(1);
  for (std::size_t i : selected)
    if (i >= N) throw std::out_of_range("kl_loss: patch index " + std::to_string(i) + " >= " + std::to_string(N));
  const Tensor& la = g.value(auxiliary.log_sigma);
  const Tensor& lp = g.value(primary.log_sigma);
  auto cl = [](float v) { return static_cast<double>(std::clamp(v, kLogSigmaMin, kLogSigmaMax)); };
  double acc = 0.0;
  for (std::size_t i : selected)
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t at = i * d + k;
      const double dm = static_cast<double>(ma[at]) - mp[at];
      acc += 0.5 * (cl(lp[at]) - cl(la[at]) + (std::exp(cl(la[at])) + dm * dm) * std::exp(-cl(lp[at])) - 1.0);
    }
  std::vector<std::size_t> sel(selected.begin(), selected.end());
  const Var mua = auxiliary.mu, mup = primary.mu, lsa = auxiliary.log_sigma, lsp = primary.log_sigma;
  return g.record("kl_loss", Tensor::scalar(static_cast<float>(acc)), {mua, mup, lsa, lsp},
                  [=](Graph& gr, const Tensor& go) {
                    const Tensor& ma = gr.value(mua);
                    const Tensor& mp = gr.value(mup);
                    const Tensor& la = gr.value(lsa);
                    const Tensor& lp = gr.value(lsp);
                    Tensor* gma = gr.requires_grad(mua) ? &gr.grad_buffer(mua) : nullptr;
                    Tensor* gmp = gr.requires_grad(mup) ? &gr.grad_buffer(mup) : nullptr;
                    Tensor* gla = gr.requires_grad(lsa) ? &gr.grad_buffer(lsa) : nullptr;
                    Tensor* glp = gr.requires_grad(lsp) ? &gr.grad_buffer(lsp) : nullptr;
                    const double s = go[0];
                    auto inside = [](float v) { return v >= kLogSigmaMin && v <= kLogSigmaMax; };
                    for (std::size_t i : sel)
                      for (std::size_t k = 0; k < d; ++k) {
                        const std::size_t at = i * d + k;
                        const double dm = static_cast<double>(ma[at]) - mp[at];
                        const double inv_p = std::exp(-cl(lp[at]));
                        const double var_a = std::exp(cl(la[at]));
                        if (gma) (*gma)[at] += static_cast<float>(s * dm * inv_p);
                        if (gmp) (*gmp)[at] -= static_cast<float>(s * dm * inv_p);
                        if (gla && inside(la[at])) (*gla)[at] += static_cast<float>(s * 0.5 * (var_a * inv_p - 1.0));
                        if (glp && inside(lp[at]))
                          (*glp)[at] += static_cast<float>(s * 0.5 * (1.0 - (var_a + dm * dm) * inv_p));
                      }
                  });
}

/// Row i of the result is recon row k when selected[k] == i, else the original row.
inline PatchSequence apply_replacement(Graph& g, const PatchSequence& auxiliary, Var recon,
                                       std::span<const std::size_t> selected) {
  const Tensor& base = g.value(auxiliary.embeddings);
  const Tensor& rv = g.value(recon);
  require_rank(base, 2, "apply_replacement");
  const std::size_t N = base.dim(0), D = base.dim(1);
  if (rv.rank() != 2 || rv.dim(0) != selected.size() || rv.dim(1) != D) {
    throw std::invalid_argument("apply_replacement: recon " + rv.shape().str() + " not aligned to " +
                                std::to_string(selected.size()) + " selected rows of width " + std::to_string(D));
  }
  std::vector<char> taken(N, 0);
  for (std::size_t i : selected) {
    if (i >= N) throw std::out_of_range("apply_replacement: patch index " + std::to_string(i) + " outside grid of " +
                                        std::to_string(N));
    if (taken[i]) throw std::invalid_argument("apply_replacement: patch index " + std::to_string(i) + " repeated");
    taken[i] = 1;
  }
  if (selected.empty()) return auxiliary;
  Tensor out = base;
  for (std::size_t k = 0; k < selected.size(); ++k) std::copy_n(&rv[k * D], D, &out[selected[k] * D]);
  std::vector<std::size_t> sel(selected.begin(), selected.end());
  const Var b = auxiliary.embeddings;
  const Var merged = g.record("apply_replacement", std::move(out), {b, recon},
                              [b, recon, sel, taken, D](Graph& gr, const Tensor& go) {
                                if (gr.requires_grad(b)) {
                                  Tensor& gb = gr.grad_buffer(b);
                                  for (std::size_t i = 0; i < taken.size(); ++i)
                                    if (!taken[i])
                                      for (std::size_t j = 0; j < D; ++j) gb[i * D + j] += go[i * D + j];
                                }
                                if (gr.requires_grad(recon)) {
                                  Tensor& grc = gr.grad_buffer(recon);
                                  for (std::size_t k = 0; k < sel.size(); ++k)
                                    for (std::size_t j = 0; j < D; ++j) grc[k * D + j] += go[sel[k] * D + j];
                                }
                              });
  return {auxiliary.grid, merged, auxiliary.modality};
}

// ---------------------------------------------------------- composite

struct Config {
  std::size_t patch = 4;
  std::size_t top_k = 20;
  std::size_t samples = 4;
  NoiseMode noise = NoiseMode::gaussian;
};

struct ReconBatch {
  Var samples;                        // [K,L,d]
  Var reconstructed;                  // [K,D]
  std::vector<std::size_t> selected;  // row k <-> patch selected[k]
};

struct Result {
  PatchSequence primary;
  PatchSequence auxiliary_embedded;  // before replacement
  PatchSequence auxiliary;           // after replacement
  DistParams dist_primary;
  DistParams dist_auxiliary;
  Var entropy;
  ScoreMaps maps;
  UncertaintySelection selection;
  ReconBatch recon;
  Var mse;
  Var kl;
};

inline Result forward(Graph& g, const Tensor& image_primary, const Tensor& image_auxiliary, const Params& p,
                      const Config& cfg, std::uint64_t seed) {
  require_rank(image_primary, 3, "surm::forward");
  require_rank(image_auxiliary, 3, "surm::forward");
  if (image_primary.dim(1) != image_auxiliary.dim(1) || image_primary.dim(2) != image_auxiliary.dim(2)) {
    throw std::invalid_argument("surm::forward: modality sizes differ, " + image_primary.shape().str() + " vs " +
                                image_auxiliary.shape().str());
  }
  const PatchGrid grid(image_primary.dim(1), image_primary.dim(2), cfg.patch);
  Result r;
  r.primary = {grid, embed(g, g.constant(patchify(image_primary, cfg.patch)), p.embed_primary), Modality::primary};
  r.auxiliary_embedded = {grid, embed(g, g.constant(patchify(image_auxiliary, cfg.patch)), p.embed_auxiliary),
                          Modality::auxiliary};
  r.auxiliary = r.auxiliary_embedded;
  r.dist_primary = dist_params(g, r.primary, p.le_primary);
  r.dist_auxiliary = dist_params(g, r.auxiliary_embedded, p.le_auxiliary);
  r.entropy = entropy_difference(g, r.dist_primary, r.dist_auxiliary);
  r.maps = score_map(g, r.entropy, p.score);
  r.selection.raw = g.value(r.maps.raw);
  r.selection.score = g.value(r.maps.score);
  r.selection.selected = select_topk(r.selection.score.data(), cfg.top_k);
  const auto& sel = r.selection.selected;
  r.recon.selected = sel;
  if (sel.empty()) {
    r.mse = g.constant(Tensor::scalar(0.0f));
    r.kl = g.constant(Tensor::scalar(0.0f));
    return r;
  }
  r.recon.samples = reparameterize(g, r.dist_primary, sel, cfg.samples, seed, cfg.noise);
  r.recon.reconstructed = reconstruct_patch(g, r.recon.samples, p.decoder);
  r.mse = recon_mse_loss(g, r.recon.reconstructed, gather_rows(g, r.primary.embeddings, sel));
  r.kl = kl_loss(g, r.dist_auxiliary, r.dist_primary, sel);
  r.auxiliary = apply_replacement(g, r.auxiliary_embedded, r.recon.reconstructed, sel);
  return r;
}

}  // namespace murtree::surm
