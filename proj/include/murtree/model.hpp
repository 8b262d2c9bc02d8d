// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// The full network: SURM on the patch sequences, one convolutional encoder
// per modality over the reassembled patch grid, CDM at a chosen encoder
// stage, and the refinement decoder.
//
// Encoder stage s (1-based) has channels[s-1] and runs at grid/2^(s-1).
// The decoder walks back up: d = unit(a_4), d = unit(a_s + d), ...,
// head(a_1 + d), where a_s aligns the two modalities at stage s.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "murtree/cdm.hpp"
#include "murtree/config.hpp"
#include "murtree/decoder.hpp"
#include "murtree/losses.hpp"
#include "murtree/ops.hpp"
#include "murtree/params.hpp"
#include "murtree/patch_grid.hpp"
#include "murtree/surm.hpp"

namespace murtree::model {

struct Sample {
  std::size_t id = 0;
  Tensor primary;    // [3,H,W]
  Tensor auxiliary;  // [1,H,W]
  Tensor label;      // [1,H,W]
  Tensor edge;       // [1,H,W]
  std::vector<std::size_t> changed;
};

inline surm::Shapes surm_shapes(const RunConfig& c, std::size_t primary_channels, std::size_t auxiliary_channels) {
  return {primary_channels, auxiliary_channels, c.data.patch,   c.model.embed_dim, c.model.latent_dim,
          c.model.le_hidden, c.model.recon_hidden, c.model.score_hidden, c.surm.samples};
}

inline std::string stage_name(const char* modality, std::size_t s) {
  return std::string("encoder_") + modality + ".stage" + std::to_string(s);
}

/// Fresh parameters for images with the given band counts.
inline ParamStore init(const RunConfig& c, std::size_t primary_channels = 3, std::size_t auxiliary_channels = 1) {
  c.validate();
  ParamStore s;
  const std::uint64_t seed = Stream(c.seed).sub("init").bits(0);
  const auto score_init = c.model.score_init == "identity"  ? surm::ScoreInit::identity
                          : c.model.score_init == "negated" ? surm::ScoreInit::negated
                                                            : surm::ScoreInit::magnitude;
  surm::init(s, "surm", surm_shapes(c, primary_channels, auxiliary_channels), seed, score_init);
  const auto& ch = c.model.channels;
  for (const char* m : {"primary", "auxiliary"})
    for (std::size_t st = 1; st <= ch.size(); ++st) {
      init_conv(s, stage_name(m, st) + ".conv", st == 1 ? c.model.embed_dim : ch[st - 2], ch[st - 1], seed);
      init_norm(s, stage_name(m, st) + ".norm", ch[st - 1]);
    }
  cdm::init(s, "cdm", ch[c.model.cdm_stage - 1], c.model.proj_dim, seed);
  for (std::size_t st = 1; st <= ch.size(); ++st) {
    decoder::init_align(s, "decoder.align" + std::to_string(st), ch[st - 1], ch[st - 1], ch[st - 1], c.model.se_ratio,
                        seed);
    if (st > 1) decoder::init_unit(s, "decoder.unit" + std::to_string(st), ch[st - 1], c.model.se_ratio, seed);
  }
  decoder::init_head(s, "decoder.head", ch[0], c.model.head_width, seed);
  return s;
}

struct Output {
  surm::Result surm;
  decoder::Attention attention;
  decoder::SegOutput seg;
  Var cdm;
  Var calibration;
};

inline std::vector<Var> encode(Graph& g, ParamBinder& p, Var grid_map, const char* modality, std::size_t stages) {
  std::vector<Var> feats;
  Var x = grid_map;
  for (std::size_t st = 1; st <= stages; ++st) {
    const std::string n = stage_name(modality, st);
    x = decoder::conv_bn_relu(g, x, p.conv(n + ".conv"), p.norm(n + ".norm"), st == 1 ? 1 : 2);
    feats.push_back(x);
  }
  return feats;
}

/// Forward pass; `noise_seed` keys the reparameterisation draws.
inline Output forward(Graph& g, ParamBinder& p, const RunConfig& c, const Tensor& primary, const Tensor& auxiliary,
                      std::uint64_t noise_seed) {
  Output out;
  const surm::Params sp = surm::bind(p, "surm");
  const surm::Config scfg{c.data.patch, c.surm.k, c.surm.samples, surm::NoiseMode::gaussian};
  out.surm = surm::forward(g, primary, auxiliary, sp, scfg, noise_seed);

  // Dense calibration: every auxiliary latent is pulled toward the
  // primary latent of the same patch, so the entropy difference measures
  // cross-modal disagreement rather than the heads' arbitrary offsets.
  if (c.calibration > 0.0f) {
    const std::size_t N = out.surm.primary.grid.count();
    std::vector<std::size_t> all(N);
    for (std::size_t i = 0; i < N; ++i) all[i] = i;
    out.calibration =
        scale(g, surm::kl_loss(g, out.surm.dist_auxiliary, out.surm.dist_primary, all), 1.0f / static_cast<float>(N));
  } else {
    out.calibration = g.constant(Tensor::scalar(0.0f));
  }

  const auto& ch = c.model.channels;
  const std::size_t S = ch.size();
  const auto fp = encode(g, p, reassemble(g, out.surm.primary), "primary", S);
  const auto fa = encode(g, p, reassemble(g, out.surm.auxiliary), "auxiliary", S);

  const std::size_t cs = c.model.cdm_stage - 1;
  const cdm::ProjectionHeads heads = cdm::bind(p, "cdm");
  out.cdm = cdm::cdm_loss(g, cdm::project(g, flatten_grid(g, fp[cs]), heads.primary),
                          cdm::project(g, flatten_grid(g, fa[cs]), heads.auxiliary));

  out.attention = decoder::gma(g, g.constant(primary), c.model.gamma);
  const Var att = detach(g, out.attention.map);

  std::optional<Var> d;
  for (std::size_t st = S; st >= 1; --st) {
    Var a = decoder::align_unit(g, fp[st - 1], fa[st - 1], decoder::bind_align(p, "decoder.align" + std::to_string(st)));
    if (d) a = add(g, a, *d);
    if (st == 1) {
      out.seg = decoder::refinement_head(g, a, decoder::bind_head(p, "decoder.head"));
      break;
    }
    // Units st = 2..gma_units+1 are the highest-resolution ones.
    const std::optional<Var> gate = st <= c.model.gma_units + 1 ? std::optional<Var>(att) : std::nullopt;
    d = decoder::decoder_unit(g, a, gate, decoder::bind_unit(p, "decoder.unit" + std::to_string(st)));
  }
  return out;
}

struct Losses {
  LossTerms terms;
  Var total;  // L_total + calibration
};

inline Losses losses(Graph& g, const Output& o, const Sample& s, const RunConfig& c) {
  Losses l;
  l.terms = {soft_iou_loss(g, o.seg.seg_prob, s.label), soft_iou_loss(g, o.seg.edge_prob, s.edge), o.surm.mse,
             o.surm.kl, o.cdm};
  const Var objective = total_loss(g, l.terms, c.loss);
  l.total = weighted_sum(g, {objective, o.calibration}, {1.0f, c.calibration});
  return l;
}

}  // namespace murtree::model
