// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Paired primary/auxiliary scenes with exact tree-cover labels and injected
// cross-modal changes.
//
// Primary: bright smooth ground, dark textured tree crowns, and "lawn" blobs
// that share the crown colour but are smooth. Auxiliary: a DSM-like height
// map (tree = tree_height) plus Gaussian noise. Changed cells disagree with
// the label in the auxiliary image only.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "murtree/mtf.hpp"
#include "murtree/patch_grid.hpp"
#include "murtree/pgm.hpp"
#include "murtree/rng.hpp"
#include "murtree/tensor.hpp"

namespace murtree::synth {

struct SceneSpec {
  std::size_t size = 64;
  std::size_t patch = 4;
  std::size_t tree_min = 3, tree_max = 6;
  float radius_min = 5.0f, radius_max = 12.0f;
  std::size_t lawn_min = 1, lawn_max = 3;
  std::size_t change_cells = 20;
  float tree_height = 1.0f;
  float noise = 0.05f;
  bool speckle = false;  // multiplicative SAR-style noise on the auxiliary band
  std::uint64_t seed = 0;

  void validate() const {
    const PatchGrid grid(size, size, patch);
    if (change_cells > grid.count()) {
      throw std::invalid_argument("SceneSpec: " + std::to_string(change_cells) + " change cells exceed the " +
                                  std::to_string(grid.count()) + "-cell grid");
    }
    if (tree_min > tree_max || lawn_min > lawn_max || !(radius_min > 0.0f) || radius_min > radius_max) {
      throw std::invalid_argument("SceneSpec: inverted range");
    }
    if (!(noise >= 0.0f)) throw std::invalid_argument("SceneSpec: noise must be >= 0");
  }
};

struct SceneSample {
  Tensor primary;    // [3,H,W]
  Tensor auxiliary;  // [1,H,W]
  Tensor label;      // [1,H,W], 1 = tree
  Tensor edge;       // [1,H,W]
  std::vector<std::size_t> changed;  // grid cell indices, ascending
};

/// Dilation minus erosion with a 3x3 window; out-of-image pixels are ignored.
inline Tensor morphological_gradient(const Tensor& mask) {
  require_rank(mask, 3, "morphological_gradient");
  const auto H = static_cast<long>(mask.dim(1)), W = static_cast<long>(mask.dim(2));
  Tensor out(mask.shape());
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      float lo = 1.0f, hi = 0.0f;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          const float v = mask.at(0, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) >= 0.5f ? 1.0f : 0.0f;
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      out.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = hi - lo;
    }
  return out;
}

namespace detail {

struct Blob {
  double cy, cx, r, wobble, freq, phase;
};

inline std::vector<Blob> draw_blobs(const Stream& s, std::size_t lo, std::size_t hi, double rmin, double rmax,
                                    std::size_t size) {
  const std::size_t n = lo + s.below(hi - lo + 1, 0);
  std::vector<Blob> blobs(n);
  for (std::size_t b = 0; b < n; ++b) {
    const Stream t = s.sub(b + 1);
    blobs[b] = {t.uniform(0.0, static_cast<double>(size), 0), t.uniform(0.0, static_cast<double>(size), 1),
                t.uniform(rmin, rmax, 2),                      t.uniform(0.0, 0.25, 3),
                static_cast<double>(2 + t.below(4, 4)),        t.uniform(0.0, 2.0 * std::numbers::pi, 5)};
  }
  return blobs;
}

inline bool inside(const std::vector<Blob>& blobs, double y, double x) {
  for (const Blob& b : blobs) {
    const double dy = y - b.cy, dx = x - b.cx;
    const double r = b.r * (1.0 + b.wobble * std::sin(b.freq * std::atan2(dy, dx) + b.phase));
    if (dy * dy + dx * dx <= r * r) return true;
  }
  return false;
}

}  // namespace detail

inline SceneSample generate_scene(const SceneSpec& spec) {
  spec.validate();
  const std::size_t S = spec.size, P = S * S;
  const PatchGrid grid(S, S, spec.patch);
  const Stream root(spec.seed);

  const auto trees = detail::draw_blobs(root.sub("trees"), spec.tree_min, spec.tree_max, spec.radius_min,
                                        spec.radius_max, S);
  const auto lawns = detail::draw_blobs(root.sub("lawns"), spec.lawn_min, spec.lawn_max, spec.radius_min * 0.6,
                                        spec.radius_max * 0.6, S);

  SceneSample out{Tensor{Shape{3, S, S}}, Tensor{Shape{1, S, S}}, Tensor{Shape{1, S, S}}, Tensor{Shape{1, S, S}}, {}};

  // Smooth ground: a few low-frequency waves around a sandy tone.
  const Stream bg = root.sub("ground");
  double wave[3][4];
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 4; ++j) wave[k][j] = bg.uniform(k * 4 + j);
  const float ground[3] = {0.78f, 0.72f, 0.58f};
  const float crown[3] = {0.18f, 0.36f, 0.14f};

  const Stream tex = root.sub("texture");
  const Stream grain = root.sub("grain");
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const std::size_t p = y * S + x;
      const double cy = static_cast<double>(y) + 0.5, cx = static_cast<double>(x) + 0.5;
      const bool tree = detail::inside(trees, cy, cx);
      const bool lawn = !tree && detail::inside(lawns, cy, cx);
      out.label[p] = tree ? 1.0f : 0.0f;
      double shade = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double fy = 1.0 + 3.0 * wave[k][0], fx = 1.0 + 3.0 * wave[k][1];
        shade += 0.03 * std::sin(2.0 * std::numbers::pi * (fy * cy + fx * cx) / static_cast<double>(S) +
                                 2.0 * std::numbers::pi * wave[k][2]);
      }
      const double t = tree ? 0.12 * tex.normal(p) : 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = (tree || lawn) ? crown[c] : ground[c] + shade;
        const double v = base + t + 0.015 * grain.normal(p * 3 + c);
        out.primary[c * P + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }

  // Changed cells: trees felled after the primary acquisition. Cells that are
  // mostly crown are picked first (seeded shuffle) and lose their height in
  // the auxiliary image; if a scene has too few of them, the rest are random
  // open cells that gain a full-cell structure instead.
  const Stream pick = root.sub("changes");
  std::vector<std::size_t> crowned, open;
  for (std::size_t cell = 0; cell < grid.count(); ++cell) {
    const std::size_t y0 = grid.row_of(cell) * spec.patch, x0 = grid.col_of(cell) * spec.patch;
    float cover = 0.0f;
    for (std::size_t dy = 0; dy < spec.patch; ++dy)
      for (std::size_t dx = 0; dx < spec.patch; ++dx) cover += out.label[(y0 + dy) * S + x0 + dx];
    (2.0f * cover >= static_cast<float>(spec.patch * spec.patch) ? crowned : open).push_back(cell);
  }
  std::uint64_t draw = 0;
  auto shuffle_prefix = [&](std::vector<std::size_t>& v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) std::swap(v[i], v[i + pick.below(v.size() - i, draw++)]);
  };
  const std::size_t felled = std::min(spec.change_cells, crowned.size());
  shuffle_prefix(crowned, felled);
  shuffle_prefix(open, spec.change_cells - felled);
  // 0 = unchanged, 1 = height removed, 2 = height added.
  std::vector<char> change(P, 0);
  auto mark = [&](std::size_t cell, char kind) {
    out.changed.push_back(cell);
    const std::size_t y0 = grid.row_of(cell) * spec.patch, x0 = grid.col_of(cell) * spec.patch;
    for (std::size_t dy = 0; dy < spec.patch; ++dy)
      for (std::size_t dx = 0; dx < spec.patch; ++dx) change[(y0 + dy) * S + x0 + dx] = kind;
  };
  for (std::size_t i = 0; i < felled; ++i) mark(crowned[i], 1);
  for (std::size_t i = 0; i < spec.change_cells - felled; ++i) mark(open[i], 2);
  std::sort(out.changed.begin(), out.changed.end());

  const Stream noise = root.sub("aux-noise");
  for (std::size_t p = 0; p < P; ++p) {
    const bool tall = change[p] == 0 ? out.label[p] >= 0.5f : change[p] == 2;
    const double h = tall ? spec.tree_height : 0.0;
    const double n = spec.noise * noise.normal(p);
    out.auxiliary[p] = static_cast<float>(spec.speckle ? h * (1.0 + n) + std::abs(n) : h + n);
  }
  out.edge = morphological_gradient(out.label);
  return out;
}

// ------------------------------------------------------------ dataset

struct SplitRatios {
  double train = 0.7, val = 0.15, test = 0.15;
};

struct SplitSizes {
  std::size_t train, val, test;
};

inline SplitSizes split_sizes(std::size_t count, const SplitRatios& r) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must be nonnegative and sum to 1");
  }
  const auto n = static_cast<double>(count);
  const auto tr = static_cast<std::size_t>(std::llround(n * r.train));
  const auto va = std::min(static_cast<std::size_t>(std::llround(n * r.val)), count - tr);
  return {tr, va, count - tr - va};
}

struct ManifestEntry {
  std::size_t id = 0;
  std::string primary_path, auxiliary_path, label_path, edge_path;
  std::vector<std::size_t> changed_cells;
  std::string split;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = {{"id", e.id},
       {"primary_path", e.primary_path},
       {"auxiliary_path", e.auxiliary_path},
       {"label_path", e.label_path},
       {"edge_path", e.edge_path},
       {"changed_cells", e.changed_cells},
       {"split", e.split}};
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  j.at("id").get_to(e.id);
  j.at("primary_path").get_to(e.primary_path);
  j.at("auxiliary_path").get_to(e.auxiliary_path);
  j.at("label_path").get_to(e.label_path);
  j.at("edge_path").get_to(e.edge_path);
  j.at("changed_cells").get_to(e.changed_cells);
  j.at("split").get_to(e.split);
}

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Per-sample spec: the base spec reseeded from (seed, sample index).
inline SceneSpec sample_spec(const SceneSpec& base, std::size_t index) {
  SceneSpec s = base;
  s.seed = Stream(base.seed).sub("scene").sub(index).bits(0);
  return s;
}

/// Split label per sample index from a seeded shuffle.
inline std::vector<std::string> assign_splits(std::size_t count, const SplitRatios& r, std::uint64_t seed) {
  const SplitSizes sz = split_sizes(count, r);
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  const Stream s = Stream(seed).sub("split");
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[s.below(i, i)]);
  std::vector<std::string> split(count);
  for (std::size_t k = 0; k < count; ++k)
    split[order[k]] = k < sz.train ? "train" : (k < sz.train + sz.val ? "val" : "test");
  return split;
}

/// Writes MTF1 tensors, PGM previews and the manifest under `dir`.
inline std::vector<ManifestEntry> write_dataset(const std::filesystem::path& dir, const SceneSpec& base,
                                                std::size_t count, const SplitRatios& ratios) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "scenes");
  const auto split = assign_splits(count, ratios, base.seed);
  std::vector<ManifestEntry> entries;
  entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const SceneSample s = generate_scene(sample_spec(base, i));
    char stem[32];
    std::snprintf(stem, sizeof stem, "scenes/%04zu", i);
    const std::string st(stem);
    ManifestEntry e{i, st + "_primary.mtf", st + "_auxiliary.mtf", st + "_label.mtf", st + "_edge.mtf", s.changed,
                    split[i]};
    mtf::save(dir / e.primary_path, s.primary);
    mtf::save(dir / e.auxiliary_path, s.auxiliary);
    mtf::save(dir / e.label_path, s.label);
    mtf::save(dir / e.edge_path, s.edge);
    Tensor lum{Shape{1, base.size, base.size}};
    const std::size_t P = base.size * base.size;
    for (std::size_t p = 0; p < P; ++p) lum[p] = (s.primary[p] + s.primary[P + p] + s.primary[2 * P + p]) / 3.0f;
    pgm::save(dir / (st + "_primary.pgm"), lum);
    pgm::save(dir / (st + "_auxiliary.pgm"), s.auxiliary);
    pgm::save(dir / (st + "_label.pgm"), s.label);
    entries.push_back(std::move(e));
  }
  std::ofstream m(dir / kManifestName, std::ios::binary);
  if (!m) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (const auto& e : entries) m << nlohmann::json(e).dump() << '\n';
  if (!m) throw std::runtime_error("failed writing manifest in " + dir.string());
  return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / kManifestName);
  if (!f) throw std::runtime_error("no dataset manifest at " + (dir / kManifestName).string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line).get<ManifestEntry>());
  }
  return out;
}

}  // namespace murtree::synth
