// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Non-overlapping PxP patch grid. Patch i <-> (row, col) is row-major and
// 0-based everywhere (selection sets, score maps, manifests). Within a patch
// pixels are flattened channel-major, then row, then column.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "murtree/ops.hpp"
#include "murtree/params.hpp"

namespace murtree {

enum class Modality { primary, auxiliary };

class PatchGrid {
 public:
  PatchGrid() : PatchGrid(1, 1, 1) {}
  PatchGrid(std::size_t height, std::size_t width, std::size_t patch) : height_(height), width_(width), patch_(patch) {
    if (patch == 0) throw std::invalid_argument("PatchGrid: patch size must be positive");
    if (height % patch != 0 || width % patch != 0) {
      const std::size_t ph = (patch - height % patch) % patch, pw = (patch - width % patch) % patch;
      throw std::invalid_argument("PatchGrid: " + std::to_string(height) + "x" + std::to_string(width) +
                                  " is not divisible by patch size " + std::to_string(patch) + "; pad by " +
                                  std::to_string(ph) + " rows and " + std::to_string(pw) + " columns");
    }
  }

  [[nodiscard]] std::size_t height() const noexcept { return height_; }
  [[nodiscard]] std::size_t width() const noexcept { return width_; }
  [[nodiscard]] std::size_t patch() const noexcept { return patch_; }
  [[nodiscard]] std::size_t rows() const noexcept { return height_ / patch_; }
  [[nodiscard]] std::size_t cols() const noexcept { return width_ / patch_; }
  [[nodiscard]] std::size_t count() const noexcept { return rows() * cols(); }

  [[nodiscard]] std::size_t index(std::size_t row, std::size_t col) const noexcept { return row * cols() + col; }
  [[nodiscard]] std::size_t row_of(std::size_t i) const noexcept { return i / cols(); }
  [[nodiscard]] std::size_t col_of(std::size_t i) const noexcept { return i % cols(); }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;

 private:
  std::size_t height_, width_, patch_;
};

/// [C,H,W] -> [N, C*P*P].
inline Tensor patchify(const Tensor& image, std::size_t patch) {
  require_rank(image, 3, "patchify");
  const PatchGrid grid(image.dim(1), image.dim(2), patch);
  const std::size_t C = image.dim(0), P = patch, len = C * P * P;
  Tensor out{Shape{grid.count(), len}};
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const std::size_t y0 = grid.row_of(i) * P, x0 = grid.col_of(i) * P;
    float* row = &out[i * len];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t dy = 0; dy < P; ++dy)
        for (std::size_t dx = 0; dx < P; ++dx) *row++ = image.at(c, y0 + dy, x0 + dx);
  }
  return out;
}

/// Inverse of patchify.
inline Tensor unpatchify(const Tensor& raw, const PatchGrid& grid, std::size_t channels) {
  const std::size_t P = grid.patch(), len = channels * P * P;
  if (raw.rank() != 2 || raw.dim(0) != grid.count() || raw.dim(1) != len) {
    throw std::invalid_argument("unpatchify: raw patches " + raw.shape().str() + " do not match grid of " +
                                std::to_string(grid.count()) + " patches of length " + std::to_string(len));
  }
  Tensor image{Shape{channels, grid.height(), grid.width()}};
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const std::size_t y0 = grid.row_of(i) * P, x0 = grid.col_of(i) * P;
    const float* row = &raw[i * len];
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t dy = 0; dy < P; ++dy)
        for (std::size_t dx = 0; dx < P; ++dx) image.at(c, y0 + dy, x0 + dx) = *row++;
  }
  return image;
}

/// The N patch embeddings of one modality, row i = patch i.
struct PatchSequence {
  PatchGrid grid;
  Var embeddings;  // [N, D]
  Modality modality = Modality::primary;
};

/// Per-patch affine projection [N, C*P*P] -> [N, D].
inline Var embed(Graph& g, Var raw, const Dense& proj) { return affine(g, raw, proj.weight, proj.bias); }

/// [N, D] -> [D, rows, cols]; embedding i lands at cell (row_of(i), col_of(i)).
inline Var reassemble(Graph& g, const PatchSequence& seq) {
  const Tensor& e = g.value(seq.embeddings);
  require_rank(e, 2, "reassemble");
  if (e.dim(0) != seq.grid.count()) {
    throw std::invalid_argument("reassemble: " + std::to_string(e.dim(0)) + " embeddings for a grid of " +
                                std::to_string(seq.grid.count()) + " cells");
  }
  const Var t = transpose2d(g, seq.embeddings);
  return reshape(g, t, Shape{e.dim(1), seq.grid.rows(), seq.grid.cols()});
}

/// [D, rows, cols] -> [rows*cols, D]; inverse of reassemble.
inline Var flatten_grid(Graph& g, Var map) {
  const Tensor& m = g.value(map);
  require_rank(m, 3, "flatten_grid");
  const Var flat = reshape(g, map, Shape{m.dim(0), m.dim(1) * m.dim(2)});
  return transpose2d(g, flat);
}

}  // namespace murtree
