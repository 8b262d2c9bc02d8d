// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// 8-bit binary PGM (P5) heatmaps with linear min-max scaling. The scaling
// range is recorded in a comment line so maps can be read back quantitatively.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

#include "murtree/tensor.hpp"

namespace murtree::pgm {

/// Writes band 0 of a [C,H,W] (or [H,W]) tensor scaled so min -> 0 and max -> 255.
/// A constant map is written as all zeros.
inline void write(std::ostream& os, const Tensor& t) {
  std::size_t H = 0, W = 0;
  if (t.rank() == 3) {
    H = t.dim(1);
    W = t.dim(2);
  } else if (t.rank() == 2) {
    H = t.dim(0);
    W = t.dim(1);
  } else {
    throw std::invalid_argument("pgm::write: expected [C,H,W] or [H,W], got " + t.shape().str());
  }
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < H * W; ++i) {
    lo = std::min(lo, t[i]);
    hi = std::max(hi, t[i]);
  }
  if (H * W == 0) lo = hi = 0.0f;
  std::ostringstream header;
  header.precision(9);
  header << "P5\n# linear min-max scaling: 0 -> " << lo << ", 255 -> " << hi << "\n" << W << ' ' << H << "\n255\n";
  os << header.str();
  const double span = static_cast<double>(hi) - lo;
  for (std::size_t i = 0; i < H * W; ++i) {
    const double v = span > 0.0 ? (t[i] - lo) / span * 255.0 : 0.0;
    os.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(v))));
  }
  if (!os) throw std::runtime_error("pgm::write: stream failure");
}

inline void save(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write(f, t);
}

namespace detail {

inline std::size_t next_number(std::istream& is) {
  for (;;) {
    const int c = is.peek();
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(is >> v)) throw std::runtime_error("pgm::read: malformed header");
  return v;
}

}  // namespace detail

/// Raw 8-bit values as [1,H,W] floats in [0,255].
inline Tensor read(std::istream& is) {
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (!is || magic[0] != 'P' || magic[1] != '5') throw std::runtime_error("pgm::read: not a binary PGM");
  const std::size_t W = detail::next_number(is), H = detail::next_number(is), maxval = detail::next_number(is);
  if (maxval != 255) throw std::runtime_error("pgm::read: only 8-bit maps are supported");
  is.get();
  Tensor out{Shape{1, H, W}};
  for (std::size_t i = 0; i < H * W; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error("pgm::read: truncated pixel data");
    out[i] = static_cast<float>(static_cast<unsigned char>(c));
  }
  return out;
}

inline Tensor load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return read(f);
}

}  // namespace murtree::pgm
