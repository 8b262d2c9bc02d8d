// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// MTF1 tensor files: magic "MTF1", u32 LE rank, rank x u32 LE extents,
// then the f32 LE values in row-major order.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "murtree/tensor.hpp"

namespace murtree::mtf {

inline constexpr std::array<char, 4> kMagic{'M', 'T', 'F', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                              static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw std::runtime_error("MTF1: truncated stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape().dims()) detail::put_u32(os, static_cast<std::uint32_t>(e));
  std::vector<char> buf(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xFF);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("MTF1: write failed");
}

inline Tensor read(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kMagic) throw std::runtime_error("MTF1: bad magic");
  const std::uint32_t rank = detail::get_u32(is);
  if (rank > Shape::kMaxRank) throw std::runtime_error("MTF1: rank " + std::to_string(rank) + " > 4");
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims) d = detail::get_u32(is);
  const Shape shape(dims);
  std::vector<unsigned char> buf(shape.numel() * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw std::runtime_error("MTF1: truncated payload");
  std::vector<float> values(shape.numel());
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(buf[i * 4 + k]) << (8 * k);
    values[i] = std::bit_cast<float>(bits);
  }
  return Tensor(shape, std::move(values));
}

inline void save(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("MTF1: cannot open " + path.string() + " for writing");
  write(os, t);
}

inline Tensor load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("MTF1: cannot open " + path.string());
  return read(is);
}

}  // namespace murtree::mtf
