// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace murtree {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// FNV-1a, used to turn parameter names into stream tags.
inline constexpr std::uint64_t hash_name(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Counter-based random stream. Every draw is a pure function of
/// (key, counters), so the order in which draws are requested never
/// changes the values; parallel evaluation cannot reorder randomness.
class Stream {
 public:
  constexpr explicit Stream(std::uint64_t seed) noexcept : key_(splitmix64(seed)) {}

  /// Derive an independent child stream.
  [[nodiscard]] constexpr Stream sub(std::uint64_t tag) const noexcept {
    Stream s(0);
    s.key_ = splitmix64(key_ ^ splitmix64(tag + 0x632BE59BD9B4E019ull));
    return s;
  }
  [[nodiscard]] constexpr Stream sub(std::string_view tag) const noexcept { return sub(hash_name(tag)); }

  [[nodiscard]] constexpr std::uint64_t bits(std::uint64_t counter) const noexcept {
    return splitmix64(key_ ^ splitmix64(counter * 0xD1B54A32D192ED03ull + 1));
  }

  /// Uniform on the open interval (0, 1).
  [[nodiscard]] double uniform(std::uint64_t counter) const noexcept {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  [[nodiscard]] double uniform(double lo, double hi, std::uint64_t counter) const noexcept {
    return lo + (hi - lo) * uniform(counter);
  }

  /// Integer in [0, n). n must be positive.
  [[nodiscard]] std::uint64_t below(std::uint64_t n, std::uint64_t counter) const noexcept {
    return static_cast<std::uint64_t>(uniform(counter) * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller on two keyed uniforms.
  [[nodiscard]] double normal(std::uint64_t counter) const noexcept {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_;
};

}  // namespace murtree
