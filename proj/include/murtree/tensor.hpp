// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace murtree {

/// Extents of a dense row-major array, rank 0 to 4.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<std::size_t> dims) : Shape(std::span<const std::size_t>(dims.begin(), dims.size())) {}

  explicit Shape(std::span<const std::size_t> dims) {
    if (dims.size() > kMaxRank) {
      throw std::invalid_argument("Shape: rank " + std::to_string(dims.size()) + " exceeds 4");
    }
    rank_ = dims.size();
    std::copy(dims.begin(), dims.end(), dims_.begin());
  }

  [[nodiscard]] std::size_t rank() const noexcept { return rank_; }
  [[nodiscard]] std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  [[nodiscard]] std::size_t back() const { return dims_.at(rank_ - 1); }
  [[nodiscard]] std::span<const std::size_t> dims() const noexcept { return {dims_.data(), rank_}; }

  [[nodiscard]] std::size_t numel() const noexcept {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    return a.rank_ == b.rank_ && std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
  }

  [[nodiscard]] std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Dense row-major array of 32-bit floats.
class Tensor {
 public:
  Tensor() : shape_({0}) {}

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(shape), data_(shape.numel(), fill) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw std::invalid_argument("Tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                                  shape_.str());
    }
  }

  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }
  static Tensor vector(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.rank(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_[i]; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  [[nodiscard]] std::span<float> data() noexcept { return data_; }
  [[nodiscard]] std::span<const float> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<float>& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  const float& operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  [[nodiscard]] float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  [[nodiscard]] float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// Single value of a one-element tensor.
  [[nodiscard]] float item() const {
    if (data_.size() != 1) throw std::logic_error("Tensor::item on shape " + shape_.str());
    return data_[0];
  }

  [[nodiscard]] Tensor reshaped(Shape s) const {
    if (s.numel() != shape_.numel()) {
      throw std::invalid_argument("reshape: " + shape_.str() + " -> " + s.str() + " changes element count");
    }
    return Tensor(s, data_);
  }

  [[nodiscard]] bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    if (!(o.shape_ == shape_)) throw std::invalid_argument("+=: " + shape_.str() + " vs " + o.shape_.str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept {
    if (!(a.shape_ == b.shape_)) return false;
    return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](float x, float y) {
      return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
    });
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

inline Tensor map(const Tensor& t, const std::function<float(float)>& f) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = f(t[i]);
  return out;
}

inline float max_value(const Tensor& t) {
  if (t.size() == 0) throw std::invalid_argument("max_value of empty tensor");
  return *std::max_element(t.data().begin(), t.data().end());
}

inline float min_value(const Tensor& t) {
  if (t.size() == 0) throw std::invalid_argument("min_value of empty tensor");
  return *std::min_element(t.data().begin(), t.data().end());
}

/// Throws unless `t` has rank `r`; `who` names the caller in the message.
inline void require_rank(const Tensor& t, std::size_t r, const char* who) {
  if (t.rank() != r) {
    throw std::invalid_argument(std::string(who) + ": expected rank " + std::to_string(r) + ", got shape " +
                                t.shape().str());
  }
}

}  // namespace murtree
