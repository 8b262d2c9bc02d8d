// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "murtree/autograd.hpp"
#include "murtree/rng.hpp"
#include "murtree/tensor.hpp"

namespace murtree {

/// Named parameter tensors, iterated in lexicographic name order.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor>;

  void set(const std::string& name, Tensor t) { params_[name] = std::move(t); }

  [[nodiscard]] const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) { return const_cast<Tensor&>(std::as_const(*this).at(name)); }

  [[nodiscard]] bool contains(const std::string& name) const { return params_.count(name) != 0; }
  [[nodiscard]] std::size_t count() const noexcept { return params_.size(); }
  [[nodiscard]] std::size_t numel() const noexcept {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  [[nodiscard]] Map::const_iterator begin() const noexcept { return params_.begin(); }
  [[nodiscard]] Map::const_iterator end() const noexcept { return params_.end(); }
  Map::iterator begin() noexcept { return params_.begin(); }
  Map::iterator end() noexcept { return params_.end(); }

 private:
  Map params_;
};

/// fc: weight [in,out], bias [out].
struct Dense {
  Var weight;
  Var bias;
};

/// 3x3 convolution: kernel [F,C,3,3], bias [F].
struct Conv {
  Var kernel;
  Var bias;
};

struct Norm {
  Var gamma;
  Var beta;
};

// He-normal weights, zero bias.
inline void init_dense(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       std::uint64_t seed, float gain = 2.0f) {
  const Stream rng = Stream(seed).sub(name);
  Tensor w{Shape{in, out}};
  const double sd = std::sqrt(gain / static_cast<double>(in));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(sd * rng.normal(i));
  store.set(name + ".weight", std::move(w));
  store.set(name + ".bias", Tensor(Shape{out}));
}

inline void init_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                      std::uint64_t seed) {
  const Stream rng = Stream(seed).sub(name);
  Tensor k{Shape{out, in, 3, 3}};
  const double sd = std::sqrt(2.0 / static_cast<double>(in * 9));
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<float>(sd * rng.normal(i));
  store.set(name + ".kernel", std::move(k));
  store.set(name + ".bias", Tensor(Shape{out}));
}

inline void init_norm(ParamStore& store, const std::string& name, std::size_t channels) {
  store.set(name + ".gamma", Tensor(Shape{channels}, 1.0f));
  store.set(name + ".beta", Tensor(Shape{channels}));
}

/// Places parameters on a graph as leaves on first use and collects their
/// gradients after backward().
class ParamBinder {
 public:
  ParamBinder(Graph& g, const ParamStore& store, bool trainable = true)
      : g_(g), store_(store), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor& t = store_.at(name);
    const Var v = trainable_ ? g_.variable(t) : g_.constant(t);
    bound_.emplace(name, v);
    return v;
  }

  /// Uses `v` for `name` instead of the stored tensor (e.g. to probe one parameter).
  void preset(const std::string& name, Var v) { bound_[name] = v; }

  Dense dense(const std::string& prefix) { return {(*this)(prefix + ".weight"), (*this)(prefix + ".bias")}; }
  Conv conv(const std::string& prefix) { return {(*this)(prefix + ".kernel"), (*this)(prefix + ".bias")}; }
  Norm norm(const std::string& prefix) { return {(*this)(prefix + ".gamma"), (*this)(prefix + ".beta")}; }

  [[nodiscard]] Graph& graph() noexcept { return g_; }

  /// Gradients for every bound parameter (zeros where unreached).
  [[nodiscard]] ParamStore gradients() const {
    ParamStore grads;
    for (const auto& [name, v] : bound_) grads.set(name, g_.grad(v));
    return grads;
  }

 private:
  Graph& g_;
  const ParamStore& store_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

}  // namespace murtree
