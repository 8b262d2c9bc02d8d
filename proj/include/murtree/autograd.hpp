// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "murtree/tensor.hpp"

namespace murtree {

/// Handle to a node recorded on a Graph.
struct Var {
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kNone;
  [[nodiscard]] bool valid() const noexcept { return id != kNone; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order; backward()
/// walks them in reverse. References from value() stay valid while the graph
/// lives. A graph belongs to one thread for its lifetime.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

  Var constant(Tensor value) { return push("constant", std::move(value), false, {}); }

  /// Leaf whose gradient is collected.
  Var variable(Tensor value) { return push("variable", std::move(value), true, {}); }

  /// Records an op result. `backward` is dropped when no parent needs a gradient.
  Var record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).requires_grad;
    return push(op, std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  [[nodiscard]] const Tensor& value(Var v) const { return node(v).value; }
  [[nodiscard]] bool requires_grad(Var v) const { return node(v).requires_grad; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of `v`, allocated with zeros on first use.
  Tensor& grad_buffer(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(Var v, const Tensor& g) {
    if (!requires_grad(v)) return;
    grad_buffer(v) += g;
  }

  /// Gradient of the last backward() root w.r.t. `v` (zeros if unreached).
  [[nodiscard]] Tensor grad(Var v) const {
    const Node& n = node(v);
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  /// Seeds d(root)/d(root) = 1; root must hold exactly one value.
  void backward(Var root) {
    if (value(root).size() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got shape " + value(root).shape().str());
    }
    for (auto& n : nodes_) n.has_grad = false;
    grad_buffer(root).fill(1.0f);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(std::string_view op, Tensor value, bool requires_grad, BackwardFn backward) {
    if (!value.all_finite()) {
      throw std::domain_error("non-finite value produced by op '" + std::string(op) + "'");
    }
    nodes_.push_back(Node{op, std::move(value), Tensor(), false, requires_grad, std::move(backward)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
    return nodes_[v.id];
  }
  [[nodiscard]] const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("Var does not belong to this graph");
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
};

}  // namespace murtree
