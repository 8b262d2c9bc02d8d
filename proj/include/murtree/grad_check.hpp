// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "murtree/autograd.hpp"

namespace murtree {

using ScalarFn = std::function<Var(Graph&, Var)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-3) {
  Graph g;
  const Var xv = g.variable(x);
  const Var y = f(g, xv);
  if (g.value(y).size() != 1) {
    throw std::invalid_argument("grad_check: function must be scalar-valued, got shape " + g.value(y).shape().str());
  }
  g.backward(y);
  const Tensor analytic = g.grad(xv);

  auto eval = [&](const Tensor& at) {
    Graph ge;
    return static_cast<double>(ge.value(f(ge, ge.variable(at))).item());
  };

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float orig = x[i];
    probe[i] = static_cast<float>(orig + h);
    const double plus = eval(probe);
    probe[i] = static_cast<float>(orig - h);
    const double minus = eval(probe);
    probe[i] = orig;
    // Use the step actually representable in f32.
    const double step = static_cast<double>(static_cast<float>(orig + h)) - static_cast<float>(orig - h);
    const double numeric = (plus - minus) / step;
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace murtree
