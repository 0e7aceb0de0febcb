// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "geolan/autodiff.hpp"

namespace geolan {

/// A scalar function of tape-recorded parameters. It receives the tape and one
/// leaf per parameter tensor and must return a scalar built on that tape.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Gradient of f at `params`, one tensor per parameter.
inline std::vector<Tensor> grad(const ScalarFn& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
  Var out = f(tape, leaves);
  tape.backward(out);
  std::vector<Tensor> g;
  g.reserve(leaves.size());
  for (Var v : leaves) g.push_back(tape.grad(v));
  return g;
}

/// Value of f at `params` without recording gradients.
inline double evaluate(const ScalarFn& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.constant(p));
  return f(tape, leaves).value().item();
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compare analytic gradients with five-point central differences on every entry.
inline GradCheckResult grad_check_detailed(const ScalarFn& f, std::span<const Tensor> params,
                                           double eps) {
  detail::require(eps >= 1e-7 && eps <= 1e-3, "grad_check: eps must lie in [1e-7, 1e-3]");
  const std::vector<Tensor> analytic = grad(f, params);
  std::vector<Tensor> x(params.begin(), params.end());
  GradCheckResult r;
  for (std::size_t p = 0; p < x.size(); ++p) {
    for (std::size_t i = 0; i < x[p].size(); ++i) {
      const double orig = x[p][i];
      auto at = [&](double h) {
        x[p][i] = orig + h;
        return evaluate(f, x);
      };
      const double fp = at(eps), fm = at(-eps), fp2 = at(2.0 * eps), fm2 = at(-2.0 * eps);
      x[p][i] = orig;
      const double num = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * eps);
      const double ana = analytic[p][i];
      const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
      const double err = std::abs(ana - num) / denom;
      if (err > r.max_rel_error || (p == 0 && i == 0)) {
        r.max_rel_error = std::max(r.max_rel_error, err);
        if (err >= r.max_rel_error) {
          r.worst_param = p;
          r.worst_index = i;
          r.analytic = ana;
          r.numeric = num;
        }
      }
    }
  }
  return r;
}

/// Worst entrywise relative error, denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const ScalarFn& f, std::span<const Tensor> params, double eps = 1e-5) {
  return grad_check_detailed(f, params, eps).max_rel_error;
}

}  // namespace geolan
