// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <numbers>

#include "geolan/error.hpp"

namespace geolan {

/// log of the volume of a d-ball of radius r; -inf for r == 0.
inline double log_ball_volume(std::size_t d, double r) {
  detail::require(d >= 1, "ball_volume: dimension must be >= 1");
  detail::require(r >= 0.0, "ball_volume: negative radius");
  if (r == 0.0) return -INFINITY;
  const double half = 0.5 * static_cast<double>(d);
  return half * std::log(std::numbers::pi) + static_cast<double>(d) * std::log(r) -
         std::lgamma(half + 1.0);
}

/// pi^{d/2} r^d / Gamma(d/2 + 1).
inline double ball_volume(std::size_t d, double r) {
  detail::require(d >= 1, "ball_volume: dimension must be >= 1");
  detail::require(r >= 0.0, "ball_volume: negative radius");
  const double half = 0.5 * static_cast<double>(d);
  return std::pow(std::numbers::pi, half) * std::pow(r, static_cast<double>(d)) /
         std::tgamma(half + 1.0);
}

namespace detail {

inline double simpson_step(const std::function<double(double)>& f, double a, double b, double fa,
                           double fm, double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace detail

/// Adaptive Simpson quadrature of f over [a, b] to absolute tolerance `tol`.
inline double integrate_adaptive(const std::function<double(double)>& f, double a, double b,
                                 double tol = 1e-13, int max_depth = 50) {
  if (a == b) return 0.0;
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return detail::simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

/// Student-t density with `nu` degrees of freedom.
inline double student_t_pdf(double x, double nu) {
  const double log_norm = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
                          0.5 * std::log(nu * std::numbers::pi);
  return std::exp(log_norm - 0.5 * (nu + 1.0) * std::log1p(x * x / nu));
}

/// P(|T| >= |t|) for T ~ t(nu), by adaptive quadrature of the density. Small
/// |t| integrates the body; large |t| integrates the tail after x = |t|/u so
/// the domain is finite.
inline double student_t_two_sided_p(double t, double nu) {
  detail::require(nu > 0.0, "student_t_two_sided_p: degrees of freedom must be positive");
  const double at = std::abs(t);
  if (at == 0.0) return 1.0;
  if (at <= 1.0) {
    const double body = integrate_adaptive([nu](double x) { return student_t_pdf(x, nu); }, 0.0, at);
    return std::clamp(1.0 - 2.0 * body, 0.0, 1.0);
  }
  auto tail = [nu, at](double u) {
    if (u <= 0.0) return 0.0;
    const double x = at / u;
    return student_t_pdf(x, nu) * at / (u * u);
  };
  // Integrand vanishes at u = 0 for nu > 1 and tends to a constant for nu = 1.
  const double mass = integrate_adaptive(tail, 0.0, 1.0, 1e-15);
  return std::clamp(2.0 * mass, 0.0, 1.0);
}

}  // namespace geolan
