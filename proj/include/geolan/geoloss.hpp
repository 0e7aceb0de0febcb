// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Geometric regularizers: the probe-variance isotropy loss (KT-CW), the
// attention spectral-entropy loss (KT-Attn), their annealed weights and the
// combined training objective.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "geolan/autodiff.hpp"
#include "geolan/error.hpp"
#include "geolan/rng.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

struct RegularizerConfig {
  double lambda1_target = 1e-3;
  double lambda2_target = 1e-2;
  std::size_t ramp_steps = 500;
  std::size_t n_probes = 64;
  std::size_t entropy_rank_cap = 0;  // 0 selects min(N, d_head)

  void validate() const {
    if (!(lambda1_target >= 0.0)) throw InputError("regularizer.lambda1_target must be >= 0");
    if (!(lambda2_target >= 0.0)) throw InputError("regularizer.lambda2_target must be >= 0");
    if (ramp_steps < 1) throw InputError("regularizer.ramp_steps must be >= 1");
    if (n_probes < 1) throw InputError("regularizer.n_probes must be >= 1");
  }

  std::size_t rank_cap(std::size_t seq_len, std::size_t d_head) const {
    const std::size_t r = entropy_rank_cap ? entropy_rank_cap : std::min(seq_len, d_head);
    return std::min(r, seq_len);
  }

  friend bool operator==(const RegularizerConfig&, const RegularizerConfig&) = default;
};

/// Rows scaled to unit norm.
inline Tensor normalize_rows(const Tensor& z) {
  Tape tape;
  return normalize_rows(tape.constant(z)).value();
}

/// d x P matrix whose columns are independent uniform unit vectors.
inline Tensor sample_probes(std::size_t d, std::size_t n_probes, Rng& rng) {
  Tensor u(Shape{d, n_probes});
  for (std::size_t p = 0; p < n_probes; ++p) {
    const std::vector<double> v = sample_unit_sphere(d, rng);
    for (std::size_t i = 0; i < d; ++i) u(i, p) = v[i];
  }
  return u;
}

/// (1/P) sum_p (Var_j <z_j, u_p> - 1/d)^2 with population variance over the
/// M rows. `probes` is d x P and is treated as a constant.
inline Var kt_cw_loss(Var z_hat, const Tensor& probes) {
  require_matrix(z_hat.value(), "kt_cw_loss");
  const std::size_t m = z_hat.value().rows(), d = z_hat.value().cols();
  if (m < 2) throw DegenerateInputError("kt_cw_loss: need at least 2 rows, got " + std::to_string(m));
  detail::require(probes.rank() == 2 && probes.rows() == d, "kt_cw_loss: probe dimension mismatch");
  Var u = z_hat.tape().constant(probes);
  Var var = col_variance(matmul(z_hat, u));
  return mean(square(add_scalar(var, -1.0 / static_cast<double>(d))));
}

/// Draws fresh probes from `rng`; the probes used are written to `probes_out`
/// when it is non-null.
inline Var kt_cw_loss(Var z_hat, std::size_t n_probes, Rng& rng, Tensor* probes_out = nullptr) {
  require_matrix(z_hat.value(), "kt_cw_loss");
  if (z_hat.value().rows() < 2) throw DegenerateInputError("kt_cw_loss: need at least 2 rows");
  Tensor probes = sample_probes(z_hat.value().cols(), n_probes, rng);
  Var out = kt_cw_loss(z_hat, probes);
  if (probes_out) *probes_out = std::move(probes);
  return out;
}

/// Expectation of the KT-CW loss over uniform probes:
/// ((tr A)^2 + 2 ||A||_F^2) / (d (d + 2)),  A = Sigma_c - I/d.
inline double kt_cw_closed_form(const Tensor& z_hat) {
  require_matrix(z_hat, "kt_cw_closed_form");
  const std::size_t m = z_hat.rows(), d = z_hat.cols();
  if (m < 2) throw DegenerateInputError("kt_cw_closed_form: need at least 2 rows");
  Tensor a = second_moment(z_hat, true);
  for (std::size_t i = 0; i < d; ++i) a(i, i) -= 1.0 / static_cast<double>(d);
  const double tr = trace(a);
  const double fro2 = dot(a.data(), a.data());
  const double dd = static_cast<double>(d);
  return (tr * tr + 2.0 * fro2) / (dd * (dd + 2.0));
}

/// Shannon entropy of sigma / sum(sigma), with 0 ln 0 = 0.
inline double spectral_entropy(const std::vector<double>& sigma) {
  double s = 0.0;
  for (double v : sigma) {
    detail::require(v >= 0.0, "spectral_entropy: negative value");
    s += v;
  }
  if (!(s > 0.0)) throw DegenerateInputError("spectral_entropy: all values are zero");
  double h = 0.0;
  for (double v : sigma)
    if (v > 0.0) {
      const double p = v / s;
      h -= p * std::log(p);
    }
  return h;
}

inline void check_row_stochastic(const Tensor& heads, double tol = 1e-6) {
  const bool stacked = heads.rank() == 3;
  detail::require(heads.rank() == 2 || stacked, "attention heads must be N x N or K x N x N");
  const std::size_t K = stacked ? heads.dim(0) : 1;
  const std::size_t n = stacked ? heads.dim(1) : heads.dim(0);
  const std::size_t c = stacked ? heads.dim(2) : heads.dim(1);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double v = heads[(k * n + i) * c + j];
        if (v < -tol) throw InputError("attention head " + std::to_string(k) + " has a negative entry");
        s += v;
      }
      if (std::abs(s - 1.0) > tol)
        throw InputError("attention head " + std::to_string(k) + " row " + std::to_string(i) +
                         " sums to " + std::to_string(s));
    }
}

/// sum over heads of (ln r - H_h)^2, H_h the entropy of the normalized top-r
/// singular values of head h. `heads` is K x N x N (or one N x N head); the
/// sum is divided by `n_seq` so a batch of sequences contributes a per-sequence
/// average.
inline Var kt_attn_loss(Var heads, std::size_t r_cap, std::size_t n_seq = 1) {
  check_row_stochastic(heads.value());
  detail::require(n_seq >= 1, "kt_attn_loss: n_seq must be >= 1");
  Var s = top_singular_values(heads, r_cap);
  if (s.value().rank() == 1) s = reshape(s, Shape{1, r_cap});
  Var p = normalize_sum_rows(s);
  // ln r - H = ln r + sum p ln p
  Var deficit = add_scalar(row_sum(xlogx(p)), std::log(static_cast<double>(r_cap)));
  Var total = sum(square(deficit));
  return n_seq == 1 ? total : scale(total, 1.0 / static_cast<double>(n_seq));
}

/// Per-head deficits ln r - H_h, without recording gradients.
inline std::vector<double> entropy_deficits(const Tensor& heads, std::size_t r_cap) {
  const bool stacked = heads.rank() == 3;
  const std::size_t K = stacked ? heads.dim(0) : 1;
  std::vector<double> out;
  out.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> sigma = singular_values(stacked ? heads.slice(k) : heads);
    sigma.resize(r_cap);
    out.push_back(std::log(static_cast<double>(r_cap)) - spectral_entropy(sigma));
  }
  return out;
}

/// lambda(t) = target * min(1, t / ramp_steps).
inline double anneal(std::size_t step, double target, std::size_t ramp_steps) {
  detail::require(ramp_steps >= 1, "anneal: ramp_steps must be >= 1");
  if (step >= ramp_steps) return target;
  return target * static_cast<double>(step) / static_cast<double>(ramp_steps);
}

/// ce + lambda1(t) sum cw + lambda2(t) sum attn. A term whose weight is
/// exactly zero is left out of the graph.
inline Var total_loss(Var ce, const std::vector<Var>& cw_per_layer, const std::vector<Var>& attn_per_layer,
                      std::size_t step, const RegularizerConfig& cfg) {
  const double l1 = anneal(step, cfg.lambda1_target, cfg.ramp_steps);
  const double l2 = anneal(step, cfg.lambda2_target, cfg.ramp_steps);
  Var out = ce;
  if (l1 != 0.0 && !cw_per_layer.empty()) out = add(out, scale(add_n(cw_per_layer), l1));
  if (l2 != 0.0 && !attn_per_layer.empty()) out = add(out, scale(add_n(attn_per_layer), l2));
  return out;
}

}  // namespace geolan
