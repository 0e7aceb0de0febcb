// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Jacobi-rotation eigen and singular value decompositions. Both are O(n^3) per
// sweep and intended for the small matrices (n <= 512) this project handles.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "geolan/tensor.hpp"

namespace geolan {

struct EigenResult {
  std::vector<double> values;  // descending
  Tensor vectors;              // orthonormal columns, vectors(:, k) pairs with values[k]
};

struct SvdResult {
  Tensor u;                   // m x k, orthonormal columns
  std::vector<double> sigma;  // k = min(m, n) values, descending, >= 0
  Tensor v;                   // n x k, orthonormal columns
};

namespace detail {

/// Flip a column so its largest-magnitude entry is positive. Purely cosmetic,
/// but makes decompositions comparable across call sites.
inline void canonical_sign(Tensor& cols, std::size_t j) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < cols.rows(); ++i)
    if (std::abs(cols(i, j)) > std::abs(cols(best, j)) + 1e-14) best = i;
  if (cols(best, j) < 0.0)
    for (std::size_t i = 0; i < cols.rows(); ++i) cols(i, j) = -cols(i, j);
}

/// Make columns [from, k) of `q` orthonormal to every earlier column, drawing
/// candidates from the standard basis. Used to complete null spaces.
inline void complete_orthonormal(Tensor& q, std::size_t from) {
  const std::size_t m = q.rows(), k = q.cols();
  std::size_t next_basis = 0;
  std::vector<double> c(m);
  for (std::size_t j = from; j < k; ++j) {
    for (;;) {
      detail::require(next_basis < m, "complete_orthonormal: ran out of basis vectors");
      std::fill(c.begin(), c.end(), 0.0);
      c[next_basis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < j; ++p) {
          double proj = 0.0;
          for (std::size_t i = 0; i < m; ++i) proj += q(i, p) * c[i];
          for (std::size_t i = 0; i < m; ++i) c[i] -= proj * q(i, p);
        }
      }
      const double n = norm2(c);
      if (n > 1e-6) {
        for (std::size_t i = 0; i < m; ++i) q(i, j) = c[i] / n;
        break;
      }
    }
  }
}

}  // namespace detail

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Iterates until the
/// off-diagonal Frobenius norm is at most 1e-12 * ||M||_F.
inline EigenResult sym_eigh(const Tensor& m_in) {
  detail::require(m_in.rank() == 2 && m_in.rows() == m_in.cols(),
                  "sym_eigh: square matrix required, got " + shape_str(m_in.shape()));
  const std::size_t n = m_in.rows();
  const double fro = frobenius_norm(m_in);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      detail::require(std::abs(m_in(i, j) - m_in(j, i)) <= 1e-10 * fro,
                      "sym_eigh: matrix is not symmetric");

  Tensor a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (m_in(i, j) + m_in(j, i));
  Tensor v = Tensor::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  const double tol = 1e-12 * fro;
  for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  EigenResult r{std::vector<double>(n), Tensor(Shape{n, n})};
  for (std::size_t k = 0; k < n; ++k) {
    r.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) r.vectors(i, k) = v(i, order[k]);
    detail::canonical_sign(r.vectors, k);
  }
  return r;
}

/// Thin SVD by one-sided (Hestenes) Jacobi: columns of A are rotated until
/// mutually orthogonal; their norms are the singular values. Singular values
/// below 1e-12 * max(1, sigma_max) are set to zero and their left vectors are
/// completed by orthogonalization.
inline SvdResult svd(const Tensor& a) {
  require_matrix(a, "svd");
  detail::require(a.all_finite(), "svd: non-finite entries");
  const std::size_t m = a.rows(), n = a.cols();
  if (m < n) {
    SvdResult t = svd(transpose(a));
    return SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
  }

  // Work on transposed copies so that each column is a contiguous row.
  Tensor w = transpose(a);            // n x m
  Tensor vt = Tensor::identity(n);    // n x n, row j is column j of V

  constexpr double kEps = 1e-15;
  std::vector<double> sq(n);
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t j = 0; j < n; ++j) sq[j] = dot(w.row(j), w.row(j));
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        auto wi = w.row(i);
        auto wj = w.row(j);
        const double alpha = sq[i];
        const double beta = sq[j];
        const double gamma = dot(wi, wj);
        if (gamma == 0.0 || std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        sq[i] = alpha - t * gamma;
        sq[j] = beta + t * gamma;
        for (std::size_t k = 0; k < m; ++k) {
          const double x = wi[k], y = wj[k];
          wi[k] = c * x - s * y;
          wj[k] = s * x + c * y;
        }
        auto vi = vt.row(i);
        auto vj = vt.row(j);
        for (std::size_t k = 0; k < n; ++k) {
          const double x = vi[k], y = vj[k];
          vi[k] = c * x - s * y;
          vj[k] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = norm2(w.row(j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const double smax = n ? norms[order[0]] : 0.0;
  const double tol = 1e-12 * std::max(1.0, smax);
  SvdResult r{Tensor(Shape{m, n}), std::vector<double>(n), Tensor(Shape{n, n})};
  std::size_t rank = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    const double s = norms[j];
    for (std::size_t i = 0; i < n; ++i) r.v(i, k) = vt(j, i);
    if (s > tol) {
      r.sigma[k] = s;
      for (std::size_t i = 0; i < m; ++i) r.u(i, k) = w(j, i) / s;
      rank = k + 1;
    } else {
      r.sigma[k] = 0.0;
    }
  }
  if (rank < n) detail::complete_orthonormal(r.u, rank);
  // Keep each (u_k, v_k) pair consistent when fixing signs.
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(r.v(i, k)) > std::abs(r.v(best, k)) + 1e-14) best = i;
    if (r.v(best, k) < 0.0) {
      for (std::size_t i = 0; i < n; ++i) r.v(i, k) = -r.v(i, k);
      for (std::size_t i = 0; i < m; ++i) r.u(i, k) = -r.u(i, k);
    }
  }
  return r;
}

/// Singular values only.
inline std::vector<double> singular_values(const Tensor& a) { return svd(a).sigma; }

/// Orthonormal basis (columns) for the span of the columns of `a`, via SVD;
/// directions with singular value below `rel_tol * sigma_max` are dropped.
inline Tensor orthonormal_basis(const Tensor& a, double rel_tol = 1e-10) {
  SvdResult s = svd(a);
  std::size_t r = 0;
  const double smax = s.sigma.empty() ? 0.0 : s.sigma[0];
  while (r < s.sigma.size() && s.sigma[r] > rel_tol * smax && smax > 0.0) ++r;
  Tensor q(Shape{a.rows(), r});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k) q(i, k) = s.u(i, k);
  return q;
}

}  // namespace geolan
