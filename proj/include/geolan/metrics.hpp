// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Representation metrics (covariance spectra, cone concentration, IsoScore,
// PCA probe efficiency), output stability, and two-sample statistics.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "geolan/error.hpp"
#include "geolan/linalg.hpp"
#include "geolan/model.hpp"
#include "geolan/special.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

struct SpectrumReport {
  std::vector<double> eigenvalues;  // descending
  double total_variance = 0.0;
  std::map<std::size_t, double> top_k_fractions;

  /// Fraction of variance in the k largest eigenvalues.
  double top_k(std::size_t k) const {
    detail::require(k >= 1 && k <= eigenvalues.size(), "top_k: k must lie in [1, d]");
    if (!(total_variance > 0.0)) throw DegenerateInputError("spectrum has zero total variance");
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += eigenvalues[i];
    return std::clamp(s / total_variance, 0.0, 1.0);
  }
};

inline SpectrumReport spectrum_from_covariance(const Tensor& cov) {
  EigenResult e = sym_eigh(cov);
  SpectrumReport r;
  r.eigenvalues = std::move(e.values);
  for (double v : r.eigenvalues) r.total_variance += v;
  if (r.total_variance > 0.0) {
    for (std::size_t k : {1u, 10u, 50u})
      if (k <= r.eigenvalues.size()) r.top_k_fractions[k] = r.top_k(k);
  }
  return r;
}

/// Eigen-spectrum of the (optionally centred) second-moment matrix of the rows.
inline SpectrumReport covariance_spectrum(const Tensor& points, bool center = true) {
  require_matrix(points, "covariance_spectrum");
  if (points.rows() < 2) throw DegenerateInputError("covariance_spectrum: need at least 2 points");
  return spectrum_from_covariance(second_moment(points, center));
}

/// Share of centred variance carried by the top-k eigenvalues.
inline double cone_concentration(const Tensor& points, std::size_t k) {
  require_matrix(points, "cone_concentration");
  detail::require(k >= 1 && k <= points.cols(), "cone_concentration: k must lie in [1, d]");
  return covariance_spectrum(points, true).top_k(k);
}

/// 1 - delta^2 with delta = ||lambda_hat - 1|| / sqrt(2 (d - sqrt d)) and
/// lambda_hat = lambda sqrt(d) / ||lambda||.
inline double isoscore_from_eigenvalues(std::vector<double> lambda) {
  const std::size_t d = lambda.size();
  detail::require(d >= 1, "isoscore: empty spectrum");
  for (auto& v : lambda) v = std::max(v, 0.0);
  const double n = norm2(lambda);
  if (!(n > 0.0)) throw DegenerateInputError("isoscore: zero variance");
  if (d == 1) return 1.0;
  const double sd = std::sqrt(static_cast<double>(d));
  double dev2 = 0.0;
  for (double v : lambda) {
    const double h = v * sd / n - 1.0;
    dev2 += h * h;
  }
  const double delta2 = dev2 / (2.0 * (static_cast<double>(d) - sd));
  return std::clamp(1.0 - delta2, 0.0, 1.0);
}

inline double isoscore(const Tensor& points) {
  return isoscore_from_eigenvalues(covariance_spectrum(points, true).eigenvalues);
}

/// Smallest k whose cumulative top-k variance share reaches tau.
inline std::size_t pca_probe_efficiency_from(const SpectrumReport& s, double tau) {
  detail::require(tau > 0.0 && tau <= 1.0, "pca_probe_efficiency: tau must lie in (0, 1]");
  if (!(s.total_variance > 0.0)) throw DegenerateInputError("pca_probe_efficiency: zero variance");
  double cum = 0.0;
  for (std::size_t k = 0; k < s.eigenvalues.size(); ++k) {
    cum += s.eigenvalues[k];
    // Tolerance absorbs rounding in the running sum for exact shares.
    if (cum / s.total_variance >= tau - 1e-12) return k + 1;
  }
  return s.eigenvalues.size();
}

inline std::size_t pca_probe_efficiency(const Tensor& points, double tau) {
  return pca_probe_efficiency_from(covariance_spectrum(points, true), tau);
}

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  detail::require(p.size() == q.size(), "kl_divergence: support sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (!(q[i] > 0.0))
      throw DegenerateInputError("kl_divergence: q is zero where p is positive (divergence is infinite)");
    s += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(0.0, s);
}

inline std::vector<double> softmax_row(std::span<const double> z) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (auto& v : p) v /= s;
  return p;
}

inline std::size_t argmax(std::span<const double> z) {
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
  return dot(a, b) / (na * nb);
}

struct StabilityReport {
  double kl_mean = 0.0;
  double cos_mean = 0.0;
  std::size_t stable_count = 0;
  std::size_t total = 0;
  double stability_rate = 0.0;
};

/// Pairs clean[i] with perturbed[i]. An example is stable when the top-1
/// prediction at its final position is unchanged.
inline StabilityReport stability_metrics(const std::vector<ForwardTrace>& clean,
                                         const std::vector<ForwardTrace>& perturbed) {
  if (clean.size() != perturbed.size())
    throw InputError("stability_metrics: " + std::to_string(clean.size()) + " clean vs " +
                     std::to_string(perturbed.size()) + " perturbed traces");
  if (clean.empty()) throw InputError("stability_metrics: no examples");
  StabilityReport r;
  double kl = 0.0, cs = 0.0;
  std::size_t positions = 0;
  for (std::size_t e = 0; e < clean.size(); ++e) {
    const ForwardTrace& a = clean[e];
    const ForwardTrace& b = perturbed[e];
    if (a.logits.shape() != b.logits.shape() || a.hidden.size() != b.hidden.size() ||
        a.hidden.back().shape() != b.hidden.back().shape())
      throw InputError("stability_metrics: example " + std::to_string(e) + " traces have different shapes");
    const Tensor& ha = a.hidden.back();
    const Tensor& hb = b.hidden.back();
    for (std::size_t i = 0; i < a.logits.rows(); ++i) {
      kl += kl_divergence(softmax_row(a.logits.row(i)), softmax_row(b.logits.row(i)));
      cs += cosine(ha.row(i), hb.row(i));
      ++positions;
    }
    const std::size_t last = a.logits.rows() - 1;
    if (argmax(a.logits.row(last)) == argmax(b.logits.row(last))) ++r.stable_count;
  }
  r.total = clean.size();
  r.kl_mean = kl / static_cast<double>(positions);
  r.cos_mean = cs / static_cast<double>(positions);
  r.stability_rate = static_cast<double>(r.stable_count) / static_cast<double>(r.total);
  return r;
}

// ---------------------------------------------------------------------------
// Two-sample statistics

inline double sample_mean(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v;
  return s / static_cast<double>(a.size());
}

/// Unbiased sample variance (divide by n - 1).
inline double sample_variance(std::span<const double> a) {
  const double m = sample_mean(a);
  double s = 0.0;
  for (double v : a) s += (v - m) * (v - m);
  return s / static_cast<double>(a.size() - 1);
}

/// (mean(a) - mean(b)) / pooled sample standard deviation.
inline double cohens_d(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InputError("cohens_d: each sample needs at least 2 values");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double pooled = std::sqrt(((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0));
  if (!(pooled > 0.0)) throw DegenerateInputError("cohens_d: pooled standard deviation is zero");
  return (sample_mean(a) - sample_mean(b)) / pooled;
}

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

/// Welch's unequal-variance t-test, two-sided.
inline WelchResult welch_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InputError("welch_p: each sample needs at least 2 values");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = sample_variance(a) / na, vb = sample_variance(b) / nb;
  if (!(va + vb > 0.0)) throw DegenerateInputError("welch_p: both samples have zero variance");
  WelchResult r;
  r.t = (sample_mean(a) - sample_mean(b)) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

inline double welch_p(std::span<const double> a, std::span<const double> b) { return welch_test(a, b).p; }

}  // namespace geolan
