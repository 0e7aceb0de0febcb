// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Brute-force checks of the provable bounds: the fourth-moment identity, the
// cone-count bound, the spectral-entropy (Pinsker) bounds, tube packing and
// multiplicity, the Lipschitz chain and grain-probe interference.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geolan/error.hpp"
#include "geolan/geoloss.hpp"
#include "geolan/geometry.hpp"
#include "geolan/linalg.hpp"
#include "geolan/model.hpp"
#include "geolan/rng.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

/// Absolute slack allowed before an observation counts as exceeding its bound.
inline constexpr double kBoundTolerance = 1e-9;

struct VerificationReport {
  std::string check_name;
  bool theorem_backed = true;
  std::size_t trials = 0;
  std::size_t violations = 0;
  double worst_slack = std::numeric_limits<double>::infinity();  // min(bound - observed)
  nlohmann::json parameters = nlohmann::json::object();
  nlohmann::json offending = nlohmann::json::array();  // first few violating cases

  /// Record one comparison of `observed` against `bound`.
  void observe(double observed, double bound, const nlohmann::json& context = {}) {
    ++trials;
    const double slack = bound - observed;
    worst_slack = std::min(worst_slack, slack);
    if (observed > bound + kBoundTolerance) {
      ++violations;
      if (offending.size() < 10) {
        nlohmann::json o = context.is_null() ? nlohmann::json::object() : context;
        o["observed"] = observed;
        o["bound"] = bound;
        offending.push_back(o);
      }
    }
  }

  bool passed() const { return violations == 0; }

  double violation_rate() const {
    return trials ? static_cast<double>(violations) / static_cast<double>(trials) : 0.0;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["check"] = check_name;
    j["theorem_backed"] = theorem_backed;
    j["trials"] = trials;
    j["violations"] = violations;
    j["violation_rate"] = violation_rate();
    j["worst_slack"] = std::isfinite(worst_slack) ? nlohmann::json(worst_slack) : nlohmann::json(nullptr);
    j["parameters"] = parameters;
    j["offending"] = offending;
    return j;
  }
};

/// Test hook: every theorem bound is multiplied by `bound_scale` before the
/// comparison. Values below 1 inject faults.
struct VerifyOptions {
  double bound_scale = 1.0;
};

// ---------------------------------------------------------------------------
// Fourth moment of u^T A u

inline double fourth_moment_closed_form(const Tensor& a) {
  const double tr = trace(a);
  const double d = static_cast<double>(a.rows());
  return (tr * tr + 2.0 * dot(a.data(), a.data())) / (d * (d + 2.0));
}

inline Tensor random_symmetric(std::size_t d, bool traceless, Rng& rng) {
  Tensor a(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) a(i, j) = a(j, i) = rng.normal();
  if (traceless) {
    const double t = trace(a) / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) a(i, i) -= t;
  }
  return a;
}

struct MomentEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  double closed_form = 0.0;
};

/// Monte-Carlo mean of (u^T A u)^2 for each matrix, sharing one probe stream.
inline std::vector<MomentEstimate> fourth_moment_estimates(const std::vector<Tensor>& mats, std::size_t n_samples,
                                                           Rng& rng) {
  detail::require(!mats.empty(), "fourth_moment_estimates: no matrices");
  detail::require(n_samples >= 2, "fourth_moment_estimates: need at least 2 samples");
  const std::size_t d = mats[0].rows();
  std::vector<double> s(mats.size(), 0.0), s2(mats.size(), 0.0);
  std::vector<double> u;
  for (std::size_t n = 0; n < n_samples; ++n) {
    u = sample_unit_sphere(d, rng);
    for (std::size_t k = 0; k < mats.size(); ++k) {
      const Tensor& a = mats[k];
      double q = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double r = 0.0;
        for (std::size_t j = 0; j < d; ++j) r += a(i, j) * u[j];
        q += u[i] * r;
      }
      s[k] += q * q;
      s2[k] += q * q * q * q;
    }
  }
  std::vector<MomentEstimate> out(mats.size());
  const double nn = static_cast<double>(n_samples);
  for (std::size_t k = 0; k < mats.size(); ++k) {
    out[k].mean = s[k] / nn;
    const double var = std::max(0.0, (s2[k] - nn * out[k].mean * out[k].mean) / (nn - 1.0));
    out[k].standard_error = std::sqrt(var / nn);
    out[k].closed_form = fourth_moment_closed_form(mats[k]);
  }
  return out;
}

/// Agreement within 5 standard errors for each matrix. Observed is
/// |MC - closed form|, bound is 5 SE (+1e-12 so zero-variance cases compare exactly).
inline VerificationReport check_fourth_moment(const std::vector<Tensor>& mats, std::size_t n_samples, Rng& rng) {
  VerificationReport r;
  r.check_name = "fourth_moment";
  r.theorem_backed = false;
  r.parameters = {{"d", mats.empty() ? 0 : mats[0].rows()}, {"n_samples", n_samples}, {"matrices", mats.size()}};
  const auto est = fourth_moment_estimates(mats, n_samples, rng);
  for (std::size_t k = 0; k < est.size(); ++k)
    r.observe(std::abs(est[k].mean - est[k].closed_form), 5.0 * est[k].standard_error + 1e-12,
              {{"matrix", k}, {"mc", est[k].mean}, {"closed_form", est[k].closed_form}});
  return r;
}

/// Ten random symmetric matrices, half of them traceless.
inline VerificationReport check_fourth_moment(std::size_t d, std::size_t n_samples, Rng& rng) {
  detail::require(d >= 2, "check_fourth_moment: d must be >= 2");
  std::vector<Tensor> mats;
  for (std::size_t k = 0; k < 10; ++k) mats.push_back(random_symmetric(d, k % 2 == 1, rng));
  return check_fourth_moment(mats, n_samples, rng);
}

// ---------------------------------------------------------------------------
// Cone-count bound

struct CenteredCloud {
  Tensor points;
  bool adjusted = false;     // rows were re-centred and re-normalized
  bool symmetrized = false;  // fell back to the antipodal completion {x, -x}
  std::size_t iterations = 0;
};

/// Unit rows with (numerically) zero mean. Alternates centring and
/// renormalization; if that does not settle below 1e-13 within 50 rounds, or a
/// row collapses to zero, uses the antipodal completion, whose mean is exactly 0.
inline CenteredCloud center_unit_rows(const Tensor& z) {
  require_matrix(z, "center_unit_rows");
  CenteredCloud c;
  c.points = z;
  const std::size_t m = z.rows(), d = z.cols();
  auto mean_norm = [&] { return norm2(row_mean(c.points)); };
  bool ok = true;
  while (mean_norm() > 1e-13) {
    if (c.iterations == 50) {
      ok = false;
      break;
    }
    ++c.iterations;
    c.adjusted = true;
    const std::vector<double> mu = row_mean(c.points);
    for (std::size_t i = 0; i < m && ok; ++i) {
      auto r = c.points.row(i);
      for (std::size_t j = 0; j < d; ++j) r[j] -= mu[j];
      const double n = norm2(r);
      if (n < 1e-8) {
        ok = false;
        break;
      }
      for (auto& v : r) v /= n;
    }
    if (!ok) break;
  }
  if (!ok) {
    c.points = Tensor(Shape{2 * m, d});
    for (std::size_t i = 0; i < m; ++i) {
      const auto src = z.row(i);
      const double n = norm2(src);
      for (std::size_t j = 0; j < d; ++j) {
        c.points(2 * i, j) = src[j] / n;
        c.points(2 * i + 1, j) = -src[j] / n;
      }
    }
    c.adjusted = true;
    c.symmetrized = true;
  }
  return c;
}

/// M (1/d + sqrt(d (d+2) eta / 2)) / cos^2(aperture).
inline double cone_bound(std::size_t m, std::size_t d, double eta, double aperture) {
  const double dd = static_cast<double>(d);
  const double c = std::cos(aperture);
  return static_cast<double>(m) * (1.0 / dd + std::sqrt(dd * (dd + 2.0) * std::max(eta, 0.0) / 2.0)) / (c * c);
}

inline VerificationReport verify_prop_a(const Tensor& z, std::size_t n_trials, Rng& rng, const VerifyOptions& opt = {}) {
  require_matrix(z, "verify_prop_a");
  for (std::size_t i = 0; i < z.rows(); ++i)
    if (std::abs(norm2(z.row(i)) - 1.0) > 1e-8) throw InputError("verify_prop_a: rows must be unit-norm");
  const CenteredCloud c = center_unit_rows(z);
  const double eta = kt_cw_closed_form(c.points);
  const std::size_t m = c.points.rows(), d = c.points.cols();
  VerificationReport r;
  r.check_name = "prop_a_cone_bound";
  r.parameters = {{"M", m}, {"d", d}, {"eta", eta}, {"centering_adjusted", c.adjusted},
                  {"symmetrized", c.symmetrized}, {"centering_iterations", c.iterations}};
  for (std::size_t t = 0; t < n_trials; ++t) {
    const std::vector<double> v = sample_unit_sphere(d, rng);
    const double aperture = rng.uniform(0.1, std::numbers::pi / 2 - 0.1);
    const double bound = opt.bound_scale * cone_bound(m, d, eta, aperture);
    r.observe(static_cast<double>(cone_count(c.points, v, aperture)), bound, {{"trial", t}, {"aperture", aperture}});
  }
  return r;
}

/// A random unit-row cloud; `kind` cycles through isotropic, stretched
/// Gaussian and clustered shapes.
inline Tensor random_unit_cloud(std::size_t m, std::size_t d, std::size_t kind, Rng& rng) {
  Tensor z(Shape{m, d});
  std::vector<double> scale(d, 1.0), center(d, 0.0);
  if (kind % 3 == 1)
    for (std::size_t j = 0; j < d; ++j) scale[j] = std::exp(rng.uniform(-3.0, 1.0));
  if (kind % 3 == 2) center = sample_unit_sphere(d, rng);
  const double spread = kind % 3 == 2 ? rng.uniform(0.05, 0.5) : 1.0;
  for (std::size_t i = 0; i < m; ++i) {
    double n = 0.0;
    do {
      for (std::size_t j = 0; j < d; ++j) z(i, j) = center[j] + spread * scale[j] * rng.normal();
      n = norm2(z.row(i));
    } while (n < 1e-12);
    for (auto& v : z.row(i)) v /= n;
  }
  return z;
}

/// n_clouds random clouds, n_trials (v, aperture) draws each, merged into one report.
inline VerificationReport verify_prop_a_random(std::size_t n_clouds, std::size_t n_trials, Rng& rng,
                                               const VerifyOptions& opt = {}) {
  VerificationReport total;
  total.check_name = "prop_a_cone_bound";
  std::size_t adjusted = 0, symmetrized = 0;
  for (std::size_t k = 0; k < n_clouds; ++k) {
    const std::size_t d = 2 + rng.below(15);
    const std::size_t m = 8 + rng.below(120);
    Tensor z = random_unit_cloud(m, d, k, rng);
    VerificationReport r = verify_prop_a(z, n_trials, rng, opt);
    total.trials += r.trials;
    total.violations += r.violations;
    total.worst_slack = std::min(total.worst_slack, r.worst_slack);
    for (const auto& o : r.offending)
      if (total.offending.size() < 10) {
        nlohmann::json oo = o;
        oo["cloud"] = k;
        oo["cloud_parameters"] = r.parameters;
        total.offending.push_back(oo);
      }
    adjusted += r.parameters["centering_adjusted"].get<bool>();
    symmetrized += r.parameters["symmetrized"].get<bool>();
  }
  total.parameters = {{"clouds", n_clouds}, {"trials_per_cloud", n_trials}, {"centering_adjusted", adjusted},
                      {"symmetrized", symmetrized}};
  return total;
}

// ---------------------------------------------------------------------------
// Spectral-entropy bounds

/// Per head h with deficit D_h = ln r - H_h and eta = sum_h D_h^2:
/// (a) D_h <= sqrt(eta); (b) ||p - u||_1 <= sqrt(2 sqrt(eta)); (c) max p <= 1/r + sqrt(2 sqrt(eta)) / 2.
inline VerificationReport verify_prop_b(const std::vector<Tensor>& heads, std::size_t r_cap,
                                        const VerifyOptions& opt = {}) {
  detail::require(!heads.empty(), "verify_prop_b: no heads");
  for (const auto& h : heads) check_row_stochastic(h);
  const double lr = std::log(static_cast<double>(r_cap));
  std::vector<std::vector<double>> dists;
  double eta = 0.0;
  std::vector<double> deficits;
  for (const auto& h : heads) {
    std::vector<double> sigma = singular_values(h);
    detail::require(r_cap >= 1 && r_cap <= sigma.size(), "verify_prop_b: r_cap out of range");
    sigma.resize(r_cap);
    double s = 0.0;
    for (double v : sigma) s += v;
    for (auto& v : sigma) v /= s;
    const double dh = lr - spectral_entropy(sigma);
    deficits.push_back(dh);
    eta += dh * dh;
    dists.push_back(std::move(sigma));
  }
  const double root = std::sqrt(eta);
  const double pinsker = std::sqrt(2.0 * root);
  VerificationReport r;
  r.check_name = "prop_b_entropy_bounds";
  r.parameters = {{"heads", heads.size()}, {"r_cap", r_cap}, {"eta", eta}};
  for (std::size_t h = 0; h < heads.size(); ++h) {
    double l1 = 0.0, mx = 0.0;
    for (double p : dists[h]) {
      l1 += std::abs(p - 1.0 / static_cast<double>(r_cap));
      mx = std::max(mx, p);
    }
    r.observe(deficits[h], opt.bound_scale * root, {{"head", h}, {"bound", "kl"}});
    r.observe(l1, opt.bound_scale * pinsker, {{"head", h}, {"bound", "l1"}});
    r.observe(mx, opt.bound_scale * (1.0 / static_cast<double>(r_cap) + 0.5 * pinsker), {{"head", h}, {"bound", "max_p"}});
  }
  return r;
}

/// Random row-stochastic N x N matrix; `kind` mixes causal, dense, peaked and
/// low-rank patterns.
inline Tensor random_stochastic(std::size_t n, std::size_t kind, Rng& rng) {
  Tensor a(Shape{n, n});
  const double temp = std::exp(rng.uniform(-2.0, 3.0));
  std::vector<double> shared(n);
  for (auto& v : shared) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t hi = kind % 4 == 0 ? i + 1 : n;
    double s = 0.0;
    for (std::size_t j = 0; j < hi; ++j) {
      const double logit = kind % 4 == 3 ? shared[j] : rng.normal();
      s += (a(i, j) = std::exp(temp * logit));
    }
    for (std::size_t j = 0; j < hi; ++j) a(i, j) /= s;
  }
  return a;
}

inline VerificationReport verify_prop_b_random(std::size_t n_sets, Rng& rng, const VerifyOptions& opt = {}) {
  VerificationReport total;
  total.check_name = "prop_b_entropy_bounds";
  for (std::size_t k = 0; k < n_sets; ++k) {
    const std::size_t n = 2 + rng.below(15);
    const std::size_t h = 1 + rng.below(6);
    std::vector<Tensor> heads;
    for (std::size_t i = 0; i < h; ++i) heads.push_back(random_stochastic(n, k + i, rng));
    const std::size_t r_cap = 1 + rng.below(n);
    VerificationReport r = verify_prop_b(heads, r_cap, opt);
    total.trials += r.trials;
    total.violations += r.violations;
    total.worst_slack = std::min(total.worst_slack, r.worst_slack);
    for (const auto& o : r.offending)
      if (total.offending.size() < 10) total.offending.push_back(o);
  }
  total.parameters = {{"head_sets", n_sets}};
  return total;
}

// ---------------------------------------------------------------------------
// Packing and multiplicity

/// Monte-Carlo volume of a tube's footprint, divided by delta^(d-1).
inline double measure_tube_constant(const Tube& t, std::size_t n_points, Rng& rng) {
  const std::size_t d = t.trajectory.dim();
  Point lo(d, std::numeric_limits<double>::infinity()), hi(d, -std::numeric_limits<double>::infinity());
  for (const auto& v : t.trajectory.vertices())
    for (std::size_t i = 0; i < d; ++i) {
      lo[i] = std::min(lo[i], v[i] - t.delta);
      hi[i] = std::max(hi[i], v[i] + t.delta);
    }
  double box = 1.0;
  for (std::size_t i = 0; i < d; ++i) box *= hi[i] - lo[i];
  std::size_t inside = 0;
  Point x(d);
  for (std::size_t n = 0; n < n_points; ++n) {
    for (std::size_t i = 0; i < d; ++i) x[i] = rng.uniform(lo[i], hi[i]);
    if (t.contains(x)) ++inside;
  }
  const double vol = box * static_cast<double>(inside) / static_cast<double>(n_points);
  return vol / std::pow(t.delta, static_cast<double>(d) - 1.0);
}

/// Uniform point in a ball.
inline Point sample_in_ball(const Point& c, double r, Rng& rng) {
  const std::vector<double> u = sample_unit_sphere(c.size(), rng);
  const double s = r * std::pow(rng.uniform(), 1.0 / static_cast<double>(c.size()));
  Point x(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) x[i] = c[i] + s * u[i];
  return x;
}

/// Disjoint-ball packing sums and average multiplicity inside each ball,
/// against an assumed C_A. Estimator-backed: C_A is a sampled lower bound.
inline VerificationReport verify_packing(const RepresentationField& field, std::size_t n_regions, double c_a, double eps,
                                         Rng& rng, std::size_t mc_points = 100000, std::size_t family_size = 3) {
  field.validate();
  detail::require(n_regions >= 1, "verify_packing: need at least one region");
  const std::size_t d = field.dim();
  const double delta = field.delta();
  const double n_eps = std::pow(static_cast<double>(field.size()), eps);
  const double log_dd = (static_cast<double>(d) - 1.0) * std::log(delta);
  double c_t = 0.0;
  for (const auto& t : field.tubes) c_t = std::max(c_t, measure_tube_constant(t, mc_points / 10 + 1, rng));

  VerificationReport r;
  r.check_name = "lemma2_packing";
  r.theorem_backed = false;
  r.parameters = {{"C_A", c_a}, {"eps", eps}, {"c_T", c_t}, {"regions", n_regions}, {"delta", delta}};
  const double diam = field_diameter(field);
  for (std::size_t k = 0; k < n_regions; ++k) {
    // (A) a family of pairwise-disjoint balls
    std::vector<ConvexRegion> family;
    std::size_t retries = 0;
    while (family.size() < family_size) {
      ConvexRegion w = sample_anchored_ball(field, diam, rng);
      bool disjoint = true;
      for (const auto& o : family)
        if (distance(w.center, o.center) < w.radius + o.radius) disjoint = false;
      if (disjoint) {
        family.push_back(std::move(w));
        retries = 0;
      } else if (++retries > 100) {
        if (family.empty()) throw DegenerateInputError("verify_packing: could not sample disjoint regions");
        break;
      }
    }
    double count = 0.0, bound = 0.0;
    for (const auto& w : family) {
      count += static_cast<double>(tube_count_in_region(field, w).count);
      bound += c_a * std::exp(w.log_volume() - log_dd) * n_eps;
    }
    r.observe(count, bound, {{"part", "A"}, {"family", k}});

    // (C) average multiplicity inside the first ball of the family
    const ConvexRegion& w = family.front();
    std::vector<const Tube*> inside;
    for (const auto& t : field.tubes)
      if (tube_in_region(t, w)) inside.push_back(&t);
    double mult = 0.0;
    if (!inside.empty()) {
      const std::size_t pts = mc_points / n_regions + 1;
      std::size_t hits = 0;
      for (std::size_t s = 0; s < pts; ++s) {
        const Point x = sample_in_ball(w.center, w.radius, rng);
        for (const Tube* t : inside) hits += t->contains(x);
      }
      mult = static_cast<double>(hits) / static_cast<double>(pts);
    }
    r.observe(mult, c_t * c_a * n_eps, {{"part", "C"}, {"family", k}});
  }
  return r;
}

/// Disjoint-family head-count variance against C_B * F(sum Vol, #tubes).
/// Estimator-backed and dependent on the normalizer F (default F(v, n) = n).
inline VerificationReport verify_head_variance_packing(const std::vector<RepresentationField>& query_fields,
                                                       std::size_t n_families, double c_b, Rng& rng,
                                                       std::size_t family_size = 3,
                                                       const VarianceNormalizer& F = default_normalizer) {
  if (query_fields.size() < 2) throw InputError("verify_head_variance_packing: need at least 2 heads");
  VerificationReport r;
  r.check_name = "lemma2d_head_variance_packing";
  r.theorem_backed = false;
  r.parameters = {{"C_B", c_b}, {"families", n_families}, {"heads", query_fields.size()},
                  {"normalizer", "convention-dependent"}};
  std::vector<double> diam(query_fields.size());
  for (std::size_t h = 0; h < query_fields.size(); ++h) diam[h] = field_diameter(query_fields[h]);
  for (std::size_t k = 0; k < n_families; ++k) {
    const std::size_t h0 = rng.below(query_fields.size());
    std::vector<ConvexRegion> family;
    std::size_t retries = 0;
    while (family.size() < family_size) {
      ConvexRegion w = sample_anchored_ball(query_fields[h0], diam[h0], rng);
      bool disjoint = true;
      for (const auto& o : family)
        if (distance(w.center, o.center) < w.radius + o.radius) disjoint = false;
      if (disjoint) {
        family.push_back(std::move(w));
        retries = 0;
      } else if (++retries > 100) {
        break;
      }
    }
    double s = 0.0, s2 = 0.0, vol = 0.0;
    for (const auto& w : family) vol += std::exp(w.log_volume());
    for (const auto& f : query_fields) {
      double x = 0.0;
      for (const auto& w : family) x += static_cast<double>(tube_count_in_region(f, w).count);
      s += x;
      s2 += x * x;
    }
    const double n = static_cast<double>(query_fields.size());
    const double var = std::max(0.0, s2 / n - (s / n) * (s / n));
    r.observe(var, c_b * F(vol, query_fields[h0].size()), {{"family", k}, {"regions", family.size()}});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Lipschitz chain

struct LipschitzChainReport {
  std::vector<double> lambdas;
  double lambda_out = 0.0;
  double chain = 0.0;   // prod (1 + Lambda_l)
  double bound = 0.0;   // Lambda_out * chain
  VerificationReport calibration;
  VerificationReport holdout;
};

/// Calibrate per-layer constants on perturbation pairs propagated end to end,
/// then test the chain on fresh holdout pairs at the same scales. `layers[l]`
/// maps Z^(l) to its residual update; `out` maps Z^(L) to outputs.
inline LipschitzChainReport verify_lipschitz(const std::vector<StateMap>& layers, const StateMap& out,
                                             const std::vector<Tensor>& bases, std::size_t n_calibration,
                                             std::size_t n_holdout, Rng& rng,
                                             const std::vector<double>& scales = default_lipschitz_scales()) {
  detail::require(!bases.empty(), "verify_lipschitz: no base states");
  detail::require(n_calibration >= 1, "verify_lipschitz: need calibration pairs");
  const std::size_t L = layers.size();
  auto propagate = [&](const Tensor& z0) {
    std::vector<Tensor> zs{z0};
    std::vector<Tensor> fs;
    for (std::size_t l = 0; l < L; ++l) {
      fs.push_back(layers[l](zs.back()));
      zs.push_back(zs.back() + fs.back());
    }
    return std::make_pair(zs, fs);
  };
  struct Pair {
    std::vector<Tensor> za, zb, fa, fb;
    Tensor oa, ob;
  };
  auto make_pair = [&](const Tensor& base, double s) {
    Pair p;
    std::tie(p.za, p.fa) = propagate(base);
    std::tie(p.zb, p.fb) = propagate(perturb_state(base, s, rng));
    p.oa = out(p.za.back());
    p.ob = out(p.zb.back());
    return p;
  };

  LipschitzChainReport rep;
  rep.lambdas.assign(L, 0.0);
  std::vector<Pair> calib;
  for (const auto& b : bases)
    for (double s : scales)
      for (std::size_t k = 0; k < n_calibration; ++k) {
        Pair p = make_pair(b, s);
        for (std::size_t l = 0; l < L; ++l) {
          const double dz = frobenius_norm(p.za[l] - p.zb[l]);
          if (dz > 0.0) rep.lambdas[l] = std::max(rep.lambdas[l], frobenius_norm(p.fa[l] - p.fb[l]) / dz);
        }
        const double dl = frobenius_norm(p.za[L] - p.zb[L]);
        if (dl > 0.0) rep.lambda_out = std::max(rep.lambda_out, frobenius_norm(p.oa - p.ob) / dl);
        calib.push_back(std::move(p));
      }
  rep.chain = lipschitz_chain_bound(rep.lambdas, 1.0);
  rep.bound = rep.lambda_out * rep.chain;

  auto check = [&](VerificationReport& r, const Pair& p, std::size_t idx) {
    const double d0 = frobenius_norm(p.za[0] - p.zb[0]);
    r.observe(frobenius_norm(p.za[L] - p.zb[L]), rep.chain * d0, {{"pair", idx}, {"stage", "hidden"}});
    r.observe(frobenius_norm(p.oa - p.ob), rep.bound * d0, {{"pair", idx}, {"stage", "output"}});
  };
  rep.calibration.check_name = "lemma5_chain_calibration";
  for (std::size_t i = 0; i < calib.size(); ++i) check(rep.calibration, calib[i], i);
  rep.holdout.check_name = "lemma5_chain_holdout";
  rep.holdout.theorem_backed = false;
  for (std::size_t i = 0; i < n_holdout; ++i) {
    const Tensor& b = bases[i % bases.size()];
    const double s = scales[(i / bases.size()) % scales.size()];
    check(rep.holdout, make_pair(b, s), i);
  }
  nlohmann::json params = {{"lambdas", rep.lambdas}, {"lambda_out", rep.lambda_out}, {"chain", rep.chain},
                           {"L_K", rep.bound}, {"scales", scales}, {"bases", bases.size()}};
  rep.calibration.parameters = params;
  rep.holdout.parameters = params;
  return rep;
}

/// Model-level wrapper: bases are embedding states of random token sequences.
inline LipschitzChainReport verify_lipschitz(const Params& p, std::size_t n_calibration, std::size_t n_holdout,
                                             Rng& rng, std::size_t n_bases = 2, std::size_t seq_len = 16) {
  const std::size_t N = std::min(seq_len, p.config.max_seq);
  std::vector<Tensor> bases;
  for (std::size_t b = 0; b < n_bases; ++b) {
    std::vector<std::size_t> toks(N);
    for (auto& t : toks) t = rng.below(p.config.vocab_size);
    bases.push_back(forward(p, toks).hidden[0]);
  }
  std::vector<StateMap> layers;
  for (std::size_t l = 0; l < p.config.n_layers; ++l)
    layers.push_back([&p, l, N](const Tensor& z) { return layer_update(p, l, z, 1, N); });
  StateMap out = [&p](const Tensor& z) { return output_map(p, z); };
  return verify_lipschitz(layers, out, bases, n_calibration, n_holdout, rng);
}

/// Lambda_l of block `layer` on a base state (rows = one sequence of seq_len tokens).
inline LipschitzEstimate estimate_layer_lipschitz(const Params& p, std::size_t layer, const Tensor& base,
                                                  std::size_t pairs_per_scale, Rng& rng) {
  const std::size_t n = base.rows();
  return estimate_lipschitz([&](const Tensor& z) { return layer_update(p, layer, z, 1, n); }, base, pairs_per_scale,
                            rng);
}

// ---------------------------------------------------------------------------
// Grain-probe interference

/// Random orthonormal d x d matrix.
inline Tensor random_orthogonal(std::size_t d, Rng& rng) {
  Tensor g(Shape{d, d});
  for (auto& v : g.values()) v = rng.normal();
  return orthonormal_basis(g, 0.0);
}

inline double max_pairwise_overlap(const std::vector<Tensor>& bases) {
  double o = 0.0;
  for (std::size_t p = 0; p < bases.size(); ++p)
    for (std::size_t q = p + 1; q < bases.size(); ++q) o = std::max(o, projector_overlap(bases[p], bases[q]));
  return o;
}

/// Subspaces of the given dimensions in R^d whose largest pairwise overlap is
/// at most `overlap_target`: orthogonal coordinate blocks of a random rotation,
/// tilted by a shared-scale random perturbation found by bisection.
inline std::vector<Tensor> subspaces_with_overlap(const std::vector<std::size_t>& dims, std::size_t d,
                                                  double overlap_target, Rng& rng) {
  std::size_t total = 0;
  for (std::size_t k : dims) {
    if (k == 0) throw InputError("subspace dimensions must be >= 1");
    total += k;
  }
  if (dims.size() < 2) throw InputError("need at least 2 subspaces");
  if (total > d || !(overlap_target >= 0.0 && overlap_target < 1.0))
    throw InputError("infeasible subspace construction: dims sum to " + std::to_string(total) + " in d=" +
                     std::to_string(d) + " with overlap target " + std::to_string(overlap_target));
  const Tensor q = random_orthogonal(d, rng);
  std::vector<Tensor> base, noise;
  std::size_t off = 0;
  for (std::size_t k : dims) {
    Tensor b(Shape{d, k}), g(Shape{d, k});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        b(i, c) = q(i, off + c);
        g(i, c) = rng.normal();
      }
    off += k;
    base.push_back(std::move(b));
    noise.push_back(std::move(g));
  }
  auto build = [&](double eps) {
    std::vector<Tensor> out;
    for (std::size_t s = 0; s < base.size(); ++s) {
      Tensor m = base[s];
      axpy(eps, noise[s], m);
      out.push_back(orthonormal_basis(m, 0.0));
    }
    return out;
  };
  if (overlap_target == 0.0) return base;
  double lo = 0.0, hi = 1.0;
  while (max_pairwise_overlap(build(hi)) < overlap_target && hi < 1e6) hi *= 2.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (max_pairwise_overlap(build(mid)) <= overlap_target ? lo : hi) = mid;
  }
  return build(lo);
}

inline std::vector<double> random_in_span(const Tensor& u, Rng& rng, double scale = 1.0) {
  std::vector<double> x(u.rows(), 0.0);
  for (std::size_t c = 0; c < u.cols(); ++c) {
    const double a = scale * rng.normal();
    for (std::size_t i = 0; i < u.rows(); ++i) x[i] += a * u(i, c);
  }
  return x;
}

/// Randomized interference checks. Each trial builds m subspaces (dimensions
/// drawn from `subspace_dims`), a probe in one of them and a component per
/// grain; the report covers the exact decomposition and the interference bound.
inline VerificationReport verify_probe_bound(const std::vector<std::size_t>& subspace_dims, double overlap_target,
                                             std::size_t n_trials, Rng& rng, std::size_t m_min = 2,
                                             std::size_t m_max = 6, std::size_t d = 32,
                                             const VerifyOptions& opt = {}) {
  detail::require(!subspace_dims.empty(), "verify_probe_bound: no subspace dimensions");
  detail::require(m_min >= 2 && m_min <= m_max, "verify_probe_bound: need 2 <= m_min <= m_max");
  VerificationReport r;
  r.check_name = "lemma6_probe_interference";
  r.parameters = {{"overlap_target", overlap_target}, {"trials", n_trials}, {"m_min", m_min}, {"m_max", m_max}, {"d", d}};
  double worst_decomp = 0.0;
  for (std::size_t t = 0; t < n_trials; ++t) {
    const std::size_t m = m_min + rng.below(m_max - m_min + 1);
    std::vector<std::size_t> dims(m);
    for (auto& k : dims) k = subspace_dims[rng.below(subspace_dims.size())];
    std::vector<Tensor> bases = subspaces_with_overlap(dims, d, overlap_target, rng);
    const std::size_t j = rng.below(m);
    const std::vector<double> w = random_in_span(bases[j], rng);
    std::vector<std::vector<double>> comps;
    for (std::size_t q = 0; q < m; ++q) comps.push_back(random_in_span(bases[q], rng, std::exp(rng.uniform(-2.0, 2.0))));
    const Interference res = probe_interference(w, j, bases, comps);
    // Exact decomposition: <w, x> = s_j + sum_{q != j} <w, x^(q)>.
    double cross = 0.0, scale = std::abs(res.factor);
    for (std::size_t q = 0; q < m; ++q)
      if (q != j) {
        const double c = dot(w, comps[q]);
        cross += c;
        scale += std::abs(c);
      }
    const double decomp_err = std::abs(res.response - (res.factor + cross));
    worst_decomp = std::max(worst_decomp, decomp_err / std::max(1.0, scale));
    r.observe(decomp_err, 1e-10 * std::max(1.0, scale), {{"trial", t}, {"part", "decomposition"}});
    r.observe(std::abs(res.interference), opt.bound_scale * res.bound,
              {{"trial", t}, {"part", "bound"}, {"m", m}, {"overlap", res.overlap}});
  }
  r.parameters["worst_decomposition_error"] = worst_decomp;
  return r;
}

/// The equality case: two lines at overlap c, probe along the first line,
/// foreign component along the second. Returns (interference, bound).
inline std::pair<double, double> probe_bound_extremal(double c, std::size_t d = 4) {
  detail::require(c > 0.0 && c < 1.0 && d >= 2, "probe_bound_extremal: need 0 < c < 1, d >= 2");
  Tensor a(Shape{d, 1}), b(Shape{d, 1});
  a(0, 0) = 1.0;
  b(0, 0) = c;
  b(1, 0) = std::sqrt(1.0 - c * c);
  const std::vector<double> w = column(a, 0);
  std::vector<double> x1 = column(a, 0), x2 = column(b, 0);
  for (auto& v : x1) v *= 0.7;
  for (auto& v : x2) v *= 2.5;
  const Interference res = probe_interference(w, 0, {a, b}, {x1, x2});
  return {std::abs(res.interference), res.bound};
}

}  // namespace geolan
