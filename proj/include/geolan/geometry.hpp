// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Token trajectories through depth, their delta-tubes, grain decomposition of
// a representation field, convex-region counts, empirical Wolff constants,
// Lipschitz chains and grain-subspace probe interference.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geolan/error.hpp"
#include "geolan/linalg.hpp"
#include "geolan/rng.hpp"
#include "geolan/special.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

using Point = std::vector<double>;

// ---------------------------------------------------------------------------
// Trajectories and tubes

class Trajectory {
 public:
  Trajectory() = default;

  /// Vertices z^(0..L) placed at t_l = l / L.
  explicit Trajectory(std::vector<Point> vertices) : vertices_(std::move(vertices)) {
    if (vertices_.size() < 2)
      throw InputError("trajectory needs at least 2 layers, got " + std::to_string(vertices_.size()));
    const std::size_t d = vertices_[0].size();
    if (d == 0) throw InputError("trajectory states must have dimension >= 1");
    for (const auto& v : vertices_)
      if (v.size() != d) throw InputError("trajectory states have inconsistent dimensions");
  }

  /// A stationary trajectory: both vertices at `p`. Models an instantaneous slice.
  static Trajectory stationary(const Point& p) { return Trajectory({p, p}); }

  std::size_t dim() const { return vertices_.at(0).size(); }
  std::size_t n_layers() const { return vertices_.size() - 1; }
  std::size_t n_vertices() const { return vertices_.size(); }
  const std::vector<Point>& vertices() const { return vertices_; }
  const Point& vertex(std::size_t l) const { return vertices_.at(l); }
  double time(std::size_t l) const {
    return static_cast<double>(l) / static_cast<double>(n_layers());
  }

  /// gamma(t) for t in [0, 1]; returns stored vertices exactly at t_l.
  Point at(double t) const {
    detail::require(t >= 0.0 && t <= 1.0, "Trajectory::at: t must lie in [0, 1]");
    const double x = t * static_cast<double>(n_layers());
    std::size_t seg = static_cast<std::size_t>(std::floor(x));
    if (seg >= n_layers()) return vertices_.back();
    const double u = x - static_cast<double>(seg);
    if (u == 0.0) return vertices_[seg];
    Point p(dim());
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] = vertices_[seg][i] + u * (vertices_[seg + 1][i] - vertices_[seg][i]);
    return p;
  }

 private:
  std::vector<Point> vertices_;
};

inline Trajectory trajectory_from_states(std::vector<Point> states) { return Trajectory(std::move(states)); }

inline double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Euclidean distance from x to the segment [a, b].
inline double point_segment_distance(std::span<const double> x, std::span<const double> a,
                                     std::span<const double> b) {
  double ab2 = 0.0, proj = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = b[i] - a[i];
    ab2 += e * e;
    proj += (x[i] - a[i]) * e;
  }
  const double t = ab2 > 0.0 ? std::clamp(proj / ab2, 0.0, 1.0) : 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = a[i] + t * (b[i] - a[i]) - x[i];
    s += c * c;
  }
  return std::sqrt(s);
}

/// Minimum distance between segments [p1, q1] and [p2, q2] (clamped closest
/// points; handles degenerate and parallel segments).
inline double segment_segment_distance(std::span<const double> p1, std::span<const double> q1,
                                       std::span<const double> p2, std::span<const double> q2) {
  const std::size_t n = p1.size();
  double a = 0.0, e = 0.0, b = 0.0, c = 0.0, f = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d1 = q1[i] - p1[i], d2 = q2[i] - p2[i], r = p1[i] - p2[i];
    a += d1 * d1;
    e += d2 * d2;
    b += d1 * d2;
    c += d1 * r;
    f += d2 * r;
  }
  constexpr double tiny = 1e-300;
  double s = 0.0, t = 0.0;
  if (a <= tiny && e <= tiny) {
    s = t = 0.0;
  } else if (a <= tiny) {
    s = 0.0;
    t = std::clamp(f / e, 0.0, 1.0);
  } else if (e <= tiny) {
    t = 0.0;
    s = std::clamp(-c / a, 0.0, 1.0);
  } else {
    const double denom = a * e - b * b;
    s = denom > 0.0 ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
    t = (b * s + f) / e;
    if (t < 0.0) {
      t = 0.0;
      s = std::clamp(-c / a, 0.0, 1.0);
    } else if (t > 1.0) {
      t = 1.0;
      s = std::clamp((b - c) / a, 0.0, 1.0);
    }
  }
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p1[i] + s * (q1[i] - p1[i]) - (p2[i] + t * (q2[i] - p2[i]));
    d2 += x * x;
  }
  return std::sqrt(d2);
}

inline double point_trajectory_distance(std::span<const double> x, const Trajectory& traj) {
  detail::require(x.size() == traj.dim(), "point_trajectory_distance: dimension mismatch");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < traj.n_layers(); ++l)
    best = std::min(best, point_segment_distance(x, traj.vertex(l), traj.vertex(l + 1)));
  return best;
}

inline double trajectory_distance(const Trajectory& a, const Trajectory& b) {
  detail::require(a.dim() == b.dim(), "trajectory_distance: dimension mismatch");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a.n_layers(); ++i)
    for (std::size_t j = 0; j < b.n_layers(); ++j)
      best = std::min(best, segment_segment_distance(a.vertex(i), a.vertex(i + 1), b.vertex(j), b.vertex(j + 1)));
  return best;
}

struct Tube {
  Trajectory trajectory;
  double delta = 0.0;

  Tube() = default;
  Tube(Trajectory t, double d) : trajectory(std::move(t)), delta(d) {
    if (!(delta > 0.0)) throw InputError("tube radius delta must be > 0");
  }

  bool contains(std::span<const double> x) const { return point_trajectory_distance(x, trajectory) < delta; }
};

/// Footprints meet iff the trajectories come within 2 delta; distances equal to
/// 2 delta up to 1e-12 (relative) count as meeting.
inline bool tubes_intersect(const Tube& a, const Tube& b) {
  detail::require(a.trajectory.dim() == b.trajectory.dim(), "tubes_intersect: dimension mismatch");
  detail::require(a.delta == b.delta, "tubes_intersect: tubes must share delta");
  const double two = 2.0 * a.delta;
  return trajectory_distance(a.trajectory, b.trajectory) <= two * (1.0 + 1e-12);
}

struct RepresentationField {
  std::vector<Tube> tubes;

  RepresentationField() = default;
  explicit RepresentationField(std::vector<Tube> t) : tubes(std::move(t)) { validate(); }

  void validate() const {
    if (tubes.empty()) throw InputError("representation field is empty");
    for (const auto& t : tubes) {
      if (t.delta != tubes[0].delta) throw InputError("field tubes must share delta");
      if (t.trajectory.dim() != tubes[0].trajectory.dim()) throw InputError("field tubes must share dimension");
    }
  }

  std::size_t size() const { return tubes.size(); }
  double delta() const { return tubes.at(0).delta; }
  std::size_t dim() const { return tubes.at(0).trajectory.dim(); }
};

/// Field of full-depth tubes: states[l] is the (tokens x d) matrix of layer l.
inline RepresentationField field_from_layers(const std::vector<Tensor>& states, double delta) {
  if (states.size() < 2) throw InputError("field_from_layers: need at least 2 layers");
  const std::size_t n = states[0].rows();
  std::vector<Tube> tubes;
  tubes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Point> v;
    for (const auto& s : states) v.emplace_back(s.row(i).begin(), s.row(i).end());
    tubes.emplace_back(Trajectory(std::move(v)), delta);
  }
  return RepresentationField(std::move(tubes));
}

/// Instantaneous slice: one ball B(z_i, delta) per row.
inline RepresentationField field_from_slice(const Tensor& states, double delta) {
  require_matrix(states, "field_from_slice");
  std::vector<Tube> tubes;
  tubes.reserve(states.rows());
  for (std::size_t i = 0; i < states.rows(); ++i)
    tubes.emplace_back(Trajectory::stationary(Point(states.row(i).begin(), states.row(i).end())), delta);
  return RepresentationField(std::move(tubes));
}

// ---------------------------------------------------------------------------
// Grains

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<unsigned> rank_;
};

struct GrainSubspace {
  Tensor basis;  // d x k, orthonormal columns
  bool rank_deficient = false;
};

struct GrainAssignment {
  std::vector<std::size_t> grain_of;  // token -> grain, grains numbered by first member
  std::size_t n_grains = 0;
  std::vector<GrainSubspace> subspaces;

  std::vector<std::size_t> members(std::size_t g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < grain_of.size(); ++i)
      if (grain_of[i] == g) out.push_back(i);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    nlohmann::json map = nlohmann::json::object();
    for (std::size_t i = 0; i < grain_of.size(); ++i) map[std::to_string(i)] = grain_of[i];
    j["grain_of"] = map;
    j["n_grains"] = n_grains;
    nlohmann::json dims = nlohmann::json::array();
    for (const auto& s : subspaces) dims.push_back(s.basis.rank() == 2 ? s.basis.cols() : 0);
    j["subspace_dims"] = dims;
    return j;
  }
};

/// Relabel component roots so grains are numbered in order of first member.
inline GrainAssignment assignment_from_roots(const std::vector<std::size_t>& roots) {
  GrainAssignment a;
  a.grain_of.resize(roots.size());
  std::vector<std::size_t> label(roots.size(), std::numeric_limits<std::size_t>::max());
  for (std::size_t i = 0; i < roots.size(); ++i) {
    std::size_t& l = label[roots[i]];
    if (l == std::numeric_limits<std::size_t>::max()) l = a.n_grains++;
    a.grain_of[i] = l;
  }
  return a;
}

/// Connected components of the footprint-intersection graph.
inline GrainAssignment grain_decompose(const RepresentationField& field) {
  field.validate();
  const std::size_t n = field.size();
  UnionFind uf(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (uf.find(i) != uf.find(j) && tubes_intersect(field.tubes[i], field.tubes[j])) uf.unite(i, j);
  std::vector<std::size_t> roots(n);
  for (std::size_t i = 0; i < n; ++i) roots[i] = uf.find(i);
  return assignment_from_roots(roots);
}

// ---------------------------------------------------------------------------
// Regions and counts

/// Number of rows with <x_j, v> >= cos(aperture).
inline std::size_t cone_count(const Tensor& points, std::span<const double> v, double aperture) {
  require_matrix(points, "cone_count");
  detail::require(aperture > 0.0 && aperture < std::numbers::pi / 2, "cone_count: aperture must lie in (0, pi/2)");
  detail::require(v.size() == points.cols(), "cone_count: direction dimension mismatch");
  const double c = std::cos(aperture);
  std::size_t n = 0;
  for (std::size_t i = 0; i < points.rows(); ++i)
    if (dot(points.row(i), v) >= c) ++n;
  return n;
}

struct ConvexRegion {
  enum class Kind { Ball, Cone };
  Kind kind = Kind::Ball;
  Point center;       // Ball
  Point direction;    // Cone apex direction (unit), apex at origin
  double radius = 0;  // Ball radius, or Cone radius bound
  double aperture = 0;

  static ConvexRegion ball(Point c, double r) {
    if (!(r > 0.0)) throw InputError("ball radius must be > 0");
    ConvexRegion w;
    w.kind = Kind::Ball;
    w.center = std::move(c);
    w.radius = r;
    return w;
  }

  static ConvexRegion cone(Point v, double aperture, double radius) {
    if (!(radius > 0.0)) throw InputError("cone radius must be > 0");
    if (!(aperture > 0.0 && aperture < std::numbers::pi / 2)) throw InputError("cone aperture must lie in (0, pi/2)");
    const double n = norm2(v);
    if (!(n > 0.0)) throw InputError("cone direction must be nonzero");
    for (auto& x : v) x /= n;
    ConvexRegion w;
    w.kind = Kind::Cone;
    w.direction = std::move(v);
    w.aperture = aperture;
    w.radius = radius;
    return w;
  }

  std::size_t dim() const { return kind == Kind::Ball ? center.size() : direction.size(); }

  /// Lebesgue measure. Cone volume is the spherical-sector volume.
  double log_volume() const {
    const std::size_t d = dim();
    if (kind == Kind::Ball) return log_ball_volume(d, radius);
    // Sector fraction = (area of cap of half-angle aperture) / (sphere area).
    if (d == 1) return std::log(radius);
    const double dd = static_cast<double>(d);
    const double cap = integrate_adaptive(
        [dd](double th) { return std::pow(std::sin(th), dd - 2.0); }, 0.0, aperture, 1e-14);
    const double full = integrate_adaptive(
        [dd](double th) { return std::pow(std::sin(th), dd - 2.0); }, 0.0, std::numbers::pi, 1e-14);
    return log_ball_volume(d, radius) + std::log(cap / full);
  }

  /// Distance from x to the complement of the region (0 when x is outside).
  double depth(std::span<const double> x) const {
    if (kind == Kind::Ball) return std::max(0.0, radius - distance(x, center));
    const double r = norm2(x);
    const double to_sphere = radius - r;
    if (to_sphere <= 0.0) return 0.0;
    if (r == 0.0) return 0.0;  // apex lies on the boundary
    const double c = std::clamp(dot(x, direction) / r, -1.0, 1.0);
    const double theta = std::acos(c);
    if (theta >= aperture) return 0.0;
    return std::min(to_sphere, r * std::sin(aperture - theta));
  }
};

/// Whether the open delta-tube around a polyline lies inside a convex region.
/// The set of points at depth >= delta is convex, so testing the vertices is
/// exact for both balls and cones.
inline bool tube_in_region(const Tube& t, const ConvexRegion& w) {
  detail::require(t.trajectory.dim() == w.dim(), "tube_in_region: dimension mismatch");
  for (const auto& v : t.trajectory.vertices())
    if (w.depth(v) < t.delta) return false;
  return true;
}

struct RegionCount {
  std::size_t count = 0;
  bool degenerate = false;  // region thinner than a tube
  std::string note;
};

inline RegionCount tube_count_in_region(const RepresentationField& field, const ConvexRegion& w) {
  RegionCount rc;
  if (w.radius <= field.delta()) {
    rc.degenerate = true;
    rc.note = "region radius <= delta: no tube fits";
    return rc;
  }
  for (const auto& t : field.tubes)
    if (tube_in_region(t, w)) ++rc.count;
  return rc;
}

// ---------------------------------------------------------------------------
// Empirical Wolff constants

struct CollapseEstimate {
  double estimate = 0.0;
  double log_estimate = -std::numeric_limits<double>::infinity();
  std::optional<ConvexRegion> argmax;
  std::size_t argmax_count = 0;
  std::size_t regions = 0;
};

/// log of count * delta^(d-1) / (Vol(W) * n^eps).
inline double log_collapse_ratio(std::size_t count, const ConvexRegion& w, double delta, std::size_t n_tubes,
                                 double eps) {
  if (count == 0) return -std::numeric_limits<double>::infinity();
  const double d = static_cast<double>(w.dim());
  return std::log(static_cast<double>(count)) + (d - 1.0) * std::log(delta) - w.log_volume() -
         eps * std::log(static_cast<double>(n_tubes));
}

/// Largest distance between any two trajectory vertices of the field.
inline double field_diameter(const RepresentationField& field) {
  std::vector<const Point*> pts;
  for (const auto& t : field.tubes)
    for (const auto& v : t.trajectory.vertices()) pts.push_back(&v);
  double best = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) best = std::max(best, distance(*pts[i], *pts[j]));
  return best;
}

/// Ball centred on a random trajectory vertex with log-uniform radius in
/// [2 delta, diameter + 2 delta].
inline ConvexRegion sample_anchored_ball(const RepresentationField& field, double diameter, Rng& rng) {
  const Tube& t = field.tubes[rng.below(field.size())];
  const Point& c = t.trajectory.vertex(rng.below(t.trajectory.n_vertices()));
  const double lo = 2.0 * field.delta();
  const double hi = diameter + lo;
  const double r = std::exp(rng.uniform(std::log(lo), std::log(hi)));
  return ConvexRegion::ball(c, r);
}

/// Lower-bound estimate of C_A: max over sampled regions of the collapse ratio.
inline CollapseEstimate estimate_collapse_constant(const RepresentationField& field, std::size_t n_regions,
                                                   double eps, Rng& rng) {
  detail::require(eps > 0.0, "estimate_collapse_constant: eps must be > 0");
  field.validate();
  const double diam = field_diameter(field);
  CollapseEstimate est;
  for (std::size_t k = 0; k < n_regions; ++k) {
    ConvexRegion w = sample_anchored_ball(field, diam, rng);
    const std::size_t c = tube_count_in_region(field, w).count;
    const double lr = log_collapse_ratio(c, w, field.delta(), field.size(), eps);
    ++est.regions;
    if (lr > est.log_estimate) {
      est.log_estimate = lr;
      est.argmax = w;
      est.argmax_count = c;
    }
  }
  est.estimate = std::exp(est.log_estimate);
  return est;
}

/// Normalizer F(volume, n) for head-count variance; the default is F(v, n) = n.
using VarianceNormalizer = std::function<double(double volume, std::size_t n_tubes)>;

inline double default_normalizer(double, std::size_t n) { return static_cast<double>(n); }

/// Population variance over heads of per-head tube counts in W.
inline double head_count_variance(const std::vector<RepresentationField>& query_fields, const ConvexRegion& w) {
  if (query_fields.size() < 2) throw InputError("head_count_variance: need at least 2 heads");
  double s = 0.0, s2 = 0.0;
  for (const auto& f : query_fields) {
    const double c = static_cast<double>(tube_count_in_region(f, w).count);
    s += c;
    s2 += c * c;
  }
  const double n = static_cast<double>(query_fields.size());
  const double mean = s / n;
  return std::max(0.0, s2 / n - mean * mean);
}

struct HeadVarianceEstimate {
  double estimate = 0.0;
  std::optional<ConvexRegion> argmax;
  std::size_t regions = 0;
};

/// max over sampled balls of Var_h(count) / F(Vol(W), #tubes).
inline HeadVarianceEstimate estimate_head_variance_constant(const std::vector<RepresentationField>& query_fields,
                                                            std::size_t n_regions, Rng& rng,
                                                            const VarianceNormalizer& F = default_normalizer) {
  if (query_fields.size() < 2) throw InputError("head variance estimate: need at least 2 heads");
  std::vector<double> diam(query_fields.size());
  for (std::size_t h = 0; h < query_fields.size(); ++h) diam[h] = field_diameter(query_fields[h]);
  HeadVarianceEstimate est;
  for (std::size_t k = 0; k < n_regions; ++k) {
    const std::size_t h = rng.below(query_fields.size());
    ConvexRegion w = sample_anchored_ball(query_fields[h], diam[h], rng);
    const double v = head_count_variance(query_fields, w);
    const double f = F(std::exp(w.log_volume()), query_fields[h].size());
    const double ratio = f > 0.0 ? v / f : 0.0;
    ++est.regions;
    if (ratio > est.estimate || !est.argmax) {
      est.estimate = std::max(est.estimate, ratio);
      est.argmax = w;
    }
  }
  return est;
}

// ---------------------------------------------------------------------------
// Lipschitz estimates

using StateMap = std::function<Tensor(const Tensor&)>;

inline const std::vector<double>& default_lipschitz_scales() {
  static const std::vector<double> s{1e-3, 1e-2, 1e-1};
  return s;
}

/// Gaussian perturbation of z with Frobenius norm scale * ||z||_F.
inline Tensor perturb_state(const Tensor& z, double scale, Rng& rng) {
  Tensor g(z.shape());
  for (auto& v : g.values()) v = rng.normal();
  const double gn = frobenius_norm(g);
  const double zn = frobenius_norm(z);
  Tensor out = z;
  if (gn > 0.0) axpy(scale * (zn > 0.0 ? zn : 1.0) / gn, g, out);
  return out;
}

struct LipschitzEstimate {
  double lambda = 0.0;
  std::size_t pairs = 0;
  std::size_t skipped = 0;
};

/// max ||f(Z) - f(Z~)||_F / ||Z - Z~||_F over perturbations of `base` at the
/// given relative scales.
inline LipschitzEstimate estimate_lipschitz(const StateMap& f, const Tensor& base, std::size_t pairs_per_scale,
                                            Rng& rng, const std::vector<double>& scales = default_lipschitz_scales()) {
  detail::require(pairs_per_scale >= 1, "estimate_lipschitz: need at least one pair");
  LipschitzEstimate est;
  const Tensor fb = f(base);
  for (double s : scales)
    for (std::size_t k = 0; k < pairs_per_scale; ++k) {
      Tensor z2 = perturb_state(base, s, rng);
      const double dz = frobenius_norm(z2 - base);
      if (dz == 0.0) {
        ++est.skipped;
        continue;
      }
      const double df = frobenius_norm(f(z2) - fb);
      est.lambda = std::max(est.lambda, df / dz);
      ++est.pairs;
    }
  return est;
}

/// Lambda_out * prod (1 + Lambda_l).
inline double lipschitz_chain_bound(const std::vector<double>& lambdas, double lambda_out) {
  detail::require(lambda_out >= 0.0, "lipschitz_chain_bound: negative constant");
  double p = lambda_out;
  for (double l : lambdas) {
    detail::require(l >= 0.0, "lipschitz_chain_bound: negative constant");
    p *= 1.0 + l;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Grain subspaces and probes

/// Top-q principal directions (about the origin) of each grain's member rows.
/// A grain whose members span fewer than q directions gets the rank it has
/// and is flagged.
inline std::vector<GrainSubspace> grain_subspaces(const Tensor& states, const GrainAssignment& a, std::size_t q,
                                                  double rel_tol = 1e-10) {
  require_matrix(states, "grain_subspaces");
  detail::require(a.grain_of.size() == states.rows(), "grain_subspaces: assignment size mismatch");
  detail::require(q >= 1, "grain_subspaces: q must be >= 1");
  const std::size_t d = states.cols();
  std::vector<GrainSubspace> out(a.n_grains);
  for (std::size_t g = 0; g < a.n_grains; ++g) {
    const auto mem = a.members(g);
    Tensor m(Shape{d, mem.size()});
    for (std::size_t k = 0; k < mem.size(); ++k)
      for (std::size_t i = 0; i < d; ++i) m(i, k) = states(mem[k], i);
    Tensor basis = orthonormal_basis(m, rel_tol);
    const std::size_t k = std::min(q, basis.cols());
    Tensor b(Shape{d, k});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t c = 0; c < k; ++c) b(i, c) = basis(i, c);
    out[g].basis = std::move(b);
    out[g].rank_deficient = k < q;
  }
  return out;
}

/// ||P_p P_q||_op as the largest singular value of U_p^T U_q.
inline double projector_overlap(const Tensor& up, const Tensor& uq) {
  require_matrix(up, "projector_overlap");
  require_matrix(uq, "projector_overlap");
  detail::require(up.rows() == uq.rows(), "projector_overlap: ambient dimension mismatch");
  if (up.cols() == 0 || uq.cols() == 0) return 0.0;
  return singular_values(matmul_tn(up, uq))[0];
}

inline std::vector<double> project(const Tensor& u, std::span<const double> x) {
  std::vector<double> c(u.cols(), 0.0), out(u.rows(), 0.0);
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t k = 0; k < u.cols(); ++k) c[k] += u(i, k) * x[i];
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t k = 0; k < u.cols(); ++k) out[i] += u(i, k) * c[k];
  return out;
}

inline bool in_span(const Tensor& u, std::span<const double> x, double tol = 1e-8) {
  const auto p = project(u, x);
  return distance(p, x) <= tol * std::max(1.0, norm2(x));
}

struct Interference {
  double response = 0.0;      // <w, x>
  double factor = 0.0;        // <w, x^(j)>
  double interference = 0.0;  // response - factor
  double overlap = 0.0;       // 1/K = max_{p != q} ||P_p P_q||
  double bound = 0.0;         // (||w|| / K) sqrt(m - 1) ||x - x^(j)||
  double first_bound = 0.0;   // (||w|| / K) sum_{q != j} ||x^(q)||
  bool holds = true;
};

/// Probe response split into the grain's own factor and cross-grain
/// interference. `components[q]` must lie in span(bases[q]); `w` in span(bases[j]).
inline Interference probe_interference(std::span<const double> w, std::size_t j, const std::vector<Tensor>& bases,
                                       const std::vector<std::vector<double>>& components) {
  const std::size_t m = bases.size();
  if (components.size() != m) throw InputError("probe_interference: need one component per grain");
  if (j >= m) throw InputError("probe_interference: grain index out of range");
  if (!in_span(bases[j], w)) throw InputError("probe_interference: probe is not in its grain subspace");
  for (std::size_t q = 0; q < m; ++q)
    if (!in_span(bases[q], components[q]))
      throw InputError("probe_interference: component " + std::to_string(q) + " is outside its subspace");
  const std::size_t d = w.size();
  Interference r;
  std::vector<double> x(d, 0.0), rest(d, 0.0);
  double sum_norms = 0.0;
  for (std::size_t q = 0; q < m; ++q) {
    for (std::size_t i = 0; i < d; ++i) x[i] += components[q][i];
    if (q != j) {
      for (std::size_t i = 0; i < d; ++i) rest[i] += components[q][i];
      sum_norms += norm2(components[q]);
    }
  }
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t q = p + 1; q < m; ++q) r.overlap = std::max(r.overlap, projector_overlap(bases[p], bases[q]));
  r.response = dot(w, x);
  r.factor = dot(w, components[j]);
  r.interference = r.response - r.factor;
  const double wn = norm2(w);
  r.first_bound = wn * r.overlap * sum_norms;
  r.bound = wn * r.overlap * std::sqrt(static_cast<double>(m - 1)) * norm2(rest);
  r.holds = std::abs(r.interference) <= r.bound + 1e-9;
  return r;
}

}  // namespace geolan
