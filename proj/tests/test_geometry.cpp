#include <gtest/gtest.h>

#include <cmath>
#include <deque>
#include <numbers>

#include "geolan/geometry.hpp"

using namespace geolan;

namespace {

Point random_point(std::size_t d, Rng& rng, double scale = 1.0) {
  Point p(d);
  for (auto& v : p) v = scale * rng.normal();
  return p;
}

Trajectory random_trajectory(std::size_t layers, std::size_t d, Rng& rng, double scale = 1.0) {
  std::vector<Point> v;
  for (std::size_t l = 0; l <= layers; ++l) v.push_back(random_point(d, rng, scale));
  return Trajectory(std::move(v));
}

Tube straight_tube(Point a, Point b, double delta) { return Tube(Trajectory({std::move(a), std::move(b)}), delta); }

// Components by breadth-first flood fill over the full intersection matrix,
// labelled in order of first member.
std::vector<std::size_t> flood_fill(const RepresentationField& f) {
  const std::size_t n = f.size();
  std::vector<std::vector<bool>> adj(n, std::vector<bool>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) adj[i][j] = i != j && tubes_intersect(f.tubes[i], f.tubes[j]);
  std::vector<std::size_t> label(n, n);
  std::size_t next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (label[s] != n) continue;
    std::deque<std::size_t> q{s};
    label[s] = next;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop_front();
      for (std::size_t v = 0; v < n; ++v)
        if (adj[u][v] && label[v] == n) {
          label[v] = next;
          q.push_back(v);
        }
    }
    ++next;
  }
  return label;
}

double dense_max_distance(const Trajectory& t, const Point& c, std::size_t samples) {
  double best = 0.0;
  for (std::size_t k = 0; k <= samples; ++k)
    best = std::max(best, distance(t.at(static_cast<double>(k) / static_cast<double>(samples)), c));
  return best;
}

Tensor orthonormal_columns(std::size_t d, std::size_t k, Rng& rng) {
  Tensor a(Shape{d, k});
  for (auto& v : a.values()) v = rng.normal();
  return orthonormal_basis(a, 1e-12);
}

}  // namespace

TEST(Trajectory, Interpolation) {
  const Trajectory t({{0.0, 2.0}, {4.0, 6.0}});
  const Point mid = t.at(0.5);
  EXPECT_DOUBLE_EQ(mid[0], 2.0);
  EXPECT_DOUBLE_EQ(mid[1], 4.0);
  const Trajectory c({{1.0, 1.0}, {1.0, 1.0}, {1.0, 1.0}});
  EXPECT_EQ(c.at(0.37), (Point{1.0, 1.0}));
  Rng rng(1);
  const Trajectory r = random_trajectory(5, 4, rng);
  for (std::size_t l = 0; l <= 5; ++l) EXPECT_EQ(r.at(r.time(l)), r.vertex(l));
  EXPECT_THROW(Trajectory(std::vector<Point>{Point{1.0}}), InputError);
}

TEST(PointTrajectoryDistance, Examples) {
  const Trajectory t({{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}});
  EXPECT_EQ(point_trajectory_distance(Point{1.0, 0.0, 0.0}, t), 0.0);
  EXPECT_NEAR(point_trajectory_distance(Point{0.5, 1.0, 0.0}, t), 1.0, 1e-15);
}

TEST(PointTrajectoryDistance, DenseSamplingOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Trajectory t = random_trajectory(3, 4, rng);
    const Point x = random_point(4, rng);
    double best = INFINITY;
    for (std::size_t k = 0; k <= 10000; ++k) best = std::min(best, distance(t.at(k / 10000.0), x));
    EXPECT_NEAR(point_trajectory_distance(x, t), best, 1e-3);
    EXPECT_LE(point_trajectory_distance(x, t), best + 1e-15);
  }
}

TEST(TubesIntersect, Examples) {
  const double delta = 0.1;
  EXPECT_FALSE(tubes_intersect(straight_tube({0, 0}, {1, 0}, delta), straight_tube({0, 3 * delta}, {1, 3 * delta}, delta)));
  EXPECT_TRUE(tubes_intersect(straight_tube({0, 0}, {1, 1}, delta), straight_tube({0, 1}, {1, 0}, delta)));
  // exact 2 delta separation counts as meeting
  EXPECT_TRUE(tubes_intersect(straight_tube({0, 0}, {1, 0}, 0.25), straight_tube({0, 0.5}, {1, 0.5}, 0.25)));
}

TEST(TubesIntersect, GridOracle) {
  Rng rng(3);
  const std::size_t g = 2000;
  for (int trial = 0; trial < 10; ++trial) {
    const Point a0 = random_point(3, rng), a1 = random_point(3, rng);
    const Point b0 = random_point(3, rng), b1 = random_point(3, rng);
    const double exact = segment_segment_distance(a0, a1, b0, b1);
    double grid = INFINITY;
    Point p(3), q(3);
    for (std::size_t i = 0; i <= g; ++i) {
      const double s = static_cast<double>(i) / g;
      for (int k = 0; k < 3; ++k) p[k] = a0[k] + s * (a1[k] - a0[k]);
      for (std::size_t j = 0; j <= g; ++j) {
        const double t = static_cast<double>(j) / g;
        for (int k = 0; k < 3; ++k) q[k] = b0[k] + t * (b1[k] - b0[k]);
        grid = std::min(grid, distance(p, q));
      }
    }
    const double h = (distance(a0, a1) + distance(b0, b1)) / g;
    EXPECT_LE(exact, grid + 1e-12);
    EXPECT_GE(exact, grid - h);
    // pick delta away from the decision boundary and compare decisions
    for (double delta : {0.3 * exact, 0.7 * exact}) {
      if (delta <= 0.0) continue;
      const bool oracle = grid <= 2 * delta;
      EXPECT_EQ(tubes_intersect(straight_tube(a0, a1, delta), straight_tube(b0, b1, delta)), oracle);
    }
  }
}

TEST(GrainDecompose, SeparatedClusters) {
  const double delta = 0.1;
  std::vector<Tube> t;
  for (int i = 0; i < 3; ++i) t.push_back(straight_tube({0.01 * i, 0}, {0.01 * i, 1}, delta));
  for (int i = 0; i < 3; ++i) t.push_back(straight_tube({1.0 + 0.01 * i, 0}, {1.0 + 0.01 * i, 1}, delta));
  const GrainAssignment a = grain_decompose(RepresentationField(t));
  EXPECT_EQ(a.n_grains, 2u);
  EXPECT_EQ(a.grain_of, (std::vector<std::size_t>{0, 0, 0, 1, 1, 1}));
}

TEST(GrainDecompose, Transitivity) {
  const double delta = 0.1;
  std::vector<Tube> t{straight_tube({0, 0}, {0, 1}, delta), straight_tube({0.15, 0}, {0.15, 1}, delta),
                      straight_tube({0.3, 0}, {0.3, 1}, delta)};
  ASSERT_FALSE(tubes_intersect(t[0], t[2]));
  const GrainAssignment a = grain_decompose(RepresentationField(t));
  EXPECT_EQ(a.n_grains, 1u);
}

TEST(GrainDecompose, FloodFillOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(32);
    const std::size_t d = 2 + rng.below(3);
    const double delta = rng.uniform(0.05, 0.4);
    std::vector<Tube> t;
    for (std::size_t i = 0; i < n; ++i) t.emplace_back(random_trajectory(1 + rng.below(3), d, rng, 1.5), delta);
    const RepresentationField f(t);
    const GrainAssignment a = grain_decompose(f);
    EXPECT_EQ(a.grain_of, flood_fill(f));
    EXPECT_LE(a.n_grains, n);
    EXPECT_GE(a.n_grains, 1u);
  }
}

TEST(GrainAssignment, Json) {
  GrainAssignment a = assignment_from_roots({0, 0, 2});
  const auto j = a.to_json();
  EXPECT_EQ(j["n_grains"], 2);
  EXPECT_EQ(j["grain_of"]["2"], 1);
}

TEST(ConeCount, Examples) {
  const Tensor pts = Tensor::matrix({{1, 0}, {-1, 0}, {0, 1}});
  EXPECT_EQ(cone_count(pts, Point{1, 0}, std::numbers::pi / 4), 1u);
  const Tensor same = Tensor::matrix({{0.6, 0.8}, {0.6, 0.8}});
  EXPECT_EQ(cone_count(same, Point{0.6, 0.8}, 0.01), 2u);
  EXPECT_THROW(cone_count(pts, Point{1, 0}, 0.0), std::invalid_argument);
}

TEST(ConeCount, MonotoneInAperture) {
  Rng rng(5);
  Tensor pts(Shape{200, 4});
  for (std::size_t i = 0; i < 200; ++i) {
    const auto u = sample_unit_sphere(4, rng);
    std::copy(u.begin(), u.end(), pts.row(i).begin());
  }
  const auto v = sample_unit_sphere(4, rng);
  std::size_t prev = 0;
  for (double a = 0.05; a < std::numbers::pi / 2; a += 0.05) {
    const std::size_t c = cone_count(pts, v, a);
    EXPECT_GE(c, prev);
    prev = c;
  }
}

TEST(TubeCountInRegion, BallExamples) {
  const double delta = 0.1;
  const Tube t = straight_tube({0, 0}, {1, 0}, delta);
  const RepresentationField f({t});
  EXPECT_EQ(tube_count_in_region(f, ConvexRegion::ball({0.5, 0}, 1.0 + 2 * delta)).count, 1u);
  const RegionCount thin = tube_count_in_region(f, ConvexRegion::ball({0.5, 0}, delta));
  EXPECT_EQ(thin.count, 0u);
  EXPECT_TRUE(thin.degenerate);
}

TEST(TubeCountInRegion, DenseSamplingOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const double delta = 0.1;
    std::vector<Tube> t;
    for (int i = 0; i < 15; ++i) t.emplace_back(random_trajectory(3, 3, rng, 0.5), delta);
    const RepresentationField f(t);
    const Point c = random_point(3, rng, 0.3);
    const double r = rng.uniform(0.5, 2.0);
    std::size_t oracle = 0;
    for (const auto& tube : t)
      if (dense_max_distance(tube.trajectory, c, 4000) + delta <= r) ++oracle;
    EXPECT_EQ(tube_count_in_region(f, ConvexRegion::ball(c, r)).count, oracle);
  }
}

TEST(TubeCountInRegion, ConeContainment) {
  const double delta = 0.05;
  const Tube inside = straight_tube({1.0, 0.0}, {2.0, 0.1}, delta);
  const Tube outside = straight_tube({1.0, 0.0}, {0.0, 1.0}, delta);
  const RepresentationField f({inside, outside});
  EXPECT_EQ(tube_count_in_region(f, ConvexRegion::cone({1, 0}, 0.5, 3.0)).count, 1u);
}

TEST(CollapseConstant, IdenticalTubesDominate) {
  Rng rng(7);
  const double delta = 0.05;
  std::vector<Tube> same, spread;
  for (int i = 0; i < 8; ++i) {
    same.push_back(straight_tube({0, 0}, {0.2, 0}, delta));
    spread.push_back(straight_tube({2.0 * i, 0}, {2.0 * i + 0.2, 0}, delta));
  }
  Rng a(8), b(8);
  const auto es = estimate_collapse_constant(RepresentationField(same), 64, 0.1, a);
  const auto ep = estimate_collapse_constant(RepresentationField(spread), 64, 0.1, b);
  EXPECT_GE(es.estimate, ep.estimate);
  ASSERT_TRUE(es.argmax.has_value());
}

TEST(CollapseConstant, BoundedByExhaustiveOracle) {
  Rng rng(9);
  const double delta = 0.1, eps = 0.1;
  std::vector<Tube> t;
  for (int i = 0; i < 12; ++i) t.emplace_back(random_trajectory(2, 3, rng, 0.6), delta);
  const RepresentationField f(t);
  const double diam = field_diameter(f);
  // For an anchored centre the ratio count / r^d peaks where a tube just fits,
  // so the supremum is attained on the finite set of fit radii.
  double best = -INFINITY;
  for (const auto& anchor : t)
    for (const auto& c : anchor.trajectory.vertices()) {
      std::vector<double> radii{2 * delta};
      for (const auto& tube : t) {
        double m = 0.0;
        for (const auto& v : tube.trajectory.vertices()) m = std::max(m, distance(v, c));
        radii.push_back(std::clamp(m + delta, 2 * delta, diam + 2 * delta));
      }
      for (double r : radii) {
        const ConvexRegion w = ConvexRegion::ball(c, r);
        best = std::max(best, log_collapse_ratio(tube_count_in_region(f, w).count, w, delta, f.size(), eps));
      }
    }
  const auto est = estimate_collapse_constant(f, 500, eps, rng);
  EXPECT_LE(est.log_estimate, best + 1e-12);
  EXPECT_GT(est.log_estimate, -INFINITY);
}

TEST(HeadCountVariance, Examples) {
  const double delta = 0.1;
  const ConvexRegion w = ConvexRegion::ball({0, 0}, 1.0);
  const Tube in = straight_tube({0, 0}, {0.1, 0}, delta);
  const Tube out = straight_tube({5, 0}, {5.1, 0}, delta);
  const RepresentationField h0({out, out}), h1({in, in});
  EXPECT_DOUBLE_EQ(head_count_variance({h0, h1}, w), 1.0);
  EXPECT_EQ(head_count_variance({h1, h1, h1}, w), 0.0);
  const RepresentationField one({in});
  EXPECT_EQ(head_count_variance({one, one, one, one}, w), 0.0);
  EXPECT_THROW(head_count_variance({h0}, w), InputError);
}

TEST(Lipschitz, ZeroAndLinearMaps) {
  Rng rng(10);
  Tensor base(Shape{4, 3});
  for (auto& v : base.values()) v = rng.normal();
  const auto zero = estimate_lipschitz([](const Tensor& z) { return Tensor(z.shape(), 0.0); }, base, 8, rng);
  EXPECT_EQ(zero.lambda, 0.0);
  EXPECT_EQ(zero.pairs, 24u);
  const auto two = estimate_lipschitz([](const Tensor& z) { return 2.0 * z; }, base, 8, rng);
  EXPECT_NEAR(two.lambda, 2.0, 1e-9);
}

TEST(Lipschitz, ChainBound) {
  EXPECT_EQ(lipschitz_chain_bound({0.0, 0.0}, 3.0), 3.0);
  EXPECT_EQ(lipschitz_chain_bound({1.0, 1.0}, 2.0), 8.0);
  EXPECT_EQ(lipschitz_chain_bound({}, 1.5), 1.5);
}

TEST(GrainSubspaces, LineAndSpan) {
  Tensor line = Tensor::matrix({{1, 2, 0}, {-2, -4, 0}, {0.5, 1, 0}});
  GrainAssignment a = assignment_from_roots({0, 0, 0});
  const auto s = grain_subspaces(line, a, 1);
  ASSERT_EQ(s.size(), 1u);
  const double n = std::sqrt(5.0);
  EXPECT_NEAR(std::abs(s[0].basis(0, 0)), 1.0 / n, 1e-12);
  EXPECT_NEAR(std::abs(s[0].basis(1, 0)), 2.0 / n, 1e-12);
  EXPECT_FALSE(s[0].rank_deficient);

  Rng rng(11);
  const Tensor q = orthonormal_columns(6, 3, rng);
  const Tensor states = transpose(q);
  const auto s3 = grain_subspaces(states, a, 3);
  const Tensor p1 = matmul_nt(q, q), p2 = matmul_nt(s3[0].basis, s3[0].basis);
  EXPECT_LT(max_abs_diff(p1, p2), 1e-8);
}

TEST(GrainSubspaces, DuplicatesFlagged) {
  const Tensor dup = Tensor::matrix({{1, 0, 0}, {1, 0, 0}});
  const auto s = grain_subspaces(dup, assignment_from_roots({0, 0}), 2);
  EXPECT_TRUE(s[0].rank_deficient);
  EXPECT_EQ(s[0].basis.cols(), 1u);
}

TEST(ProjectorOverlap, Examples) {
  const Tensor e1 = Tensor::matrix({{1}, {0}, {0}}), e2 = Tensor::matrix({{0}, {1}, {0}});
  EXPECT_EQ(projector_overlap(e1, e2), 0.0);
  EXPECT_NEAR(projector_overlap(e1, e1), 1.0, 1e-15);
}

TEST(ProjectorOverlap, PowerIterationOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor up = orthonormal_columns(8, 3, rng), uq = orthonormal_columns(8, 2, rng);
    // power iteration on M = P_q P_p P_q, whose top eigenvalue is ||P_p P_q||^2
    const Tensor pp = matmul_nt(up, up), pq = matmul_nt(uq, uq);
    const Tensor m = matmul(pq, matmul(pp, pq));
    std::vector<double> x = random_point(8, rng);
    double lam = 0.0;
    for (int it = 0; it < 2000; ++it) {
      std::vector<double> y(8, 0.0);
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) y[i] += m(i, j) * x[j];
      lam = norm2(y);
      for (auto& v : y) v /= lam;
      x = y;
    }
    EXPECT_NEAR(projector_overlap(up, uq), std::sqrt(lam), 1e-8);
  }
}

TEST(ProbeInterference, OwnGrainOnly) {
  Rng rng(13);
  const Tensor u0 = orthonormal_columns(6, 2, rng), u1 = orthonormal_columns(6, 2, rng);
  const Point w = project(u0, random_point(6, rng));
  const Point x0 = project(u0, random_point(6, rng));
  const auto r = probe_interference(w, 0, {u0, u1}, {x0, Point(6, 0.0)});
  EXPECT_EQ(r.interference, 0.0);
  EXPECT_TRUE(r.holds);
}

TEST(ProbeInterference, OrthogonalSubspaces) {
  Tensor u0(Shape{4, 2}), u1(Shape{4, 2});
  u0(0, 0) = u0(1, 1) = 1.0;
  u1(2, 0) = u1(3, 1) = 1.0;
  const auto r = probe_interference(Point{1, 2, 0, 0}, 0, {u0, u1}, {Point{3, 1, 0, 0}, Point{0, 0, 5, 7}});
  EXPECT_EQ(r.interference, 0.0);
  EXPECT_EQ(r.bound, 0.0);
  EXPECT_EQ(r.response, 5.0);
}

TEST(ProbeInterference, BoundAndDirectComputation) {
  Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor u0 = orthonormal_columns(5, 2, rng), u1 = orthonormal_columns(5, 2, rng);
    const Point w = project(u0, random_point(5, rng));
    const Point x0 = project(u0, random_point(5, rng)), x1 = project(u1, random_point(5, rng));
    const auto r = probe_interference(w, 0, {u0, u1}, {x0, x1});
    double direct = 0.0;
    for (std::size_t i = 0; i < 5; ++i) direct += w[i] * x1[i];
    EXPECT_NEAR(r.interference, direct, 1e-12);
    EXPECT_TRUE(r.holds);
    EXPECT_LE(std::abs(r.interference), r.bound + 1e-12);
  }
}

TEST(ProbeInterference, RejectsComponentOutsideSubspace) {
  Tensor u0(Shape{3, 1}), u1(Shape{3, 1});
  u0(0, 0) = 1.0;
  u1(1, 0) = 1.0;
  EXPECT_THROW(probe_interference(Point{1, 0, 0}, 0, {u0, u1}, {Point{1, 0, 0}, Point{0, 0, 1}}), InputError);
}
