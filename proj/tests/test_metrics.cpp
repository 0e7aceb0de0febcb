#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "geolan/metrics.hpp"
#include "geolan/model.hpp"

using namespace geolan;

namespace {

Tensor random_cloud(std::size_t m, std::size_t d, Rng& rng) {
  Tensor a(Shape{m, d});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) a(i, j) = rng.normal() * (1.0 + static_cast<double>(j));
  return a;
}

// rows {+-sqrt(d) e_k}: centred covariance exactly I
Tensor isotropic_cloud(std::size_t d) {
  Tensor a(Shape{2 * d, d});
  for (std::size_t k = 0; k < d; ++k) {
    a(2 * k, k) = std::sqrt(static_cast<double>(d));
    a(2 * k + 1, k) = -std::sqrt(static_cast<double>(d));
  }
  return a;
}

Tensor line_cloud(std::size_t m, std::size_t d, Rng& rng) {
  std::vector<double> dir(d);
  for (auto& v : dir) v = rng.normal();
  Tensor a(Shape{m, d});
  for (std::size_t i = 0; i < m; ++i) {
    const double s = rng.normal();
    for (std::size_t j = 0; j < d; ++j) a(i, j) = s * dir[j];
  }
  return a;
}

Tensor random_rotation(std::size_t d, Rng& rng) {
  Tensor a(Shape{d, d});
  for (auto& v : a.values()) v = rng.normal();
  return svd(a).u;
}

// two-sided p by composite Simpson over the t density on [0, |t|]
double t_p_oracle(double t, double nu, std::size_t n = 10000000) {
  const double c = std::exp(std::lgamma((nu + 1) / 2) - std::lgamma(nu / 2)) / std::sqrt(nu * std::numbers::pi);
  auto f = [&](double x) { return c * std::pow(1.0 + x * x / nu, -(nu + 1) / 2); };
  const double b = std::abs(t), h = b / static_cast<double>(n);
  double s = f(0.0) + f(b);
  for (std::size_t i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(h * static_cast<double>(i));
  return 1.0 - 2.0 * s * h / 3.0;
}

}  // namespace

TEST(CovarianceSpectrum, IsotropicAndLine) {
  const SpectrumReport s = covariance_spectrum(isotropic_cloud(100));
  EXPECT_NEAR(s.top_k(10), 0.1, 1e-9);
  Rng rng(1);
  EXPECT_NEAR(covariance_spectrum(line_cloud(30, 5, rng)).top_k(1), 1.0, 1e-12);
  EXPECT_THROW(covariance_spectrum(Tensor(Shape{1, 3})), DegenerateInputError);
}

TEST(CovarianceSpectrum, FractionsMatchDirectSums) {
  Rng rng(2);
  const Tensor x = random_cloud(40, 6, rng);
  const SpectrumReport s = covariance_spectrum(x);
  // total variance = trace of covariance by direct summation
  double total = 0.0;
  for (std::size_t j = 0; j < 6; ++j) {
    double m = 0.0, q = 0.0;
    for (std::size_t i = 0; i < 40; ++i) m += x(i, j);
    m /= 40.0;
    for (std::size_t i = 0; i < 40; ++i) q += (x(i, j) - m) * (x(i, j) - m);
    total += q / 40.0;
  }
  EXPECT_NEAR(s.total_variance, total, 1e-10 * total);
  double cum = 0.0, prev = 0.0;
  for (std::size_t k = 1; k <= 6; ++k) {
    cum += s.eigenvalues[k - 1];
    EXPECT_NEAR(s.top_k(k), cum / total, 1e-10);
    EXPECT_GE(s.top_k(k), prev);
    prev = s.top_k(k);
  }
  for (double v : s.eigenvalues) EXPECT_GE(v, -1e-10);
}

TEST(ConeConcentration, Examples) {
  EXPECT_NEAR(cone_concentration(isotropic_cloud(100), 10), 0.1, 1e-9);
  Rng rng(3);
  EXPECT_NEAR(cone_concentration(line_cloud(20, 4, rng), 1), 1.0, 1e-12);
  const Tensor x = random_cloud(30, 5, rng);
  EXPECT_EQ(cone_concentration(x, 5), 1.0);
  EXPECT_THROW(cone_concentration(Tensor(Shape{3, 2}, 1.0), 1), DegenerateInputError);
  EXPECT_THROW(cone_concentration(x, 6), std::invalid_argument);
}

TEST(IsoScore, Endpoints) {
  EXPECT_NEAR(isoscore(isotropic_cloud(8)), 1.0, 1e-12);
  Rng rng(4);
  EXPECT_NEAR(isoscore(line_cloud(50, 6, rng)), 0.0, 1e-9);
  EXPECT_THROW(isoscore(Tensor(Shape{4, 3}, 2.0)), DegenerateInputError);
}

TEST(IsoScore, MonotoneUnderMixingTowardUniform) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> lam(6);
    for (auto& v : lam) v = rng.uniform(0.0, 1.0);
    lam[0] += 3.0;
    const double mean = sample_mean(lam);
    double prev = -1.0;
    for (double a : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      std::vector<double> mix(6);
      for (std::size_t i = 0; i < 6; ++i) mix[i] = (1 - a) * lam[i] + a * mean;
      const double s = isoscore_from_eigenvalues(mix);
      if (a < 1.0) {
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
      }
      EXPECT_GT(s, prev);
      prev = s;
    }
  }
}

TEST(IsoScore, RotationInvariant) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_cloud(50, 7, rng);
    const Tensor r = random_rotation(7, rng);
    EXPECT_NEAR(isoscore(x), isoscore(matmul(x, r)), 1e-8);
  }
}

TEST(ProbeEfficiency, Examples) {
  EXPECT_EQ(pca_probe_efficiency(isotropic_cloud(10), 0.9), 9u);
  Rng rng(7);
  EXPECT_EQ(pca_probe_efficiency(line_cloud(20, 5, rng), 0.99), 1u);
  const Tensor x = random_cloud(40, 8, rng);
  const SpectrumReport s = covariance_spectrum(x);
  for (double tau : {0.2, 0.5, 0.8, 0.95, 1.0}) {
    std::size_t k = 1;
    while (k < 8 && s.top_k(k) < tau) ++k;
    EXPECT_EQ(pca_probe_efficiency(x, tau), k) << tau;
  }
  EXPECT_THROW(pca_probe_efficiency(x, 0.0), std::invalid_argument);
}

TEST(KlDivergence, Examples) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  EXPECT_EQ(kl_divergence(p, p), 0.0);
  EXPECT_NEAR(kl_divergence(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
  EXPECT_THROW(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 0}), DegenerateInputError);
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(5), b(5);
    for (auto& v : a) v = rng.uniform(0.01, 1.0);
    for (auto& v : b) v = rng.uniform(0.01, 1.0);
    const double sa = sample_mean(a) * 5, sb = sample_mean(b) * 5;
    double direct = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      a[i] /= sa;
      b[i] /= sb;
    }
    for (std::size_t i = 0; i < 5; ++i) direct += a[i] * std::log(a[i] / b[i]);
    EXPECT_NEAR(kl_divergence(a, b), direct, 1e-12);
    EXPECT_GE(kl_divergence(a, b), 0.0);
  }
}

TEST(Stability, IdentityPerturbation) {
  Rng rng(9);
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.n_layers = 1;
  cfg.max_seq = 8;
  const Params p = init_params(cfg, rng);
  std::vector<ForwardTrace> clean;
  for (int e = 0; e < 5; ++e) {
    std::vector<std::size_t> tok(6);
    for (auto& t : tok) t = rng.below(256);
    clean.push_back(forward(p, perturb_tokens(tok, 0.0, 256, rng)));
  }
  const StabilityReport r = stability_metrics(clean, clean);
  EXPECT_EQ(r.kl_mean, 0.0);
  EXPECT_NEAR(r.cos_mean, 1.0, 1e-15);
  EXPECT_EQ(r.stability_rate, 1.0);
  EXPECT_EQ(r.stable_count, 5u);
  std::vector<ForwardTrace> fewer(clean.begin(), clean.end() - 1);
  EXPECT_THROW(stability_metrics(clean, fewer), InputError);
}

TEST(CohensD, Examples) {
  const std::vector<double> a{0, 2}, b{2, 4};
  EXPECT_NEAR(cohens_d(a, b), -std::sqrt(2.0), 1e-12);
  EXPECT_EQ(cohens_d(a, a), 0.0);
  EXPECT_THROW(cohens_d(std::vector<double>{1, 1}, std::vector<double>{2, 2}), DegenerateInputError);
}

TEST(CohensD, Properties) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(4), b(5);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal() + 1.0;
    const double d = cohens_d(a, b);
    EXPECT_NEAR(cohens_d(b, a), -d, 1e-12);
    auto shift = [](std::vector<double> x, double s, double c) {
      for (auto& v : x) v = s * v + c;
      return x;
    };
    EXPECT_NEAR(cohens_d(shift(a, 1, 7.5), shift(b, 1, 7.5)), d, 1e-10);
    EXPECT_NEAR(cohens_d(shift(a, 3.0, 0), shift(b, 3.0, 0)), d, 1e-10);
  }
}

TEST(WelchP, Examples) {
  const std::vector<double> a{1.0, 2.0, 3.5};
  EXPECT_EQ(welch_test(a, a).t, 0.0);
  EXPECT_NEAR(welch_p(a, a), 1.0, 1e-12);
  const std::vector<double> lo{0.01, -0.01, 0.005, -0.005}, hi{100.01, 99.99, 100.005, 99.995};
  EXPECT_LT(welch_p(lo, hi), 1e-6);
  EXPECT_THROW(welch_p(std::vector<double>{1, 1}, std::vector<double>{2, 2}), DegenerateInputError);
}

TEST(WelchP, ClosedFormAtTwoDegreesOfFreedom) {
  // {0,2} vs {2,4}: t = -sqrt 2, df = 2, and for df = 2 p = 1 - |t| / sqrt(2 + t^2)
  const WelchResult r = welch_test(std::vector<double>{0, 2}, std::vector<double>{2, 4});
  EXPECT_NEAR(r.t, -std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(r.df, 2.0, 1e-12);
  EXPECT_NEAR(r.p, 1.0 - std::sqrt(2.0) / 2.0, 1e-9);
}

TEST(WelchP, QuadratureOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> a(4), b(4);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = 2.0 * rng.normal() + 1.0;
    const WelchResult r = welch_test(a, b);
    EXPECT_NEAR(r.p, t_p_oracle(r.t, r.df), 1e-6);
  }
}
