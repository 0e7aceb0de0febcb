// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reproducible random numbers. The generator is xoshiro256** (Blackman and
// Vigna) seeded through SplitMix64; both are fixed here so a seed yields the
// same stream on every platform. Distributions are implemented locally for the
// same reason: the std:: distributions are not specified bit-exactly.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "geolan/error.hpp"

namespace geolan {

namespace detail {

inline constexpr std::uint64_t kSplitMixGamma = 0x9E3779B97F4A7C15ULL;

inline constexpr std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += kSplitMixGamma);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = detail::splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  /// Seed of an independent child stream; stable for a given (seed, stream).
  std::uint64_t derive_seed(std::uint64_t stream) const {
    std::uint64_t sm = seed_ ^ (stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL);
    detail::splitmix64(sm);
    return detail::splitmix64(sm);
  }

  Rng derive(std::uint64_t stream) const { return Rng(derive_seed(stream)); }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n); Lemire-style rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    detail::require(n > 0, "Rng::below: empty range");
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Uniform sample from S^{d-1}: normalized standard Gaussian vector.
inline std::vector<double> sample_unit_sphere(std::size_t d, Rng& rng) {
  detail::require(d >= 1, "sample_unit_sphere: dimension must be >= 1");
  std::vector<double> u(d);
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (auto& x : u) {
      x = rng.normal();
      n2 += x * x;
    }
  } while (n2 < 1e-200);
  if (d == 1) {
    u[0] = u[0] < 0.0 ? -1.0 : 1.0;
    return u;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& x : u) x *= inv;
  return u;
}

}  // namespace geolan
