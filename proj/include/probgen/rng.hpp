// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "probgen/common.hpp"

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace probgen {

/// Deterministic random stream. Normal draws use the polar Box-Muller
/// transform on raw mt19937_64 output, so sequences are identical across
/// compilers and standard libraries for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  long uniform_int(long n) {
    // 64-bit modulo; bias is negligible for the ranges used here.
    return static_cast<long>(raw() % static_cast<uint64_t>(n));
  }

  /// Standard normal (polar method, second value cached).
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    cache_ = v * f;
    has_cache_ = true;
    return u * f;
  }

  Vec normal_vec(long n) {
    Vec out(n);
    for (long i = 0; i < n; ++i) out[i] = normal();
    return out;
  }

  Mat normal_mat(long rows, long cols) {
    Mat out(rows, cols);
    for (long i = 0; i < rows; ++i)
      for (long j = 0; j < cols; ++j) out(i, j) = normal();
    return out;
  }

  /// +1/-1 with equal probability.
  double rademacher() { return (raw() & 1u) ? 1.0 : -1.0; }

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(long n) {
    std::vector<int> p(n);
    for (long i = 0; i < n; ++i) p[i] = static_cast<int>(i);
    for (long i = n - 1; i > 0; --i) std::swap(p[i], p[uniform_int(i + 1)]);
    return p;
  }

 private:
  std::mt19937_64 gen_;
  double cache_ = 0.0;
  bool has_cache_ = false;
};

/// Derive a sub-seed from a base seed and a tag path (splitmix64 mixing).
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> tags) {
  uint64_t x = base;
  auto mix = [](uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  x = mix(x);
  for (uint64_t t : tags) x = mix(x ^ t);
  return x;
}

}  // namespace probgen
