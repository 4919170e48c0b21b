#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "gsq/matrix.hpp"

namespace gsq {

/// Seeded generator with platform-independent uniform and normal draws.
///
/// std::normal_distribution is implementation-defined, so the normal path is
/// a plain Box-Muller transform over mt19937_64 to keep datasets and
/// initializations byte-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = normal(0.0, stddev);
    return m;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gsq
