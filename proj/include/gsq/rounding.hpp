#pragma once

#include <cmath>

namespace gsq {

/// Round to nearest, ties to even, independent of the FP environment.
inline double round_half_even(double x) noexcept {
  const double r = std::round(x);  // ties away from zero
  if (std::fabs(x - std::trunc(x)) == 0.5) return 2.0 * std::round(x / 2.0);
  return r;
}

}  // namespace gsq
