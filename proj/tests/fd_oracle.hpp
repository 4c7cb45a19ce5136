#pragma once

// Test-only central-difference oracle, independent of the analytic
// backward paths it is used to check.

#include <cmath>

namespace fd {

template <typename F>
double central_diff(F&& loss, double& slot, double h) {
  const double saved = slot;
  slot = saved + h;
  const double lp = loss();
  slot = saved - h;
  const double lm = loss();
  slot = saved;
  return (lp - lm) / (2.0 * h);
}

inline double rel_err(double a, double b) {
  const double denom = std::max(std::fabs(a), std::fabs(b));
  return denom < 1e-10 ? 0.0 : std::fabs(a - b) / denom;
}

}  // namespace fd
