#pragma once

#include <cmath>
#include <utility>

#include "velokit/errors.hpp"

namespace velokit {

namespace detail {

template <typename F>
double simpson_step(F& f, double a, double fa, double b, double fb, double fm,
                    double whole, double tol, int depth, int force) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (force <= 0 && (depth <= 0 || std::abs(delta) <= 15.0 * tol)) {
    return left + right + delta / 15.0;
  }
  return simpson_step(f, a, fa, m, fm, flm, left, 0.5 * tol, depth - 1,
                      force - 1) +
         simpson_step(f, m, fm, b, fb, frm, right, 0.5 * tol, depth - 1,
                      force - 1);
}

}  // namespace detail

// Adaptive Simpson with Richardson correction. The first `min_depth` levels
// always subdivide, which guards against integrands whose symmetry zeros
// land exactly on the initial sample points.
template <typename F>
double integrate(F f, double a, double b, double tol = 1e-12,
                 int max_depth = 60, int min_depth = 6) {
  if (!(a <= b)) throw config_error("integrate: bad interval");
  if (a == b) return 0.0;
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  if (!std::isfinite(fa) || !std::isfinite(fb) || !std::isfinite(fm)) {
    throw numeric_error("integrate: non-finite integrand");
  }
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return detail::simpson_step(f, a, fa, b, fb, fm, whole, tol, max_depth,
                              min_depth);
}

}  // namespace velokit
