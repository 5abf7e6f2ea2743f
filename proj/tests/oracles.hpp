#pragma once

// Test-only reference implementations, kept independent of the library
// code paths they are used to check.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "velokit/dynamics.hpp"
#include "velokit/rng.hpp"

namespace oracles {

// Adaptive Dormand-Prince RK45 for y' = f(t, y), y in R^2.
using Vec2 = std::array<double, 2>;
using Rhs2 = std::function<Vec2(double, const Vec2&)>;

inline Vec2 rk45(const Rhs2& f, Vec2 y, double t0, double t1,
                 double tol = 1e-12) {
  if (t1 < t0) throw std::invalid_argument("rk45: t1 < t0");
  // Dormand-Prince coefficients.
  static const double c[7] = {0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1, 1};
  static const double a[7][6] = {
      {},
      {1.0 / 5},
      {3.0 / 40, 9.0 / 40},
      {44.0 / 45, -56.0 / 15, 32.0 / 9},
      {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
      {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176,
       -5103.0 / 18656},
      {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
  static const double b5[7] = {35.0 / 384,      0,           500.0 / 1113,
                               125.0 / 192,     -2187.0 / 6784, 11.0 / 84, 0};
  static const double b4[7] = {5179.0 / 57600,  0,           7571.0 / 16695,
                               393.0 / 640,     -92097.0 / 339200,
                               187.0 / 2100,    1.0 / 40};

  double t = t0;
  double h = (t1 - t0) > 0 ? (t1 - t0) / 16.0 : 0.0;
  if (h == 0.0) return y;
  int guard = 0;
  while (t < t1) {
    if (++guard > 2000000) throw std::runtime_error("rk45: too many steps");
    if (t + h > t1) h = t1 - t;
    Vec2 k[7];
    for (int i = 0; i < 7; ++i) {
      Vec2 yi = y;
      for (int j = 0; j < i; ++j) {
        yi[0] += h * a[i][j] * k[j][0];
        yi[1] += h * a[i][j] * k[j][1];
      }
      k[i] = f(t + c[i] * h, yi);
    }
    Vec2 y5 = y, y4 = y;
    for (int i = 0; i < 7; ++i) {
      y5[0] += h * b5[i] * k[i][0];
      y5[1] += h * b5[i] * k[i][1];
      y4[0] += h * b4[i] * k[i][0];
      y4[1] += h * b4[i] * k[i][1];
    }
    const double sc0 = tol + tol * std::abs(y5[0]);
    const double sc1 = tol + tol * std::abs(y5[1]);
    const double err = std::sqrt(0.5 * (std::pow((y5[0] - y4[0]) / sc0, 2) +
                                        std::pow((y5[1] - y4[1]) / sc1, 2)));
    if (err <= 1.0) {
      t += h;
      y = y5;
    }
    const double fac = std::clamp(0.9 * std::pow(err > 0 ? err : 1e-16, -0.2),
                                  0.2, 5.0);
    h *= fac;
    if (h < 1e-15 * (t1 - t0)) throw std::runtime_error("rk45: step underflow");
  }
  return y;
}

// Numerically integrated two-stage splicing trajectory; the independent
// check for the closed forms in velokit/dynamics.hpp.
inline velokit::StateUSd integrate_trajectory(const velokit::GeneKineticsd& k,
                                              const velokit::StateUSd& init,
                                              double t, double tol = 1e-12) {
  auto rhs_on = [&](double, const Vec2& y) -> Vec2 {
    return {k.alpha_on - k.beta * y[0], k.beta * y[0] - k.gamma * y[1]};
  };
  auto rhs_off = [&](double, const Vec2& y) -> Vec2 {
    return {-k.beta * y[0], k.beta * y[0] - k.gamma * y[1]};
  };
  Vec2 y{init.u, init.s};
  if (t <= k.t_switch) {
    y = rk45(rhs_on, y, 0.0, t, tol);
  } else {
    y = rk45(rhs_on, y, 0.0, k.t_switch, tol);
    y = rk45(rhs_off, y, k.t_switch, t, tol);
  }
  return {y[0], y[1]};
}

// Spearman rank correlation (average ranks over ties).
inline double spearman(const std::vector<double>& x,
                       const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (i + j) + 1.0;
      for (std::size_t t2 = i; t2 <= j; ++t2) r[idx[t2]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace oracles
