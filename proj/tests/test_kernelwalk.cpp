#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "velokit/kernelwalk.hpp"

using namespace velokit;

namespace {

KernelSpec spec3(double eps) {
  KernelSpec s;
  s.epsilon = eps;
  s.d = 3;
  return s;
}

// Monte Carlo value of integral over R^d of h(|z|^2) g(z1/|z|) (power = 0)
// or |z| h(|z|^2) (z1/|z|) g(z1/|z|) (power = 1), on a truncation box.
double mc_moment(int d, int power, KernelFn g, KernelFn h, long samples,
                 std::uint64_t seed) {
  CounterRng rng(seed);
  const double R = 6.0;
  double acc = 0.0;
  Eigen::VectorXd z(d);
  for (long i = 0; i < samples; ++i) {
    for (int k = 0; k < d; ++k) z[k] = rng.uniform(-R, R);
    const double r2 = z.squaredNorm();
    if (r2 == 0.0) continue;
    const double c = z[0] / std::sqrt(r2);
    double val = h(r2) * g(c);
    if (power == 1) val *= std::sqrt(r2) * c;
    acc += val;
  }
  return acc / static_cast<double>(samples) * std::pow(2.0 * R, d);
}

}  // namespace

TEST_CASE("two-point directionality") {
  Eigen::MatrixXd pts(2, 2), vel(2, 2);
  pts << 0, 0, 1, 0;
  vel << 1, 0, 1, 0;  // both velocities point from cell 1 to cell 2
  auto graph = build_graph(pts, vel, spec3(0.5));
  CHECK(graph.P(0, 1) > graph.P(1, 0));
  CHECK(graph.P.row(0).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(graph.P.row(1).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("constant g gives a symmetric-support diffusion kernel") {
  CounterRng rng(5);
  Eigen::MatrixXd pts(6, 3), vel(6, 3);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 3; ++j) {
      pts(i, j) = rng.uniform(-1, 1);
      vel(i, j) = rng.normal();
    }
  }
  KernelSpec s = spec3(0.3);
  s.g_name = "one";
  auto graph = build_graph(pts, vel, s);
  for (int i = 0; i < 6; ++i) {
    CHECK(std::abs(graph.P.row(i).sum() - 1.0) <= 1e-12);
    for (int j = 0; j < 6; ++j) {
      CHECK((graph.P(i, j) > 0) == (graph.P(j, i) > 0));
      CHECK(graph.P(i, j) >= 0.0);
    }
  }
}

TEST_CASE("five-point cloud matches the per-entry scalar formula") {
  CounterRng rng(7);
  const int n = 5, d = 3;
  Eigen::MatrixXd pts(n, d), vel(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      pts(i, j) = rng.uniform(-2, 2);
      vel(i, j) = rng.normal();
    }
  }
  const double eps = 0.7;
  auto graph = build_graph(pts, vel, spec3(eps));

  for (int i = 0; i < n; ++i) {
    // Scalar oracle, written in plain loops.
    Eigen::VectorXd kern(n);
    for (int j = 0; j < n; ++j) {
      double cosv = 0.0;
      const Eigen::VectorXd delta = pts.row(j) - pts.row(i);
      if (i != j) {
        cosv = delta.dot(vel.row(i).transpose()) /
               (delta.norm() * vel.row(i).norm());
      }
      kern[j] = std::exp(-delta.squaredNorm() / eps) * std::exp(cosv);
    }
    kern /= kern.sum();
    for (int j = 0; j < n; ++j) {
      CHECK(std::abs(graph.P(i, j) - kern[j]) <= 1e-13);
    }
  }
}

TEST_CASE("moment constants: symmetry zero, analytic d=2, MC check d=3") {
  SUBCASE("constant g kills m1 by symmetry") {
    KernelSpec s = spec3(1.0);
    s.g_name = "one";
    for (int d : {2, 3, 5}) {
      s.d = d;
      auto mc = moment_constants(s);
      CHECK(std::abs(mc.m1) < 1e-12);
      CHECK(mc.m0 > 0.0);
    }
  }
  SUBCASE("d=2, h=exp-neg, g=1: m0 equals the Gaussian integral pi") {
    KernelSpec s = spec3(1.0);
    s.d = 2;
    s.g_name = "one";
    auto mc = moment_constants(s);
    CHECK(mc.m0 == doctest::Approx(M_PI).epsilon(1e-10));
    // Cross-check with plain 2-D Monte Carlo integration.
    const double ref = mc_moment(2, 0, velocity_kernel_fn("one"),
                                 diffusion_kernel_fn("exp-neg"), 4000000, 9);
    CHECK(std::abs(mc.m0 - ref) <= 0.005 * mc.m0);
  }
  SUBCASE("d=3 defaults match Monte Carlo to 0.5%") {
    KernelSpec s = spec3(1.0);
    auto mc = moment_constants(s);
    const KernelFn g = velocity_kernel_fn("exp");
    const KernelFn h = diffusion_kernel_fn("exp-neg");
    const double m0_ref = mc_moment(3, 0, g, h, 20000000, 11);
    const double m1_ref = mc_moment(3, 1, g, h, 20000000, 13);
    CHECK(std::abs(mc.m0 - m0_ref) <= 0.005 * std::abs(m0_ref));
    CHECK(std::abs(mc.m1 - m1_ref) <= 0.005 * std::abs(m1_ref));
    CHECK(mc.m0_sq > 0.0);
  }
  SUBCASE("d < 2 unsupported") {
    KernelSpec s = spec3(1.0);
    s.d = 1;
    CHECK_THROWS_AS(moment_constants(s), config_error);
  }
}

TEST_CASE("discrete generator: constants, hand oracle, scaling") {
  SUBCASE("constants are annihilated exactly") {
    CounterRng rng(15);
    Eigen::MatrixXd pts(8, 3), vel(8, 3);
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 3; ++j) {
        pts(i, j) = rng.uniform(-1, 1);
        vel(i, j) = rng.normal();
      }
    }
    auto graph = build_graph(pts, vel, spec3(0.4));
    Eigen::VectorXd c = Eigen::VectorXd::Constant(8, 3.7);
    Eigen::VectorXd lf = discrete_generator(graph, c);
    CHECK(lf.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("linear f on three collinear points") {
    // Points at x = 0, 1, 2 on a line in the plane; v = +x direction.
    Eigen::MatrixXd pts(3, 2), vel(3, 2);
    pts << 0, 0, 1, 0, 2, 0;
    vel << 1, 0, 1, 0, 1, 0;
    const double eps = 1.0;
    auto graph = build_graph(pts, vel, spec3(eps));
    Eigen::VectorXd f(3);
    f << 0, 1, 2;  // f = x
    Eigen::VectorXd lf = discrete_generator(graph, f);
    // Hand computation for the middle point: neighbors at distance 1 ahead
    // and behind, self term h(0)g(0) = 1.
    const double kf = std::exp(-1.0) * std::exp(1.0);   // forward: cos=+1
    const double kb = std::exp(-1.0) * std::exp(-1.0);  // backward: cos=-1
    const double expected = (kf - kb) / (1.0 + kf + kb);
    CHECK(lf[1] == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("output scales as 1/sqrt(eps) at fixed P") {
    Eigen::MatrixXd pts(4, 2), vel(4, 2);
    CounterRng rng(21);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 2; ++j) {
        pts(i, j) = rng.uniform(-1, 1);
        vel(i, j) = 1.0;
      }
    }
    auto graph = build_graph(pts, vel, spec3(0.5));
    Eigen::VectorXd f(4);
    f << 0.3, -1.2, 0.8, 2.0;
    auto a = discrete_generator(graph.P, f, f, 0.25);
    auto b = discrete_generator(graph.P, f, f, 1.0);
    CHECK((a - 2.0 * b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("continuum generator directions") {
  MomentConstants mc{2.0, 0.5, 0.0, 0.0};
  Eigen::VectorXd v(3), grad(3);
  v << 1, 0, 0;

  grad << 0, 1, 0;  // orthogonal
  CHECK(continuum_generator(v, grad, mc) == 0.0);

  grad << 1, 1, 1;  // f1 with unit x-velocity
  CHECK(continuum_generator(v, grad, mc) == doctest::Approx(0.25));

  // f2 = x3^2 at x3 = 2 with v = e3: gradient (0,0,4).
  Eigen::VectorXd v3(3), g3(3);
  v3 << 0, 0, 1;
  g3 << 0, 0, 4;
  CHECK(continuum_generator(v3, g3, mc) == doctest::Approx(4.0 * 0.25));
}

TEST_CASE("zero-velocity handling") {
  Eigen::MatrixXd pts(3, 2), vel(3, 2);
  pts << 0, 0, 1, 0, 0, 1;
  vel << 1, 0, 0, 0, 1, 1;  // second row is zero
  CHECK_THROWS_AS(build_graph(pts, vel, spec3(0.5)), numeric_error);
  KernelSpec s = spec3(0.5);
  s.zero_velocity_fallback = true;
  auto graph = build_graph(pts, vel, s);
  CHECK(std::abs(graph.P.row(1).sum() - 1.0) <= 1e-12);
}

TEST_CASE("unknown kernel ids are config errors") {
  KernelSpec s = spec3(0.5);
  s.g_name = "tanh";
  CHECK_THROWS_AS(s.validate(), config_error);
  s.g_name = "exp";
  s.h_name = "uniform";
  CHECK_THROWS_AS(s.validate(), config_error);
}

TEST_CASE("optimal epsilon values") {
  CHECK(std::abs(std::log(optimal_epsilon(2000, 3)) - (-3.0404)) < 1e-3);
  CHECK(optimal_epsilon(2000, 3) == doctest::Approx(0.04781).epsilon(1e-3));
  CHECK(optimal_epsilon(1, 3) == 1.0);
  double prev = 0.0;
  for (int d = 2; d < 40; d += 4) {
    const double e = optimal_epsilon(1000, d);
    CHECK(e > prev);
    CHECK(e < 1.0);
    prev = e;
  }
}

TEST_CASE("bandwidth sweep on smooth-density data: U-shape and slope") {
  SweepConfig cfg;
  cfg.n = 2000;
  cfg.seed = 3;
  cfg.data = SweepData::UniformField;
  cfg.workers = 2;
  auto res = bandwidth_sweep(cfg);
  REQUIRE(res.errors.size() == 41);
  CHECK(res.n_fit >= 5);
  // Variance-dominated decay toward -3/4 (band widened by the trough
  // flattening inside the fit window at this n).
  CHECK(res.slope < -0.4);
  CHECK(res.slope > -1.2);

  // U-shape under 3-point median smoothing: decreasing to the argmin, then
  // increasing.
  const Eigen::Index m = res.errors.size();
  Eigen::VectorXd sm(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index a = std::max<Eigen::Index>(0, i - 1);
    const Eigen::Index b = std::min(m - 1, i + 1);
    std::array<double, 3> w{res.errors[a], res.errors[i], res.errors[b]};
    std::sort(w.begin(), w.end());
    sm[i] = w[1];
  }
  Eigen::Index imin = 0;
  sm.minCoeff(&imin);
  for (Eigen::Index i = 1; i <= imin; ++i) CHECK(sm[i] <= sm[i - 1] + 1e-12);
  for (Eigen::Index i = imin + 1; i < m; ++i) {
    CHECK(sm[i] >= sm[i - 1] - 1e-12);
  }
}

TEST_CASE("section-4.3 protocol sweep smoke check") {
  // Reduced grid; the full-resolution run lives in the acceptance suite.
  SweepConfig cfg;
  cfg.n = 1000;
  cfg.seed = 11;
  cfg.data = SweepData::Section43;
  cfg.eps_step = 0.008;
  cfg.workers = 2;
  auto res = bandwidth_sweep(cfg);
  CHECK(res.errors.minCoeff() > 0.0);
  CHECK(std::isfinite(res.slope));
  // The curve turns over inside the grid.
  Eigen::Index imin = 0;
  res.errors.minCoeff(&imin);
  CHECK(imin > 0);
  CHECK(imin < res.errors.size() - 1);
}
