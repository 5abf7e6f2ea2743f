#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "velokit/dynamics.hpp"
#include "velokit/rng.hpp"

using namespace velokit;

namespace {

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

}  // namespace

TEST_CASE("on-stage: initial condition and steady state") {
  GeneKineticsd k{20.0, 1.0, 1.5, 100.0};
  StateUSd init{3.0, 7.0};
  auto at0 = solve_on_stage(0.0, k, init);
  CHECK(at0.u == init.u);
  CHECK(at0.s == init.s);

  auto late = solve_on_stage(90.0, k, init);
  CHECK(late.u == doctest::Approx(k.alpha_on / k.beta).epsilon(1e-12));
  CHECK(late.s == doctest::Approx(k.alpha_on / k.gamma).epsilon(1e-12));
}

TEST_CASE("on-stage matches the ODE integrator at a frozen point") {
  // alpha=20, beta=1, gamma=1.5, init (0,0), t=1; reference from RK45 at
  // tolerance 1e-12.
  GeneKineticsd k{20.0, 1.0, 1.5, 1e9};
  auto got = solve_on_stage(1.0, k, StateUSd{0.0, 0.0});
  CHECK(rel_err(got.u, 12.642411176571) < 1e-8);
  CHECK(rel_err(got.s, 4.5682932904346) < 1e-8);
}

TEST_CASE("off-stage: continuity at the switch and decay to zero") {
  GeneKineticsd k{0.0, 1.0, 1.6, 2.5};
  StateUSd sw{5.0, 8.0};
  auto at_switch = solve_off_stage(k.t_switch, k, sw);
  CHECK(at_switch.u == sw.u);
  CHECK(at_switch.s == sw.s);

  auto late = solve_off_stage(k.t_switch + 200.0, k, sw);
  CHECK(std::abs(late.u) < 1e-12);
  CHECK(std::abs(late.s) < 1e-12);
}

TEST_CASE("off-stage matches the ODE integrator at a frozen point") {
  // beta=1, gamma=1.6, switch state (5, 8), t - t_s = 0.7; RK45 reference.
  GeneKineticsd k{0.0, 1.0, 1.6, 1.0};
  auto got = solve_off_stage(1.7, k, StateUSd{5.0, 8.0});
  CHECK(rel_err(got.u, 2.48292651895756) < 1e-8);
  CHECK(rel_err(got.s, 4.02945093338787) < 1e-8);
}

TEST_CASE("trajectory dispatches across the switch") {
  GeneKineticsd k{15.0, 0.8, 1.1, 2.0};
  StateUSd init{1.0, 0.5};

  auto on = trajectory(k, init, 1.3);
  auto on_ref = solve_on_stage(1.3, k, init);
  CHECK(on.u == on_ref.u);
  CHECK(on.s == on_ref.s);

  auto off = trajectory(k, init, 3.4);
  auto sw = solve_on_stage(k.t_switch, k, init);
  auto off_ref = solve_off_stage(3.4, k, sw);
  CHECK(off.u == off_ref.u);
  CHECK(off.s == off_ref.s);
}

TEST_CASE("continuity at t_switch to 1e-12") {
  CounterRng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    GeneKineticsd k{rng.uniform(1.0, 30.0), rng.uniform(0.3, 3.0),
                    rng.uniform(0.3, 3.0), rng.uniform(0.5, 4.0)};
    StateUSd init{rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0)};
    auto left = solve_on_stage(k.t_switch, k, init);
    auto right = solve_off_stage(k.t_switch, k, left);
    CHECK(std::abs(left.u - right.u) <= 1e-12 * (1.0 + std::abs(left.u)));
    CHECK(std::abs(left.s - right.s) <= 1e-12 * (1.0 + std::abs(left.s)));
  }
}

TEST_CASE("scale invariance: (rates/kappa, kappa t_s) at kappa t") {
  CounterRng rng(7);
  const double kappas[3] = {0.25, 1.7, 9.0};
  for (int trial = 0; trial < 25; ++trial) {
    GeneKineticsd k{rng.uniform(0.5, 25.0), rng.uniform(0.2, 2.5),
                    rng.uniform(0.2, 2.5), rng.uniform(0.5, 5.0)};
    StateUSd init{rng.uniform(0.0, 10.0), rng.uniform(0.0, 10.0)};
    const double t = rng.uniform(0.0, 8.0);
    auto base = trajectory(k, init, t);
    for (double kappa : kappas) {
      GeneKineticsd ks{k.alpha_on / kappa, k.beta / kappa, k.gamma / kappa,
                       kappa * k.t_switch};
      auto scaled = trajectory(ks, init, kappa * t);
      CHECK(std::abs(scaled.u - base.u) <= 1e-10 * (1.0 + std::abs(base.u)));
      CHECK(std::abs(scaled.s - base.s) <= 1e-10 * (1.0 + std::abs(base.s)));
    }
  }
}

TEST_CASE("agreement with the ODE oracle over random draws") {
  CounterRng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    GeneKineticsd k{rng.uniform(0.5, 30.0), rng.uniform(0.2, 3.0),
                    rng.uniform(0.2, 3.0), rng.uniform(0.3, 5.0)};
    StateUSd init{rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0)};
    const double t = rng.uniform(0.0, 10.0);
    auto got = trajectory(k, init, t);
    auto ref = oracles::integrate_trajectory(k, init, t);
    CHECK(rel_err(got.u, ref.u) < 1e-8);
    CHECK(rel_err(got.s, ref.s) < 1e-8);
  }
}

TEST_CASE("degenerate branch is consistent as gamma -> beta") {
  GeneKineticsd base{12.0, 1.0, 1.0, 3.0};
  StateUSd init{0.0, 0.0};
  for (double t : {0.4, 1.7, 2.9, 4.8}) {
    auto even = trajectory(base, init, t);
    for (double shift : {1e-9, -1e-9}) {
      GeneKineticsd near = base;
      near.gamma = base.beta + shift;
      auto got = trajectory(near, init, t);
      CHECK(std::abs(got.u - even.u) <= 1e-6 * (1.0 + std::abs(even.u)));
      CHECK(std::abs(got.s - even.s) <= 1e-6 * (1.0 + std::abs(even.s)));
    }
  }
}

TEST_CASE("domain and validation errors") {
  GeneKineticsd k{20.0, 1.0, 1.5, 2.0};
  StateUSd init{0.0, 0.0};
  CHECK_THROWS_AS(solve_on_stage(-0.1, k, init), std::domain_error);
  CHECK_THROWS_AS(trajectory(k, init, -1.0), std::domain_error);
  CHECK_THROWS_AS(solve_off_stage(1.9, k, init), std::domain_error);

  GeneKineticsd bad{20.0, 0.0, 1.5, 2.0};
  CHECK_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("velocity nullcline, arithmetic, and steady state") {
  GeneKineticsd k{0.0, 1.0, 1.5, 1.0};
  CHECK(velocity(StateUSd{1.5, 1.0}, k) == doctest::Approx(0.0));
  CHECK(velocity(StateUSd{10.0, 4.0}, k) == doctest::Approx(4.0));

  GeneKineticsd k2{18.0, 1.2, 0.9, 1.0};
  StateUSd steady{k2.alpha_on / k2.beta, k2.alpha_on / k2.gamma};
  CHECK(std::abs(velocity(steady, k2)) < 1e-12);
}
