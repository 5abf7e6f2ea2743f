#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "velokit/errors.hpp"

// Closed-form solutions of the two-stage splicing ODE
//
//   du/dt = alpha(t) - beta u,   ds/dt = beta u - gamma s,
//
// where alpha(t) equals alpha_on until t_switch and 0 afterwards.
// All functions are pure and safe to call concurrently.

namespace velokit {

template <typename Scalar = double>
struct GeneKinetics {
  Scalar alpha_on{};  // transcription rate while the gene is on
  Scalar beta{};      // splicing rate
  Scalar gamma{};     // degradation rate
  Scalar t_switch = std::numeric_limits<Scalar>::infinity();

  void validate() const {
    if (!(alpha_on >= Scalar(0)) || !(beta > Scalar(0)) ||
        !(gamma > Scalar(0)) || !(t_switch > Scalar(0))) {
      throw config_error(
          "GeneKinetics: need alpha_on >= 0, beta > 0, gamma > 0, "
          "t_switch > 0");
    }
  }
};

template <typename Scalar = double>
struct StateUS {
  Scalar u{};
  Scalar s{};
};

using GeneKineticsd = GeneKinetics<double>;
using StateUSd = StateUS<double>;

// Below this gap the two-exponential solution cancels catastrophically and
// the gamma == beta limit form takes over.
template <typename Scalar>
Scalar degenerate_gap(Scalar beta, Scalar gamma) {
  return Scalar(1e-7) * std::max(beta, gamma);
}

// (e^{-beta t} - e^{-gamma t}) / (gamma - beta), continued by t e^{-beta t}
// across gamma == beta.
template <typename Scalar>
Scalar decay_difference(Scalar beta, Scalar gamma, Scalar t) {
  if (std::abs(gamma - beta) <= degenerate_gap(beta, gamma)) {
    return t * std::exp(-beta * t);
  }
  return (std::exp(-beta * t) - std::exp(-gamma * t)) / (gamma - beta);
}

// On-stage solution at time t from init, valid while the gene is on.
template <typename Scalar>
StateUS<Scalar> solve_on_stage(Scalar t, const GeneKinetics<Scalar>& k,
                               const StateUS<Scalar>& init) {
  if (!(t >= Scalar(0))) throw std::domain_error("solve_on_stage: t < 0");
  const Scalar eb = std::exp(-k.beta * t);
  const Scalar eg = std::exp(-k.gamma * t);
  StateUS<Scalar> out;
  out.u = k.alpha_on / k.beta + (init.u - k.alpha_on / k.beta) * eb;
  out.s = init.s * eg + (k.alpha_on / k.gamma) * (Scalar(1) - eg) +
          (k.beta * init.u - k.alpha_on) * decay_difference(k.beta, k.gamma, t);
  return out;
}

// Off-stage solution at time t >= t_switch given the state at the switch.
template <typename Scalar>
StateUS<Scalar> solve_off_stage(Scalar t, const GeneKinetics<Scalar>& k,
                                const StateUS<Scalar>& switch_state) {
  if (!(t >= k.t_switch)) {
    throw std::domain_error("solve_off_stage: t < t_switch");
  }
  const Scalar tau = t - k.t_switch;
  StateUS<Scalar> out;
  out.u = switch_state.u * std::exp(-k.beta * tau);
  out.s = switch_state.s * std::exp(-k.gamma * tau) +
          k.beta * switch_state.u * decay_difference(k.beta, k.gamma, tau);
  return out;
}

// Full two-stage trajectory from init at t = 0; continuous across t_switch.
template <typename Scalar>
StateUS<Scalar> trajectory(const GeneKinetics<Scalar>& k,
                           const StateUS<Scalar>& init, Scalar t) {
  if (!(t >= Scalar(0))) throw std::domain_error("trajectory: t < 0");
  if (t <= k.t_switch) return solve_on_stage(t, k, init);
  const StateUS<Scalar> at_switch = solve_on_stage(k.t_switch, k, init);
  return solve_off_stage(t, k, at_switch);
}

// Spliced velocity ds/dt = beta u - gamma s.
template <typename Scalar>
Scalar velocity(const StateUS<Scalar>& state, const GeneKinetics<Scalar>& k) {
  return k.beta * state.u - k.gamma * state.s;
}

}  // namespace velokit
