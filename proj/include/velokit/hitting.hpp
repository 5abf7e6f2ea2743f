#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "velokit/errors.hpp"
#include "velokit/kernelwalk.hpp"

// Mean first hitting times k_i^A of a target set A, with optional taboo set
// H (states the walk must avoid). The fixed-point iteration
// K_n = 1 + Q K_{n-1}, K_0 = 1 runs on Q = P restricted to the free states;
// states that are not absorbed almost surely grow linearly with the
// iteration count and are flagged divergent instead of converging.

namespace velokit {

struct HittingProblem {
  Eigen::MatrixXd P;
  std::vector<int> target;
  std::vector<int> taboo;
  long max_iters = 100000;
  double tol = 1e-10;  // sup-norm change per sweep

  void validate() const {
    const Eigen::Index n = P.rows();
    if (n == 0 || P.cols() != n) throw config_error("hitting: P not square");
    if (target.empty()) throw config_error("hitting: empty target set");
    for (int i : target) {
      if (i < 0 || i >= n) throw config_error("hitting: target out of range");
    }
    for (int i : taboo) {
      if (i < 0 || i >= n) throw config_error("hitting: taboo out of range");
      for (int j : target) {
        if (i == j) throw config_error("hitting: target and taboo overlap");
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(P.row(i).sum() - 1.0) > 1e-9 || P.row(i).minCoeff() < 0) {
        throw config_error("hitting: P is not row-stochastic (row " +
                           std::to_string(i) + ")");
      }
    }
  }
};

struct HittingResult {
  // Full-length vector: 0 on the target, NaN on taboo states, mean first
  // hitting time (or an iteration-scale value for divergent states)
  // elsewhere.
  Eigen::VectorXd k;
  std::vector<char> converged;
  std::vector<int> divergent;
  long iters = 0;
  bool all_converged = false;
  double min_increment = 0.0;  // monotonicity witness, >= 0
  double rcond = -1.0;         // direct solver only
};

namespace detail {

struct FreeSet {
  std::vector<int> free;            // free-state indices in P order
  std::vector<int> position;       // P index -> free position or -1
};

inline FreeSet free_states(const HittingProblem& prob) {
  const Eigen::Index n = prob.P.rows();
  FreeSet fs;
  fs.position.assign(static_cast<std::size_t>(n), 0);
  for (int i : prob.target) fs.position[i] = -1;
  for (int i : prob.taboo) fs.position[i] = -2;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (fs.position[i] == 0) {
      fs.position[i] = static_cast<int>(fs.free.size());
      fs.free.push_back(static_cast<int>(i));
    }
  }
  return fs;
}

inline Eigen::MatrixXd restrict_matrix(const Eigen::MatrixXd& P,
                                       const std::vector<int>& free) {
  const Eigen::Index m = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd Q(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) {
      Q(a, b) = P(free[a], free[b]);
    }
  }
  return Q;
}

inline HittingResult embed(const HittingProblem& prob, const FreeSet& fs,
                           const Eigen::VectorXd& kfree) {
  const Eigen::Index n = prob.P.rows();
  HittingResult res;
  res.k = Eigen::VectorXd::Zero(n);
  res.converged.assign(static_cast<std::size_t>(n), 1);
  for (int i : prob.taboo) {
    res.k[i] = std::numeric_limits<double>::quiet_NaN();
    res.converged[i] = 0;
  }
  for (std::size_t a = 0; a < fs.free.size(); ++a) {
    res.k[fs.free[a]] = kfree[static_cast<Eigen::Index>(a)];
  }
  return res;
}

}  // namespace detail

// Fixed-point iteration of Lemma-style equations on the free states.
inline HittingResult solve_hitting(const HittingProblem& prob) {
  prob.validate();
  const detail::FreeSet fs = detail::free_states(prob);
  const Eigen::Index m = static_cast<Eigen::Index>(fs.free.size());
  if (m == 0) {
    HittingResult res = detail::embed(prob, fs, Eigen::VectorXd());
    res.all_converged = true;
    return res;
  }
  const Eigen::MatrixXd Q = detail::restrict_matrix(prob.P, fs.free);
  Eigen::VectorXd K = Eigen::VectorXd::Ones(m);
  Eigen::VectorXd next(m);

  // Ring buffer of the trailing 101 iterates for the divergence slope test.
  const int window = 100;
  std::vector<Eigen::VectorXd> ring(static_cast<std::size_t>(window + 1));
  ring[0] = K;

  HittingResult res = detail::embed(prob, fs, K);
  res.min_increment = std::numeric_limits<double>::infinity();
  long it = 0;
  double sup_change = std::numeric_limits<double>::infinity();
  while (it < prob.max_iters) {
    ++it;
    next.noalias() = Q * K;
    next.array() += 1.0;
    sup_change = 0.0;
    double min_inc = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < m; ++i) {
      const double inc = next[i] - K[i];
      min_inc = std::min(min_inc, inc);
      sup_change = std::max(sup_change, std::abs(inc));
    }
    res.min_increment = std::min(res.min_increment, min_inc);
    K.swap(next);
    ring[static_cast<std::size_t>(it % (window + 1))] = K;
    if (sup_change < prob.tol) break;
  }
  res.iters = it;

  Eigen::VectorXd last_change = K - ring[static_cast<std::size_t>(
                                    (it - 1 + window + 1) % (window + 1))];
  for (Eigen::Index a = 0; a < m; ++a) {
    const bool ok = std::abs(last_change[a]) < prob.tol;
    res.converged[fs.free[a]] = ok ? 1 : 0;
    res.k[fs.free[a]] = K[a];
  }
  if (it >= prob.max_iters && it > window) {
    const Eigen::VectorXd& old_k =
        ring[static_cast<std::size_t>((it - window) % (window + 1))];
    for (Eigen::Index a = 0; a < m; ++a) {
      const double slope = (K[a] - old_k[a]) / window;
      if (slope > 0.99) {
        res.divergent.push_back(fs.free[a]);
        res.converged[fs.free[a]] = 0;
      }
    }
  }
  res.all_converged = sup_change < prob.tol;
  return res;
}

// Dense (I - Q) k = 1 solve; the oracle route for small systems. Reports the
// LU reciprocal condition estimate and refuses badly conditioned systems.
inline HittingResult solve_hitting_direct(const HittingProblem& prob) {
  prob.validate();
  const detail::FreeSet fs = detail::free_states(prob);
  const Eigen::Index m = static_cast<Eigen::Index>(fs.free.size());
  if (m > 2000) {
    throw config_error(
        "solve_hitting_direct: free set larger than 2000 states; use the "
        "iterative solver");
  }
  HittingResult res;
  if (m == 0) {
    res = detail::embed(prob, fs, Eigen::VectorXd());
    res.all_converged = true;
    return res;
  }
  const Eigen::MatrixXd Q = detail::restrict_matrix(prob.P, fs.free);
  const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(m, m) - Q;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  const double rc = lu.rcond();
  if (!(rc > 1e-14)) {
    throw numeric_error(
        "solve_hitting_direct: I - Q is singular or has condition number "
        "above 1e14; use the iterative solver");
  }
  const Eigen::VectorXd k = lu.solve(Eigen::VectorXd::Ones(m));
  res = detail::embed(prob, fs, k);
  res.all_converged = true;
  res.rcond = rc;
  return res;
}

// Power-iteration estimate of the spectral radius of Q (diagnostic; the
// contraction property of the hitting iteration needs rho < 1).
inline double spectral_radius_bound(const Eigen::MatrixXd& Q,
                                    int iters = 10000, double tol = 1e-12) {
  if (Q.rows() != Q.cols()) throw config_error("spectral_radius: not square");
  if (Q.size() == 0) return 0.0;
  Eigen::VectorXd v = Eigen::VectorXd::Ones(Q.rows());
  v /= v.norm();
  double rho = 0.0;
  for (int i = 0; i < iters; ++i) {
    Eigen::VectorXd w = Q.cwiseAbs() * v;
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    const double next = nw / v.norm();
    w /= nw;
    const bool settled = std::abs(next - rho) <= tol * std::max(1.0, next);
    rho = next;
    v = w;
    if (settled && i > 3) break;
  }
  return rho;
}

// Pseudo-temporal distance: hitting times on the velocity graph.
inline HittingResult pseudo_time(const CellGraph& graph,
                                 const std::vector<int>& target,
                                 const std::vector<int>& taboo = {},
                                 long max_iters = 100000,
                                 double tol = 1e-10) {
  HittingProblem prob;
  prob.P = graph.P;
  prob.target = target;
  prob.taboo = taboo;
  prob.max_iters = max_iters;
  prob.tol = tol;
  return solve_hitting(prob);
}

struct BifurcationGap {
  Eigen::VectorXd gap;  // |k^{A1} - k^{A2}| per state
  HittingResult to_first;
  HittingResult to_second;
  // Proposed taboo candidates: divergent for exactly one fate and gap above
  // the 90th percentile. A suggestion only, never applied automatically.
  std::vector<int> taboo_candidates;
};

inline BifurcationGap bifurcation_gap(const CellGraph& graph,
                                      const std::vector<int>& fate1,
                                      const std::vector<int>& fate2,
                                      long max_iters = 100000,
                                      double tol = 1e-10) {
  BifurcationGap out;
  out.to_first = pseudo_time(graph, fate1, {}, max_iters, tol);
  out.to_second = pseudo_time(graph, fate2, {}, max_iters, tol);
  const Eigen::Index n = graph.P.rows();
  out.gap = (out.to_first.k - out.to_second.k).cwiseAbs();

  std::vector<char> div1(static_cast<std::size_t>(n), 0);
  std::vector<char> div2(static_cast<std::size_t>(n), 0);
  for (int i : out.to_first.divergent) div1[i] = 1;
  for (int i : out.to_second.divergent) div2[i] = 1;

  std::vector<double> finite_gaps;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isfinite(out.gap[i])) finite_gaps.push_back(out.gap[i]);
  }
  std::sort(finite_gaps.begin(), finite_gaps.end());
  const double q90 =
      finite_gaps.empty()
          ? 0.0
          : finite_gaps[static_cast<std::size_t>(0.9 * (finite_gaps.size() - 1))];
  for (Eigen::Index i = 0; i < n; ++i) {
    if ((div1[i] != div2[i]) && std::isfinite(out.gap[i]) &&
        out.gap[i] > q90) {
      out.taboo_candidates.push_back(static_cast<int>(i));
    }
  }
  return out;
}

// The 4-state stem/bottleneck/fate chain used as the analytic benchmark:
// states S, B, C, D with P(S->B)=1, P(B->S)=eps, P(B->C)=p, P(B->D)=q,
// P(C->B)=P(D->B)=eps and self-loops 1-eps on C and D.
inline Eigen::MatrixXd four_state_chain(double eps, double p, double q) {
  if (!(eps > 0.0) || !(p > 0.0) || !(q >= 0.0) ||
      std::abs(eps + p + q - 1.0) > 1e-12) {
    throw config_error("four_state_chain: need eps + p + q = 1");
  }
  Eigen::MatrixXd P(4, 4);
  P << 0, 1, 0, 0,
       eps, 0, p, q,
       0, eps, 1 - eps, 0,
       0, eps, 0, 1 - eps;
  return P;
}

}  // namespace velokit
