#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "velokit/dynamics.hpp"
#include "velokit/errors.hpp"

// Gene-shared latent time and per-gene rescaling factors via the top
// eigenvector of a gene-by-gene Gram matrix. Proposal 1 (multiplicative
// noise) optimizes x = 1/beta under || T diag(x) - t 1^T ||_F^2 with
// ||t|| = 1; proposal 2 (additive noise) optimizes || T - t beta^T ||_F^2
// with ||beta|| = 1. Both reduce to a Perron eigenvector problem.

namespace velokit {

using GeneTimeMatrix = Eigen::MatrixXd;  // n_cells x n_genes, entries >= 0

struct IrreducibilityReport {
  bool irreducible = false;
  std::vector<std::vector<int>> components;  // gene indices, kept genes only
  std::vector<int> skipped_genes;            // zero-norm time columns
};

struct RescaleResult {
  Eigen::VectorXd beta_star;  // per kept gene; positive
  Eigen::VectorXd t_star;     // per cell
  double objective = 0.0;     // final squared F-norm value
  double top_eigenvalue = 0.0;
  int proposal = 0;
  std::vector<int> kept_genes;
  std::vector<int> skipped_genes;
  int power_iterations = 0;
};

namespace detail {

inline std::vector<int> nonzero_columns(const GeneTimeMatrix& T,
                                        std::vector<int>& skipped) {
  std::vector<int> kept;
  for (Eigen::Index g = 0; g < T.cols(); ++g) {
    if (T.col(g).norm() > 0.0) {
      kept.push_back(static_cast<int>(g));
    } else {
      skipped.push_back(static_cast<int>(g));
    }
  }
  return kept;
}

inline Eigen::MatrixXd select_columns(const GeneTimeMatrix& T,
                                      const std::vector<int>& cols) {
  Eigen::MatrixXd out(T.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) {
    out.col(static_cast<Eigen::Index>(i)) = T.col(cols[i]);
  }
  return out;
}

// Connected components of the support graph of G = T^T T (G is symmetric, so
// connectivity and strong connectivity coincide).
inline std::vector<std::vector<int>> support_components(
    const Eigen::MatrixXd& gram) {
  const Eigen::Index d = gram.rows();
  std::vector<int> label(static_cast<std::size_t>(d), -1);
  std::vector<std::vector<int>> comps;
  for (Eigen::Index root = 0; root < d; ++root) {
    if (label[root] != -1) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    std::vector<Eigen::Index> stack{root};
    label[root] = id;
    while (!stack.empty()) {
      const Eigen::Index v = stack.back();
      stack.pop_back();
      comps[id].push_back(static_cast<int>(v));
      for (Eigen::Index w = 0; w < d; ++w) {
        if (label[w] == -1 && gram(v, w) > 0.0) {
          label[w] = id;
          stack.push_back(w);
        }
      }
    }
    std::sort(comps[id].begin(), comps[id].end());
  }
  return comps;
}

struct PowerResult {
  Eigen::VectorXd v;
  double lambda = 0.0;
  int iters = 0;
};

// Power iteration from the positive cone; H is nonnegative and irreducible,
// so the iterates converge to the Perron pair. Convergence asks for both a
// stable Rayleigh quotient (rel change < 1e-12) and a small eigenresidual.
inline PowerResult power_iteration(const Eigen::MatrixXd& H) {
  const Eigen::Index d = H.rows();
  PowerResult out;
  out.v = Eigen::VectorXd::Constant(d, 1.0 / std::sqrt(double(d)));
  const double hnorm = H.norm();
  if (hnorm == 0.0) throw numeric_error("power_iteration: zero matrix");
  double lambda_prev = 0.0;
  const int cap = 100000;
  for (out.iters = 1; out.iters <= cap; ++out.iters) {
    Eigen::VectorXd hv = H * out.v;
    out.lambda = out.v.dot(hv);
    const double resid = (hv - out.lambda * out.v).norm();
    const double hv_norm = hv.norm();
    if (hv_norm == 0.0) throw numeric_error("power_iteration: H v vanished");
    out.v = hv / hv_norm;
    const bool rayleigh_ok =
        std::abs(out.lambda - lambda_prev) <= 1e-12 * std::abs(out.lambda);
    if (rayleigh_ok && resid <= 1e-11 * hnorm) return out;
    lambda_prev = out.lambda;
  }
  throw numeric_error("power_iteration: no convergence within 1e5 sweeps");
}

// Sign convention: largest-magnitude entry positive; then require a strictly
// positive vector up to 1e-12 mixing.
inline void enforce_perron_sign(Eigen::VectorXd& v) {
  Eigen::Index imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  if (v[imax] < 0.0) v = -v;
  const double floor = -1e-12 * v[imax];
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (v[i] < floor) {
      throw numeric_error("rescale: mixed-sign eigenvector");
    }
  }
}

inline std::string format_components(
    const std::vector<std::vector<int>>& comps) {
  std::string msg = std::to_string(comps.size()) + " components:";
  for (const auto& comp : comps) {
    msg += " {";
    for (std::size_t i = 0; i < comp.size() && i < 8; ++i) {
      msg += (i ? "," : "") + std::to_string(comp[i]);
    }
    if (comp.size() > 8) msg += ",...";
    msg += "}";
  }
  return msg;
}

inline RescaleResult rescale_core(const GeneTimeMatrix& T, int proposal,
                                  bool check_connectivity) {
  if (T.size() == 0) throw config_error("rescale: empty time matrix");
  if ((T.array() < 0.0).any()) {
    throw config_error("rescale: negative entries in time matrix");
  }
  RescaleResult res;
  res.proposal = proposal;
  res.kept_genes = nonzero_columns(T, res.skipped_genes);
  if (res.kept_genes.empty()) {
    throw numeric_error("rescale: all gene columns have zero norm");
  }
  const Eigen::MatrixXd Tk = select_columns(T, res.kept_genes);
  const Eigen::Index m = Tk.cols();
  const Eigen::MatrixXd gram = Tk.transpose() * Tk;

  if (check_connectivity) {
    const auto comps = support_components(gram);
    if (comps.size() != 1) {
      throw numeric_error("rescale: T^T T is reducible; " +
                          format_components(comps));
    }
  }

  if (proposal == 1) {
    Eigen::VectorXd w(m);
    for (Eigen::Index g = 0; g < m; ++g) w[g] = 1.0 / Tk.col(g).norm();
    const Eigen::MatrixXd H =
        w.asDiagonal() * gram * w.asDiagonal();  // W^T T^T T W
    PowerResult p = power_iteration(H);
    enforce_perron_sign(p.v);
    res.power_iterations = p.iters;
    res.top_eigenvalue = p.lambda;
    const Eigen::VectorXd x =
        double(m) / std::sqrt(p.lambda) * (w.asDiagonal() * p.v);
    Eigen::VectorXd tw = Tk * (w.asDiagonal() * p.v);
    res.t_star = tw / tw.norm();
    res.beta_star = x.cwiseInverse();
    res.objective =
        (Tk * x.asDiagonal() -
         res.t_star * Eigen::RowVectorXd::Ones(m))
            .squaredNorm();
  } else if (proposal == 2) {
    PowerResult p = power_iteration(gram);
    enforce_perron_sign(p.v);
    res.power_iterations = p.iters;
    res.top_eigenvalue = p.lambda;
    res.beta_star = p.v;
    res.t_star = Tk * p.v;
    res.objective = (Tk - res.t_star * p.v.transpose()).squaredNorm();
  } else {
    throw config_error("rescale: proposal must be 1 or 2");
  }
  return res;
}

}  // namespace detail

// Support-graph connectivity of T^T T over the non-skipped genes.
inline IrreducibilityReport check_irreducible(const GeneTimeMatrix& T) {
  IrreducibilityReport rep;
  std::vector<int> kept = detail::nonzero_columns(T, rep.skipped_genes);
  if (kept.empty()) return rep;
  const Eigen::MatrixXd Tk = detail::select_columns(T, kept);
  const auto comps = detail::support_components(Tk.transpose() * Tk);
  rep.components.reserve(comps.size());
  for (const auto& comp : comps) {
    std::vector<int> orig;
    orig.reserve(comp.size());
    for (int local : comp) orig.push_back(kept[static_cast<std::size_t>(local)]);
    rep.components.push_back(std::move(orig));
  }
  rep.irreducible = rep.components.size() == 1;
  return rep;
}

inline RescaleResult rescale_multiplicative(const GeneTimeMatrix& T) {
  return detail::rescale_core(T, 1, true);
}

inline RescaleResult rescale_additive(const GeneTimeMatrix& T) {
  return detail::rescale_core(T, 2, true);
}

inline RescaleResult rescale(const GeneTimeMatrix& T, int proposal) {
  return detail::rescale_core(T, proposal, true);
}

// Opt-in fallback for reducible T: each connected component is rescaled on
// its own, with its own time normalization. Component times share no common
// scale, which is why this is not the canonical path.
inline std::vector<RescaleResult> rescale_per_component(
    const GeneTimeMatrix& T, int proposal) {
  IrreducibilityReport rep = check_irreducible(T);
  std::vector<RescaleResult> out;
  for (const auto& comp : rep.components) {
    Eigen::MatrixXd sub = detail::select_columns(T, comp);
    RescaleResult r = detail::rescale_core(sub, proposal, false);
    for (auto& g : r.kept_genes) g = comp[static_cast<std::size_t>(g)];
    r.skipped_genes = rep.skipped_genes;
    out.push_back(std::move(r));
  }
  return out;
}

// Per-gene map (alpha, 1, gamma; t_cg) -> (alpha b*, b*, gamma b*; t_cg / b*)
// over the kept genes; skipped genes pass through unchanged.
inline std::pair<std::vector<GeneKineticsd>, Eigen::MatrixXd> apply_rescale(
    const std::vector<GeneKineticsd>& kinetics,
    const Eigen::MatrixXd& time_matrix, const RescaleResult& res) {
  if (static_cast<Eigen::Index>(kinetics.size()) != time_matrix.cols()) {
    throw config_error("apply_rescale: kinetics/time shape mismatch");
  }
  std::vector<GeneKineticsd> out_k = kinetics;
  Eigen::MatrixXd out_t = time_matrix;
  for (std::size_t i = 0; i < res.kept_genes.size(); ++i) {
    const int g = res.kept_genes[i];
    const double b = res.beta_star[static_cast<Eigen::Index>(i)];
    out_k[g].alpha_on *= b;
    out_k[g].beta *= b;
    out_k[g].gamma *= b;
    if (std::isfinite(out_k[g].t_switch)) out_k[g].t_switch /= b;
    out_t.col(g) /= b;
  }
  return {std::move(out_k), std::move(out_t)};
}

}  // namespace velokit
