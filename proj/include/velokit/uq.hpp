#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "velokit/errors.hpp"
#include "velokit/inference.hpp"
#include "velokit/parallel.hpp"

// Supplemented-EM covariance for the per-gene estimates (alpha, gamma).
// The complete-data information is the Hessian of the squared-residual loss
// at the point times; the EM-map Jacobian J_M is differenced from one full
// EM update; V = (I - J_M)^{-1} I_oc^{-1} with 95% intervals
// theta_i +/- 1.96 sqrt(v_ii / n).

namespace velokit {

struct SemConfig {
  double hess_step_scale = 1e-4;  // h = scale * (|theta_i| + 1)
  double jm_step_scale = 1e-3;
  EmConfig em;
  // Latent-free mode: times are treated as observed data, so the EM map
  // reduces to the M-step and J_M vanishes.
  bool fixed_times = false;
};

struct SemResult {
  Eigen::Vector2d theta_hat = Eigen::Vector2d::Zero();
  Eigen::Matrix2d I_oc = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d J_M = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d V_hat = Eigen::Matrix2d::Zero();
  std::array<std::array<double, 2>, 2> ci95{};  // [param][lo, hi]
  std::array<bool, 2> ci_valid{false, false};
  bool pd_flag = false;
  double sigma2_hat = 0.0;
  int n_cells = 0;
};

namespace detail {

inline double loss_at(const Eigen::VectorXd& u, const Eigen::VectorXd& s,
                      const Eigen::VectorXd& times, bool on, double alpha,
                      double gamma) {
  return ssr(u, s, times, StageCurve{alpha, gamma, on});
}

}  // namespace detail

// Empirical complete-data information: Hessian in theta of
// SSR(theta; times) / (2 sigma^2 n), by central differences with one
// Richardson extrapolation step.
inline Eigen::Matrix2d complete_info(const Eigen::VectorXd& u,
                                     const Eigen::VectorXd& s,
                                     const Eigen::VectorXd& times,
                                     const Eigen::Vector2d& theta, Stage stage,
                                     double sigma2,
                                     double step_scale = 1e-4) {
  if (stage == Stage::Auto) {
    throw config_error("complete_info: stage must be resolved");
  }
  const bool on = stage == Stage::On;
  const double n = static_cast<double>(u.size());
  const double norm = 1.0 / (2.0 * std::max(sigma2, 1e-300) * n);
  auto L = [&](double a, double g) {
    return norm * detail::loss_at(u, s, times, on, a, g);
  };
  const double h0 = step_scale * (std::abs(theta[0]) + 1.0);
  const double h1 = step_scale * (std::abs(theta[1]) + 1.0);
  const double base = L(theta[0], theta[1]);

  auto diag = [&](int i, double h) {
    const double hp0 = i == 0 ? h : 0.0, hp1 = i == 1 ? h : 0.0;
    return (L(theta[0] + hp0, theta[1] + hp1) - 2.0 * base +
            L(theta[0] - hp0, theta[1] - hp1)) /
           (h * h);
  };
  auto cross = [&](double ha, double hg) {
    return (L(theta[0] + ha, theta[1] + hg) - L(theta[0] + ha, theta[1] - hg) -
            L(theta[0] - ha, theta[1] + hg) +
            L(theta[0] - ha, theta[1] - hg)) /
           (4.0 * ha * hg);
  };

  Eigen::Matrix2d H;
  H(0, 0) = (4.0 * diag(0, 0.5 * h0) - diag(0, h0)) / 3.0;
  H(1, 1) = (4.0 * diag(1, 0.5 * h1) - diag(1, h1)) / 3.0;
  const double c = (4.0 * cross(0.5 * h0, 0.5 * h1) - cross(h0, h1)) / 3.0;
  H(0, 1) = c;
  H(1, 0) = c;
  if (!H.allFinite()) {
    throw numeric_error("complete_info: non-finite Hessian entries");
  }
  return H;
}

// One full EM update M(theta): E-step from theta, then the M-step continued
// from theta. In fixed-times mode the E-step is skipped.
inline Eigen::Vector2d em_update(const Eigen::VectorXd& u,
                                 const Eigen::VectorXd& s,
                                 const Eigen::VectorXd& times_data,
                                 const Eigen::Vector2d& theta, Stage stage,
                                 const SemConfig& cfg) {
  const bool on = stage == Stage::On;
  Eigen::VectorXd times = times_data;
  if (!cfg.fixed_times) {
    const StageCurve curve{theta[0], theta[1], on};
    std::vector<double> gt, gu, gs;
    detail::fill_grid(curve, cfg.em.t_horizon, cfg.em.grid_size, gt, gu, gs);
    for (Eigen::Index c = 0; c < u.size(); ++c) {
      times[c] =
          detail::project_one(u[c], s[c], curve, gt, gu, gs, cfg.em.proj_tol)
              .t;
    }
  }
  EmConfig tight = cfg.em;
  tight.gn_max_iters = std::max(cfg.em.gn_max_iters, 100);
  GeneFit fit =
      detail::gauss_newton(u, s, times, on, theta[0], theta[1], tight);
  if (!std::isfinite(fit.loss)) {
    throw numeric_error("em_update: M-step diverged");
  }
  return {fit.alpha, fit.gamma};
}

// Forward-difference Jacobian of the EM map around theta_hat.
inline Eigen::Matrix2d em_map_jacobian(const Eigen::VectorXd& u,
                                       const Eigen::VectorXd& s,
                                       const Eigen::VectorXd& times_hat,
                                       const Eigen::Vector2d& theta_hat,
                                       Stage stage, const SemConfig& cfg) {
  Eigen::Vector2d m0;
  try {
    m0 = em_update(u, s, times_hat, theta_hat, stage, cfg);
  } catch (const numeric_error& e) {
    throw numeric_error(std::string("em_map_jacobian: base point: ") +
                        e.what());
  }
  Eigen::Matrix2d J;
  for (int j = 0; j < 2; ++j) {
    const double h = cfg.jm_step_scale * (std::abs(theta_hat[j]) + 1.0);
    Eigen::Vector2d pert = theta_hat;
    pert[j] += h;
    Eigen::Vector2d mj;
    try {
      mj = em_update(u, s, times_hat, pert, stage, cfg);
    } catch (const numeric_error& e) {
      throw numeric_error("em_map_jacobian: column " + std::to_string(j) +
                          " (" + (j == 0 ? "alpha" : "gamma") +
                          "): " + e.what());
    }
    J.col(j) = (mj - m0) / h;
  }
  return J;
}

// Assembles V, the PD flag and the intervals from the SEM ingredients.
inline SemResult assemble_sem(const Eigen::Vector2d& theta_hat,
                              const Eigen::Matrix2d& I_oc,
                              const Eigen::Matrix2d& J_M, double sigma2,
                              int n_cells) {
  SemResult res;
  res.theta_hat = theta_hat;
  res.I_oc = I_oc;
  res.J_M = J_M;
  res.sigma2_hat = sigma2;
  res.n_cells = n_cells;

  const Eigen::Matrix2d imj = Eigen::Matrix2d::Identity() - J_M;
  const double det = imj.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-14) {
    throw numeric_error("sem: I - J_M is singular");
  }
  const double det_ioc = I_oc.determinant();
  if (!std::isfinite(det_ioc) || std::abs(det_ioc) < 1e-300) {
    throw numeric_error("sem: complete-data information is singular");
  }
  Eigen::Matrix2d V = imj.inverse() * I_oc.inverse();
  V = 0.5 * (V + V.transpose());
  res.V_hat = V;

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(V);
  res.pd_flag = eig.eigenvalues().minCoeff() > 0.0;

  for (int i = 0; i < 2; ++i) {
    const double vii = V(i, i);
    if (vii >= 0.0) {
      const double half = 1.96 * std::sqrt(vii / n_cells);
      res.ci95[i] = {theta_hat[i] - half, theta_hat[i] + half};
      res.ci_valid[i] = true;
    } else {
      res.ci95[i] = {std::nan(""), std::nan("")};
      res.ci_valid[i] = false;
    }
  }
  return res;
}

// Full SEM pass for one gene. sigma^2 is plugged in from the mean squared
// residual at theta_hat: each cell contributes two observed coordinates and
// one projected latent time, leaving about one residual degree of freedom,
// so the latent fit divides by n rather than 2n.
inline SemResult sem_covariance(const Eigen::VectorXd& u,
                                const Eigen::VectorXd& s,
                                const Eigen::VectorXd& times_hat,
                                const Eigen::Vector2d& theta_hat, Stage stage,
                                const SemConfig& cfg) {
  if (stage == Stage::Auto) {
    throw config_error("sem_covariance: stage must be resolved");
  }
  const bool on = stage == Stage::On;
  const double n = static_cast<double>(u.size());
  const double ssr0 =
      detail::loss_at(u, s, times_hat, on, theta_hat[0], theta_hat[1]);
  const double dof = cfg.fixed_times ? 2.0 * n : n;
  const double sigma2 = std::max(ssr0 / dof, 1e-300);

  const Eigen::Matrix2d ioc = complete_info(u, s, times_hat, theta_hat, stage,
                                            sigma2, cfg.hess_step_scale);
  const Eigen::Matrix2d jm =
      em_map_jacobian(u, s, times_hat, theta_hat, stage, cfg);
  return assemble_sem(theta_hat, ioc, jm, sigma2, static_cast<int>(n));
}

// Per-gene SEM over a fitted dataset; independent genes run in parallel.
inline std::vector<SemResult> sem_all(const ExpressionDataset& ds,
                                      const EmResult& em,
                                      const SemConfig& cfg) {
  const Eigen::Index d = ds.U.cols();
  std::vector<SemResult> out(static_cast<std::size_t>(d));
  parallel_for(static_cast<std::size_t>(d), cfg.em.workers,
               [&](std::size_t g) {
                 const Eigen::Index gi = static_cast<Eigen::Index>(g);
                 const Eigen::Vector2d theta{em.kinetics_hat[g].alpha_on,
                                             em.kinetics_hat[g].gamma};
                 out[g] = sem_covariance(ds.U.col(gi), ds.S.col(gi),
                                         em.time_matrix.col(gi), theta,
                                         em.gene_stage[g], cfg);
               });
  return out;
}

}  // namespace velokit
