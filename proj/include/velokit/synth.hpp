#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "velokit/dynamics.hpp"
#include "velokit/errors.hpp"
#include "velokit/rng.hpp"

// Seedable synthetic expression data. Each generator reproduces one of the
// simulation protocols used to exercise the inference and graph machinery:
// on-stage, off-stage (relaxation from the on steady state), a half/half
// stage mix, and a two-branch bifurcation.

namespace velokit {

inline constexpr double kNearSteadyTime = 2.0 * 2.302585092994045684;  // 2 ln 10

enum class StagePlan { AllOn, AllOff, HalfHalf, Bifurcation };

struct ParamLaw {
  enum class Kind { LogNormal, Grid };
  Kind kind = Kind::LogNormal;

  // LogNormal: rates are exp(z), z ~ N(mu, sigma) over (log a, log b, log g).
  Eigen::Vector3d mu{5.0, 0.2, 0.05};
  Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();

  // Grid: explicit per-gene values; size d or 1 (broadcast).
  Eigen::VectorXd alpha_grid, beta_grid, gamma_grid;
};

struct TimeLaw {
  // Cells are sampled uniformly on [0, T]. T is either fixed or the median
  // of tau_g = 2 ln(10) / beta_g across genes.
  bool median_tau = true;
  double fixed_T = 0.0;
};

struct SimConfig {
  int n_cells = 0;
  int n_genes = 0;
  ParamLaw param_law;
  TimeLaw time_law;
  double noise_sigma = 0.0;
  StagePlan stage_plan = StagePlan::AllOn;
  double bifurcation_off_fraction = 0.7;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_cells < 1 || n_genes < 1) {
      throw config_error("SimConfig: n_cells and n_genes must be >= 1");
    }
    if (!(noise_sigma >= 0.0)) {
      throw config_error("SimConfig: noise_sigma must be >= 0");
    }
    if (!time_law.median_tau && !(time_law.fixed_T > 0.0)) {
      throw config_error("SimConfig: fixed T must be > 0");
    }
    if (!(bifurcation_off_fraction > 0.0 && bifurcation_off_fraction < 1.0)) {
      throw config_error("SimConfig: bifurcation_off_fraction in (0,1)");
    }
  }
};

struct ExpressionDataset {
  Eigen::MatrixXd U, S;  // n_cells x n_genes
  Eigen::VectorXd true_times;
  std::vector<GeneKineticsd> true_kinetics;
  std::vector<int> branch_labels;  // bifurcation: 0 trunk, 1, 2
  std::vector<int> stage_labels;   // per cell: 0 on, 1 off
  std::vector<int> branch1_off_genes;
  double time_horizon = 0.0;
};

namespace detail {

// Symmetric square root of a PSD matrix; rejects indefinite input.
inline Eigen::Matrix3d psd_sqrt(const Eigen::Matrix3d& sigma) {
  if (!sigma.isApprox(sigma.transpose(), 1e-12)) {
    throw config_error("param law: sigma must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(sigma);
  const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  Eigen::Vector3d lam = eig.eigenvalues();
  for (int i = 0; i < 3; ++i) {
    if (lam[i] < -1e-12 * scale) {
      throw config_error("param law: sigma is not positive semidefinite");
    }
    lam[i] = std::sqrt(std::max(lam[i], 0.0));
  }
  return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

inline double grid_value(const Eigen::VectorXd& grid, int g, const char* name) {
  if (grid.size() == 1) return grid[0];
  if (g < grid.size()) return grid[g];
  throw config_error(std::string("param law: ") + name +
                     " grid shorter than n_genes");
}

}  // namespace detail

// Per-gene rates drawn from the configured law; t_switch is left at +inf and
// set later by the stage plan.
inline std::vector<GeneKineticsd> sample_kinetics(const SimConfig& cfg,
                                                  CounterRng rng) {
  cfg.validate();
  std::vector<GeneKineticsd> out(static_cast<std::size_t>(cfg.n_genes));
  if (cfg.param_law.kind == ParamLaw::Kind::LogNormal) {
    const Eigen::Matrix3d root = detail::psd_sqrt(cfg.param_law.sigma);
    for (int g = 0; g < cfg.n_genes; ++g) {
      CounterRng gs = rng.substream(static_cast<std::uint64_t>(g));
      Eigen::Vector3d z{gs.normal(), gs.normal(), gs.normal()};
      Eigen::Vector3d logs = cfg.param_law.mu + root * z;
      out[g].alpha_on = std::exp(logs[0]);
      out[g].beta = std::exp(logs[1]);
      out[g].gamma = std::exp(logs[2]);
    }
  } else {
    for (int g = 0; g < cfg.n_genes; ++g) {
      out[g].alpha_on =
          detail::grid_value(cfg.param_law.alpha_grid, g, "alpha");
      out[g].beta = detail::grid_value(cfg.param_law.beta_grid, g, "beta");
      out[g].gamma = detail::grid_value(cfg.param_law.gamma_grid, g, "gamma");
      out[g].validate();
    }
  }
  return out;
}

inline double resolve_time_horizon(const SimConfig& cfg,
                                   const std::vector<GeneKineticsd>& kin) {
  if (!cfg.time_law.median_tau) return cfg.time_law.fixed_T;
  std::vector<double> tau(kin.size());
  for (std::size_t g = 0; g < kin.size(); ++g) {
    tau[g] = kNearSteadyTime / kin[g].beta;
  }
  std::sort(tau.begin(), tau.end());
  const std::size_t n = tau.size();
  return (n % 2 == 1) ? tau[n / 2] : 0.5 * (tau[n / 2 - 1] + tau[n / 2]);
}

inline Eigen::VectorXd sample_times(const SimConfig& cfg,
                                    const std::vector<GeneKineticsd>& kin,
                                    CounterRng rng) {
  const double T = resolve_time_horizon(cfg, kin);
  Eigen::VectorXd t(cfg.n_cells);
  for (int c = 0; c < cfg.n_cells; ++c) t[c] = rng.uniform(0.0, T);
  return t;
}

namespace detail {

enum Stream : std::uint64_t {
  kKinetics = 1,
  kTimes = 2,
  kNoise = 3,
  kBranch = 4
};

// Off-stage protocols relax from the on steady state, i.e. the trajectory
// with t_switch = 0 started at (alpha/beta, alpha/gamma).
inline StateUSd off_start(const GeneKineticsd& k) {
  return {k.alpha_on / k.beta, k.alpha_on / k.gamma};
}

inline void add_noise(const SimConfig& cfg, ExpressionDataset& ds,
                      CounterRng root) {
  if (cfg.noise_sigma == 0.0) return;
  for (int g = 0; g < cfg.n_genes; ++g) {
    CounterRng gs =
        root.substream(kNoise).substream(static_cast<std::uint64_t>(g));
    for (int c = 0; c < cfg.n_cells; ++c) {
      ds.U(c, g) += cfg.noise_sigma * gs.normal();
      ds.S(c, g) += cfg.noise_sigma * gs.normal();
    }
  }
}

}  // namespace detail

inline ExpressionDataset generate_bifurcation(const SimConfig& cfg);

// Exact dynamics at sampled times, one stage plan per dataset, with i.i.d.
// Gaussian observation noise on every entry. Values are kept as-is even when
// noise drives them negative.
inline ExpressionDataset generate(const SimConfig& cfg) {
  cfg.validate();
  if (cfg.stage_plan == StagePlan::Bifurcation) {
    return generate_bifurcation(cfg);
  }
  CounterRng root(cfg.seed);
  ExpressionDataset ds;
  ds.true_kinetics = sample_kinetics(cfg, root.substream(detail::kKinetics));
  ds.time_horizon = resolve_time_horizon(cfg, ds.true_kinetics);
  ds.true_times =
      sample_times(cfg, ds.true_kinetics, root.substream(detail::kTimes));
  ds.U.resize(cfg.n_cells, cfg.n_genes);
  ds.S.resize(cfg.n_cells, cfg.n_genes);
  ds.stage_labels.assign(static_cast<std::size_t>(cfg.n_cells), 0);

  const int first_off = cfg.stage_plan == StagePlan::AllOn    ? cfg.n_cells
                        : cfg.stage_plan == StagePlan::AllOff ? 0
                                                              : cfg.n_cells / 2;
  for (int c = first_off; c < cfg.n_cells; ++c) ds.stage_labels[c] = 1;

  for (int g = 0; g < cfg.n_genes; ++g) {
    GeneKineticsd on = ds.true_kinetics[g];  // t_switch stays +inf
    GeneKineticsd off = ds.true_kinetics[g];
    off.t_switch = 0.0;
    const StateUSd off0 = detail::off_start(off);
    for (int c = 0; c < cfg.n_cells; ++c) {
      const double t = ds.true_times[c];
      const StateUSd x = ds.stage_labels[c] == 0
                             ? solve_on_stage(t, on, StateUSd{0.0, 0.0})
                             : solve_off_stage(t, off, off0);
      ds.U(c, g) = x.u;
      ds.S(c, g) = x.s;
    }
  }
  detail::add_noise(cfg, ds, root);
  return ds;
}

// Two branches sharing a trunk. Branch 1 switches the first
// round(off_fraction * d) genes to the off stage at 2 ln(10) / beta_g;
// branch 2 switches the remaining genes. Cells past the earliest switch
// time are assigned to a branch by a fair coin.
inline ExpressionDataset generate_bifurcation(const SimConfig& cfg) {
  cfg.validate();
  if (cfg.stage_plan != StagePlan::Bifurcation) {
    throw config_error("generate_bifurcation: stage_plan is not bifurcation");
  }
  CounterRng root(cfg.seed);
  ExpressionDataset ds;
  ds.true_kinetics = sample_kinetics(cfg, root.substream(detail::kKinetics));
  ds.time_horizon = resolve_time_horizon(cfg, ds.true_kinetics);
  ds.true_times =
      sample_times(cfg, ds.true_kinetics, root.substream(detail::kTimes));

  const int m = static_cast<int>(
      std::floor(cfg.bifurcation_off_fraction * cfg.n_genes + 0.5));
  ds.branch1_off_genes.resize(static_cast<std::size_t>(m));
  for (int g = 0; g < m; ++g) ds.branch1_off_genes[g] = g;

  double t_trunk = std::numeric_limits<double>::infinity();
  for (const auto& k : ds.true_kinetics) {
    t_trunk = std::min(t_trunk, kNearSteadyTime / k.beta);
  }

  CounterRng coin = root.substream(detail::kBranch);
  ds.branch_labels.assign(static_cast<std::size_t>(cfg.n_cells), 0);
  for (int c = 0; c < cfg.n_cells; ++c) {
    const double flip = coin.uniform();
    if (ds.true_times[c] >= t_trunk) {
      ds.branch_labels[c] = flip < 0.5 ? 1 : 2;
    }
  }

  ds.U.resize(cfg.n_cells, cfg.n_genes);
  ds.S.resize(cfg.n_cells, cfg.n_genes);
  for (int g = 0; g < cfg.n_genes; ++g) {
    GeneKineticsd on = ds.true_kinetics[g];
    GeneKineticsd sw = ds.true_kinetics[g];
    sw.t_switch = kNearSteadyTime / sw.beta;
    ds.true_kinetics[g].t_switch = sw.t_switch;
    const bool off_in_b1 = g < m;
    for (int c = 0; c < cfg.n_cells; ++c) {
      const int b = ds.branch_labels[c];
      const bool switches = (b == 1 && off_in_b1) || (b == 2 && !off_in_b1);
      const StateUSd x = trajectory(switches ? sw : on, StateUSd{0.0, 0.0},
                                    ds.true_times[c]);
      ds.U(c, g) = x.u;
      ds.S(c, g) = x.s;
    }
  }
  detail::add_noise(cfg, ds, root);
  return ds;
}

}  // namespace velokit
