#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "velokit/dynamics.hpp"
#include "velokit/errors.hpp"
#include "velokit/parallel.hpp"
#include "velokit/synth.hpp"

// EM inference of per-gene rates with beta fixed to 1 and latent cell times.
// E-step: project each observation onto the model curve (nearest time on a
// coarse grid, refined by golden-section search). M-step: nonlinear least
// squares over (alpha, gamma) by Gauss-Newton with a finite-difference
// Jacobian and log-grid multistart.

namespace velokit {

enum class Stage { On, Off, Auto };

struct EmConfig {
  double t_horizon = 2.0 * kNearSteadyTime;
  int grid_size = 64;
  int max_iters = 50;
  double rel_tol = 1e-6;       // max_i |dtheta_i| / (|theta_i| + 1e-12)
  Stage stage = Stage::Auto;
  double proj_tol = 1e-8;      // E-step accuracy in t
  int gn_max_iters = 40;
  int multistart_keep = 4;     // Gauss-Newton runs from the best k grid starts
  unsigned workers = 0;        // 0 = default_workers()

  void validate() const {
    if (grid_size < 16) throw config_error("EmConfig: grid_size >= 16");
    if (!(rel_tol > 0)) throw config_error("EmConfig: rel_tol > 0");
    if (max_iters < 1) throw config_error("EmConfig: max_iters >= 1");
    if (!(t_horizon > 0)) throw config_error("EmConfig: t_horizon > 0");
    if (!(proj_tol > 0)) throw config_error("EmConfig: proj_tol > 0");
  }
};

// Model curve t -> (u, s) for one gene under the beta = 1 convention.
// On stage starts from (0, 0); off stage relaxes from the on steady state.
struct StageCurve {
  double alpha = 0.0;
  double gamma = 1.0;
  bool on = true;

  StateUSd at(double t) const {
    const double eb = std::exp(-t);
    const double eg = std::exp(-gamma * t);
    const double dd = std::abs(gamma - 1.0) <= degenerate_gap(1.0, gamma)
                          ? t * eb
                          : (eb - eg) / (gamma - 1.0);
    if (on) {
      return {alpha * (1.0 - eb),
              (alpha / gamma) * (1.0 - eg) - alpha * dd};
    }
    return {alpha * eb, (alpha / gamma) * eg + alpha * dd};
  }
};

inline StageCurve make_curve(double alpha, double gamma, Stage stage) {
  if (stage == Stage::Auto) {
    throw config_error("make_curve: stage must be resolved to on or off");
  }
  return StageCurve{alpha, gamma, stage == Stage::On};
}

namespace detail {

struct Projection {
  double t = 0.0;
  double sq = 0.0;
};

inline double sq_dist(double u, double s, const StateUSd& m) {
  const double du = u - m.u, ds = s - m.s;
  return du * du + ds * ds;
}

// Grid scan (ties keep the earliest cell) plus golden-section refinement of
// the bracketing interval.
inline Projection project_one(double u, double s, const StageCurve& curve,
                              const std::vector<double>& grid_t,
                              const std::vector<double>& grid_u,
                              const std::vector<double>& grid_s,
                              double proj_tol) {
  const int G = static_cast<int>(grid_t.size());
  int best = 0;
  double best_sq = std::numeric_limits<double>::infinity();
  for (int i = 0; i < G; ++i) {
    const double du = u - grid_u[i], ds = s - grid_s[i];
    const double d2 = du * du + ds * ds;
    if (d2 < best_sq) {
      best_sq = d2;
      best = i;
    }
  }
  double a = grid_t[std::max(best - 1, 0)];
  double b = grid_t[std::min(best + 1, G - 1)];
  constexpr double kInvPhi = 0.6180339887498949;
  double c1 = b - kInvPhi * (b - a);
  double c2 = a + kInvPhi * (b - a);
  double f1 = sq_dist(u, s, curve.at(c1));
  double f2 = sq_dist(u, s, curve.at(c2));
  while (b - a > proj_tol) {
    if (f1 <= f2) {
      b = c2;
      c2 = c1;
      f2 = f1;
      c1 = b - kInvPhi * (b - a);
      f1 = sq_dist(u, s, curve.at(c1));
    } else {
      a = c1;
      c1 = c2;
      f1 = f2;
      c2 = a + kInvPhi * (b - a);
      f2 = sq_dist(u, s, curve.at(c2));
    }
  }
  Projection p;
  p.t = 0.5 * (a + b);
  p.sq = sq_dist(u, s, curve.at(p.t));
  // Keep the grid point if refinement did not improve on it (plateau case).
  if (best_sq < p.sq) {
    p.t = grid_t[best];
    p.sq = best_sq;
  }
  return p;
}

inline void fill_grid(const StageCurve& curve, double horizon, int G,
                      std::vector<double>& t, std::vector<double>& u,
                      std::vector<double>& s) {
  t.resize(G);
  u.resize(G);
  s.resize(G);
  const double h = horizon / (G - 1);
  for (int i = 0; i < G; ++i) {
    t[i] = i * h;
    const StateUSd m = curve.at(t[i]);
    u[i] = m.u;
    s[i] = m.s;
  }
}

}  // namespace detail

// E-step for a single observation; accuracy proj_tol in t on [0, t_horizon].
inline double project_time(const StateUSd& x, const GeneKineticsd& k,
                           const EmConfig& cfg,
                           Stage stage = Stage::On) {
  cfg.validate();
  const StageCurve curve = make_curve(k.alpha_on, k.gamma, stage);
  std::vector<double> gt, gu, gs;
  detail::fill_grid(curve, cfg.t_horizon, cfg.grid_size, gt, gu, gs);
  return detail::project_one(x.u, x.s, curve, gt, gu, gs, cfg.proj_tol).t;
}

struct GeneFit {
  double alpha = 0.0;
  double gamma = 1.0;
  double loss = std::numeric_limits<double>::infinity();
  bool converged = false;
  int gn_iters = 0;
};

namespace detail {

inline double ssr(const Eigen::VectorXd& u, const Eigen::VectorXd& s,
                  const Eigen::VectorXd& times, const StageCurve& curve) {
  double acc = 0.0;
  for (Eigen::Index c = 0; c < u.size(); ++c) {
    acc += sq_dist(u[c], s[c], curve.at(times[c]));
  }
  return acc;
}

// Gauss-Newton on (alpha, gamma) with forward-difference Jacobian and
// step-halving backtracking (up to 20 halvings).
inline GeneFit gauss_newton(const Eigen::VectorXd& u, const Eigen::VectorXd& s,
                            const Eigen::VectorXd& times, bool on,
                            double alpha0, double gamma0,
                            const EmConfig& cfg) {
  const Eigen::Index n = u.size();
  GeneFit fit;
  fit.alpha = std::max(alpha0, 1e-12);
  fit.gamma = std::max(gamma0, 1e-12);
  StageCurve cur{fit.alpha, fit.gamma, on};
  fit.loss = ssr(u, s, times, cur);
  if (!std::isfinite(fit.loss)) return fit;

  for (int it = 0; it < cfg.gn_max_iters; ++it) {
    ++fit.gn_iters;
    const double ha = 1e-6 * (std::abs(fit.alpha) + 1e-6);
    const double hg = 1e-6 * (std::abs(fit.gamma) + 1e-6);
    const StageCurve ca{fit.alpha + ha, fit.gamma, on};
    const StageCurve cg{fit.alpha, fit.gamma + hg, on};
    Eigen::Matrix2d jtj = Eigen::Matrix2d::Zero();
    Eigen::Vector2d jte = Eigen::Vector2d::Zero();
    for (Eigen::Index c = 0; c < n; ++c) {
      const StateUSd m0 = cur.at(times[c]);
      const StateUSd ma = ca.at(times[c]);
      const StateUSd mg = cg.at(times[c]);
      const double ju_a = (ma.u - m0.u) / ha, js_a = (ma.s - m0.s) / ha;
      const double ju_g = (mg.u - m0.u) / hg, js_g = (mg.s - m0.s) / hg;
      const double eu = u[c] - m0.u, es = s[c] - m0.s;
      jtj(0, 0) += ju_a * ju_a + js_a * js_a;
      jtj(0, 1) += ju_a * ju_g + js_a * js_g;
      jtj(1, 1) += ju_g * ju_g + js_g * js_g;
      jte[0] += ju_a * eu + js_a * es;
      jte[1] += ju_g * eu + js_g * es;
    }
    jtj(1, 0) = jtj(0, 1);
    const double damp = 1e-12 * (jtj(0, 0) + jtj(1, 1)) + 1e-300;
    jtj(0, 0) += damp;
    jtj(1, 1) += damp;
    const Eigen::Vector2d step = jtj.ldlt().solve(jte);
    if (!step.allFinite()) break;

    double lambda = 1.0;
    bool accepted = false;
    for (int half = 0; half < 20; ++half, lambda *= 0.5) {
      const double na = fit.alpha + lambda * step[0];
      const double ng = fit.gamma + lambda * step[1];
      if (!(na > 0.0) || !(ng > 0.0)) continue;
      const StageCurve trial{na, ng, on};
      const double l = ssr(u, s, times, trial);
      if (std::isfinite(l) && l < fit.loss) {
        const double rel =
            std::max(std::abs(na - fit.alpha) / (std::abs(fit.alpha) + 1e-12),
                     std::abs(ng - fit.gamma) / (std::abs(fit.gamma) + 1e-12));
        const double lrel = (fit.loss - l) / (fit.loss + 1e-300);
        fit.alpha = na;
        fit.gamma = ng;
        fit.loss = l;
        cur = trial;
        accepted = true;
        if (rel < 1e-9 || lrel < 1e-12) {
          fit.converged = true;
          return fit;
        }
        break;
      }
    }
    if (!accepted) {
      // No descent direction left at this scale; treat as converged.
      fit.converged = true;
      return fit;
    }
  }
  fit.converged = true;  // hit the iteration cap with steady descent
  return fit;
}

inline double upper_decile_mean(const Eigen::VectorXd& v) {
  std::vector<double> w(v.data(), v.data() + v.size());
  const std::size_t k = std::max<std::size_t>(1, w.size() / 10);
  std::nth_element(w.begin(), w.end() - k, w.end());
  double acc = 0.0;
  for (std::size_t i = w.size() - k; i < w.size(); ++i) acc += w[i];
  return acc / k;
}

struct MomentInit {
  double alpha;
  double gamma;
};

// Rough starts from the data scale: u tops out near alpha in both stages and
// s tops out near alpha / gamma.
inline MomentInit moment_init(const Eigen::VectorXd& u,
                              const Eigen::VectorXd& s) {
  const double a0 = std::max(upper_decile_mean(u), 1e-6);
  const double smax = std::max(upper_decile_mean(s), 1e-6);
  const double g0 = std::clamp(a0 / smax, 1e-3, 1e3);
  return {a0, g0};
}

}  // namespace detail

// M-step: least squares over (alpha, gamma) at fixed times. Multistart on a
// 4x4 log-grid around moment-based guesses; Gauss-Newton from the most
// promising starts (plus the optional warm start, which is never dropped,
// so the returned loss can only improve on it).
inline GeneFit fit_rates(const Eigen::VectorXd& u, const Eigen::VectorXd& s,
                         const Eigen::VectorXd& times, Stage stage,
                         const EmConfig& cfg,
                         const GeneFit* warm = nullptr) {
  if (stage == Stage::Auto) {
    throw config_error("fit_rates: stage must be resolved to on or off");
  }
  const bool on = stage == Stage::On;
  const detail::MomentInit mi = detail::moment_init(u, s);
  static constexpr double kFactors[4] = {0.25, 0.62996, 1.5874, 4.0};

  struct Start {
    double a, g, loss;
  };
  std::vector<Start> starts;
  starts.reserve(17);
  for (double fa : kFactors) {
    for (double fg : kFactors) {
      Start st{mi.alpha * fa, mi.gamma * fg, 0.0};
      st.loss = detail::ssr(u, s, times, StageCurve{st.a, st.g, on});
      starts.push_back(st);
    }
  }
  std::sort(starts.begin(), starts.end(),
            [](const Start& x, const Start& y) { return x.loss < y.loss; });
  const int keep = std::clamp(cfg.multistart_keep, 1,
                              static_cast<int>(starts.size()));

  GeneFit best;
  bool any = false;
  auto consider = [&](const GeneFit& f) {
    if (!std::isfinite(f.loss)) return;
    any = true;
    if (f.loss < best.loss) best = f;
  };
  for (int i = 0; i < keep; ++i) {
    consider(detail::gauss_newton(u, s, times, on, starts[i].a, starts[i].g,
                                  cfg));
  }
  if (warm != nullptr) {
    consider(detail::gauss_newton(u, s, times, on, warm->alpha, warm->gamma,
                                  cfg));
    if (warm->loss < best.loss) best = *warm;
  }
  if (!any) {
    best.converged = false;  // every start diverged; carry best-so-far
  }
  return best;
}

struct GeneEmResult {
  GeneFit fit;
  Eigen::VectorXd times;
  std::vector<double> loss_trace;  // joint loss after each M-step
  int iters = 0;
  bool converged = false;
  Stage stage = Stage::On;
};

namespace detail {

inline GeneEmResult em_infer_gene_stage(const Eigen::VectorXd& u,
                                        const Eigen::VectorXd& s,
                                        const EmConfig& cfg, Stage stage) {
  const bool on = stage == Stage::On;
  GeneEmResult res;
  res.stage = stage;
  res.times.resize(u.size());

  MomentInit mi = moment_init(u, s);
  GeneFit theta;
  theta.alpha = mi.alpha;
  theta.gamma = mi.gamma;

  // Trailing parameter iterates for Aitken extrapolation. The EM map crawls
  // along a nearly flat valley on low-noise data (contraction factor can
  // exceed 0.999), so the loop periodically extrapolates the linear tail and
  // keeps the jump only when a fresh E-step confirms the joint loss dropped.
  Eigen::Vector2d hist[3];
  int hist_n = 0;

  std::vector<double> gt, gu, gs;
  Eigen::VectorXd trial_times(u.size());
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    res.iters = iter;
    const StageCurve curve{theta.alpha, theta.gamma, on};
    fill_grid(curve, cfg.t_horizon, cfg.grid_size, gt, gu, gs);
    for (Eigen::Index c = 0; c < u.size(); ++c) {
      const Projection p =
          project_one(u[c], s[c], curve, gt, gu, gs, cfg.proj_tol);
      // The refinement is accurate to proj_tol; keeping the incumbent time
      // when it happens to score better makes the E-step exactly monotone.
      if (iter > 1 && sq_dist(u[c], s[c], curve.at(res.times[c])) < p.sq) {
        continue;
      }
      res.times[c] = p.t;
    }
    // Warm-started refit; the canonical multistart sweep runs on the first
    // pass, later passes continue from the current estimate.
    EmConfig inner = cfg;
    GeneFit warm = theta;
    warm.loss = ssr(u, s, res.times, curve);
    GeneFit next;
    if (iter == 1) {
      next = fit_rates(u, s, res.times, stage, inner, &warm);
    } else {
      next = gauss_newton(u, s, res.times, on, theta.alpha, theta.gamma,
                          inner);
      if (warm.loss < next.loss) next = warm;
    }
    hist[hist_n % 3] = Eigen::Vector2d(next.alpha, next.gamma);
    ++hist_n;
    if (hist_n >= 3 && iter >= 3 && iter % 2 == 1) {
      const Eigen::Vector2d t2 = hist[(hist_n - 1) % 3];
      const Eigen::Vector2d t1 = hist[(hist_n - 2) % 3];
      const Eigen::Vector2d t0 = hist[(hist_n - 3) % 3];
      const Eigen::Vector2d d1 = t1 - t0, d2 = t2 - t1;
      const double denom = d1.squaredNorm();
      if (denom > 0) {
        const double r = d2.dot(d1) / denom;
        if (r > 0.0 && r < 0.99999) {
          const double gain = r / (1.0 - r);
          for (double scale : {1.0, 0.25, 0.0625}) {
            const Eigen::Vector2d jump = t2 + d2 * (gain * scale);
            if (!(jump[0] > 0.0) || !(jump[1] > 0.0)) continue;
            const StageCurve cand{jump[0], jump[1], on};
            fill_grid(cand, cfg.t_horizon, cfg.grid_size, gt, gu, gs);
            double cand_loss = 0.0;
            for (Eigen::Index c = 0; c < u.size(); ++c) {
              const Projection p = project_one(u[c], s[c], cand, gt, gu, gs,
                                               cfg.proj_tol);
              trial_times[c] = p.t;
              cand_loss += p.sq;
            }
            if (std::isfinite(cand_loss) && cand_loss < next.loss) {
              next.alpha = jump[0];
              next.gamma = jump[1];
              next.loss = cand_loss;
              res.times = trial_times;
              hist_n = 0;  // restart the tail after a jump
              break;
            }
          }
        }
      }
    }

    res.loss_trace.push_back(next.loss);
    const double rel = std::max(
        std::abs(next.alpha - theta.alpha) / (std::abs(theta.alpha) + 1e-12),
        std::abs(next.gamma - theta.gamma) / (std::abs(theta.gamma) + 1e-12));
    theta = next;
    if (iter > 1 && rel < cfg.rel_tol) {
      res.converged = true;
      break;
    }
  }
  res.fit = theta;
  return res;
}

}  // namespace detail

// Full EM for one gene column; Stage::Auto fits both stage models and keeps
// the lower final loss.
inline GeneEmResult em_infer_gene(const Eigen::VectorXd& u,
                                  const Eigen::VectorXd& s,
                                  const EmConfig& cfg) {
  cfg.validate();
  if (cfg.stage != Stage::Auto) {
    return detail::em_infer_gene_stage(u, s, cfg, cfg.stage);
  }
  GeneEmResult a = detail::em_infer_gene_stage(u, s, cfg, Stage::On);
  GeneEmResult b = detail::em_infer_gene_stage(u, s, cfg, Stage::Off);
  return a.fit.loss <= b.fit.loss ? a : b;
}

struct EmResult {
  std::vector<GeneKineticsd> kinetics_hat;  // beta = 1 convention
  Eigen::MatrixXd time_matrix;              // n_cells x n_genes
  double loss = 0.0;
  int iters = 0;
  bool converged = true;
  std::vector<char> gene_converged;
  std::vector<Stage> gene_stage;
  std::vector<std::vector<double>> loss_traces;
};

inline EmResult em_infer(const ExpressionDataset& ds, const EmConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = ds.U.rows(), d = ds.U.cols();
  if (n == 0 || d == 0) throw config_error("em_infer: empty dataset");
  EmResult out;
  out.kinetics_hat.resize(static_cast<std::size_t>(d));
  out.time_matrix.resize(n, d);
  out.gene_converged.assign(static_cast<std::size_t>(d), 0);
  out.gene_stage.assign(static_cast<std::size_t>(d), Stage::On);
  out.loss_traces.resize(static_cast<std::size_t>(d));
  std::vector<double> losses(static_cast<std::size_t>(d), 0.0);
  std::vector<int> iters(static_cast<std::size_t>(d), 0);

  parallel_for(static_cast<std::size_t>(d), cfg.workers, [&](std::size_t g) {
    const GeneEmResult r =
        em_infer_gene(ds.U.col(static_cast<Eigen::Index>(g)),
                      ds.S.col(static_cast<Eigen::Index>(g)), cfg);
    out.time_matrix.col(static_cast<Eigen::Index>(g)) = r.times;
    GeneKineticsd k;
    k.alpha_on = r.fit.alpha;
    k.beta = 1.0;
    k.gamma = r.fit.gamma;
    k.t_switch = r.stage == Stage::On
                     ? std::numeric_limits<double>::infinity()
                     : 0.0;
    out.kinetics_hat[g] = k;
    out.gene_converged[g] = r.converged && r.fit.converged ? 1 : 0;
    out.gene_stage[g] = r.stage;
    out.loss_traces[g] = r.loss_trace;
    losses[g] = r.fit.loss;
    iters[g] = r.iters;
  });
  for (std::size_t g = 0; g < static_cast<std::size_t>(d); ++g) {
    out.loss += losses[g];
    out.iters = std::max(out.iters, iters[g]);
    if (!out.gene_converged[g]) out.converged = false;
  }
  return out;
}

// v_cg = beta_g u_cg - gamma_g s_cg on observed counts.
inline Eigen::MatrixXd velocity_field(const Eigen::MatrixXd& U,
                                      const Eigen::MatrixXd& S,
                                      const Eigen::VectorXd& beta,
                                      const Eigen::VectorXd& gamma) {
  if (U.rows() != S.rows() || U.cols() != S.cols() ||
      beta.size() != U.cols() || gamma.size() != U.cols()) {
    throw config_error("velocity_field: shape mismatch");
  }
  return U * beta.asDiagonal() - S * gamma.asDiagonal();
}

inline Eigen::MatrixXd velocity_field(const ExpressionDataset& ds,
                                      const EmResult& em) {
  const Eigen::Index d = ds.U.cols();
  Eigen::VectorXd beta(d), gamma(d);
  for (Eigen::Index g = 0; g < d; ++g) {
    beta[g] = em.kinetics_hat[static_cast<std::size_t>(g)].beta;
    gamma[g] = em.kinetics_hat[static_cast<std::size_t>(g)].gamma;
  }
  return velocity_field(ds.U, ds.S, beta, gamma);
}

}  // namespace velokit
