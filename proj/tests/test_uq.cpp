#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "velokit/synth.hpp"
#include "velokit/uq.hpp"

using namespace velokit;

namespace {

SimConfig grid_sim(std::uint64_t seed, StagePlan plan, double sigma,
                   int n_cells, int n_genes) {
  SimConfig cfg;
  cfg.n_cells = n_cells;
  cfg.n_genes = n_genes;
  cfg.param_law.kind = ParamLaw::Kind::Grid;
  cfg.param_law.alpha_grid =
      Eigen::VectorXd::LinSpaced(n_genes, 20.0, 20.0 + 0.5 * (n_genes - 1));
  cfg.param_law.beta_grid = Eigen::VectorXd::Constant(1, 1.0);
  cfg.param_law.gamma_grid =
      Eigen::VectorXd::LinSpaced(n_genes, 1.5, 1.5 + 0.05 * (n_genes - 1));
  cfg.time_law.median_tau = false;
  cfg.time_law.fixed_T = kNearSteadyTime;
  cfg.noise_sigma = sigma;
  cfg.stage_plan = plan;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("complete_info matches the analytic alpha Hessian") {
  // On-curve data: both u and s are linear in alpha at fixed gamma and
  // times, so d2/dalpha2 of SSR/(2 sigma^2 n) is sum(f^2 + h^2)/(sigma^2 n).
  const double alpha = 24.0, gamma = 1.8, sigma2 = 0.04;
  const StageCurve curve{alpha, gamma, true};
  const int n = 60;
  Eigen::VectorXd u(n), s(n), t(n);
  CounterRng rng(3);
  for (int c = 0; c < n; ++c) {
    t[c] = rng.uniform(0.1, kNearSteadyTime);
    const StateUSd m = curve.at(t[c]);
    u[c] = m.u;
    s[c] = m.s;
  }
  double analytic = 0.0;
  for (int c = 0; c < n; ++c) {
    const StateUSd m = curve.at(t[c]);
    const double f = m.u / alpha, h = m.s / alpha;
    analytic += f * f + h * h;
  }
  analytic /= sigma2 * n;

  const Eigen::Matrix2d H = complete_info(u, s, t, {alpha, gamma}, Stage::On,
                                          sigma2);
  CHECK(std::abs(H(0, 0) - analytic) <= 1e-4 * analytic);
  CHECK(std::abs(H(0, 1) - H(1, 0)) <= 1e-8 * (1.0 + std::abs(H(0, 1))));
}

TEST_CASE("complete-data information is PD across the grid protocol") {
  SimConfig sim = grid_sim(7, StagePlan::AllOn, 0.2, 200, 10);
  auto ds = generate(sim);
  EmConfig em_cfg;
  em_cfg.stage = Stage::On;
  em_cfg.workers = 2;
  auto em = em_infer(ds, em_cfg);
  for (int g = 0; g < 10; ++g) {
    const Eigen::Vector2d theta{em.kinetics_hat[g].alpha_on,
                                em.kinetics_hat[g].gamma};
    const double ssr0 = 0.0;  // sigma from residuals, as in sem_covariance
    (void)ssr0;
    const Eigen::Matrix2d H = complete_info(
        ds.U.col(g), ds.S.col(g), em.time_matrix.col(g), theta, Stage::On,
        0.04);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(H);
    CHECK(eig.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("EM-map Jacobian at a zero-noise fixed point") {
  // The latent time can absorb most of a rate perturbation along the curve,
  // so the missing information stays large even at zero residual: J_M is a
  // contraction with spectral radius just below 1, matching the observed
  // linear convergence rate of the EM loop itself.
  SimConfig sim = grid_sim(11, StagePlan::AllOn, 0.0, 150, 1);
  auto ds = generate(sim);
  EmConfig em_cfg;
  em_cfg.stage = Stage::On;
  em_cfg.rel_tol = 1e-8;
  em_cfg.max_iters = 400;
  auto em = em_infer(ds, em_cfg);

  SemConfig cfg;
  cfg.em = em_cfg;
  const Eigen::Vector2d theta{em.kinetics_hat[0].alpha_on,
                              em.kinetics_hat[0].gamma};
  const Eigen::Matrix2d J = em_map_jacobian(
      ds.U.col(0), ds.S.col(0), em.time_matrix.col(0), theta, Stage::On, cfg);
  const double rho = J.eigenvalues().cwiseAbs().maxCoeff();
  CHECK(rho < 1.0);
  CHECK(rho > 0.9);

  // The difference quotient is stable in the step size.
  SemConfig finer = cfg;
  finer.jm_step_scale = 1e-4;
  const Eigen::Matrix2d J_fine = em_map_jacobian(
      ds.U.col(0), ds.S.col(0), em.time_matrix.col(0), theta, Stage::On,
      finer);
  CHECK((J - J_fine).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("EM-map Jacobian: spectral radius and a central-difference oracle") {
  SimConfig sim = grid_sim(13, StagePlan::AllOn, 0.2, 250, 1);
  auto ds = generate(sim);
  EmConfig em_cfg;
  em_cfg.stage = Stage::On;
  auto em = em_infer(ds, em_cfg);
  SemConfig cfg;
  cfg.em = em_cfg;
  const Eigen::Vector2d theta{em.kinetics_hat[0].alpha_on,
                              em.kinetics_hat[0].gamma};
  const Eigen::Matrix2d J = em_map_jacobian(
      ds.U.col(0), ds.S.col(0), em.time_matrix.col(0), theta, Stage::On, cfg);

  // EM contraction at a converged point.
  const double rho = J.eigenvalues().cwiseAbs().maxCoeff();
  CHECK(rho < 1.0);

  // Independent two-sided difference of the same map.
  Eigen::Matrix2d J2;
  for (int j = 0; j < 2; ++j) {
    const double h = cfg.jm_step_scale * (std::abs(theta[j]) + 1.0);
    Eigen::Vector2d tp = theta, tm = theta;
    tp[j] += h;
    tm[j] -= h;
    const Eigen::Vector2d mp =
        em_update(ds.U.col(0), ds.S.col(0), em.time_matrix.col(0), tp,
                  Stage::On, cfg);
    const Eigen::Vector2d mm =
        em_update(ds.U.col(0), ds.S.col(0), em.time_matrix.col(0), tm,
                  Stage::On, cfg);
    J2.col(j) = (mp - mm) / (2.0 * h);
  }
  CHECK((J - J2).cwiseAbs().maxCoeff() < 1e-3 + 1e-2 * J2.cwiseAbs().maxCoeff());
}

TEST_CASE("assemble_sem edge cases") {
  const Eigen::Vector2d theta{20.0, 2.0};
  Eigen::Matrix2d ioc;
  ioc << 4.0, 0.5, 0.5, 2.0;

  SUBCASE("J_M = 0 reduces to the inverse information") {
    auto res = assemble_sem(theta, ioc, Eigen::Matrix2d::Zero(), 0.04, 100);
    CHECK((res.V_hat - ioc.inverse()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(res.pd_flag);
    CHECK(res.ci_valid[0]);
    const double half = 1.96 * std::sqrt(res.V_hat(0, 0) / 100.0);
    CHECK(res.ci95[0][0] == doctest::Approx(20.0 - half));
    CHECK(res.ci95[0][1] == doctest::Approx(20.0 + half));
  }
  SUBCASE("singular I - J_M throws") {
    CHECK_THROWS_AS(
        assemble_sem(theta, ioc, Eigen::Matrix2d::Identity(), 0.04, 100),
        numeric_error);
  }
  SUBCASE("negative diagonal suppresses the interval and PD flag") {
    Eigen::Matrix2d jm;
    jm << 2.0, 0.0, 0.0, 0.0;  // V(0,0) flips sign through (I - J)^{-1}
    auto res = assemble_sem(theta, ioc, jm, 0.04, 100);
    CHECK(!res.pd_flag);
    CHECK(!res.ci_valid[0]);
    CHECK(std::isnan(res.ci95[0][0]));
    CHECK(res.ci_valid[1]);
  }
}

TEST_CASE("latent-free problem: V equals the inverse observed information") {
  SimConfig sim = grid_sim(17, StagePlan::AllOn, 0.2, 300, 1);
  auto ds = generate(sim);
  // Times are data here; fit rates once at the true times.
  EmConfig em_cfg;
  em_cfg.stage = Stage::On;
  auto fit = fit_rates(ds.U.col(0), ds.S.col(0), ds.true_times, Stage::On,
                       em_cfg);
  SemConfig cfg;
  cfg.em = em_cfg;
  cfg.fixed_times = true;
  auto res = sem_covariance(ds.U.col(0), ds.S.col(0), ds.true_times,
                            {fit.alpha, fit.gamma}, Stage::On, cfg);
  CHECK(res.J_M.cwiseAbs().maxCoeff() < 1e-6);
  const Eigen::Matrix2d direct = res.I_oc.inverse();
  CHECK((res.V_hat - direct).cwiseAbs().maxCoeff() <=
        1e-3 * direct.cwiseAbs().maxCoeff());
}

TEST_CASE("small Monte Carlo coverage smoke check") {
  // Scaled-down version of the full acceptance experiment: one gene,
  // 40 noise replicates, the true rates should fall inside most intervals.
  const int reps = 40;
  int cover_alpha = 0, cover_gamma = 0;
  EmConfig em_cfg;
  em_cfg.stage = Stage::On;
  SemConfig cfg;
  cfg.em = em_cfg;
  for (int r = 0; r < reps; ++r) {
    SimConfig sim = grid_sim(100 + r, StagePlan::AllOn, 0.2, 200, 1);
    auto ds = generate(sim);
    auto em = em_infer(ds, em_cfg);
    auto sems = sem_all(ds, em, cfg);
    const auto& res = sems[0];
    const double a = ds.true_kinetics[0].alpha_on;
    const double g = ds.true_kinetics[0].gamma;
    if (res.ci_valid[0] && res.ci95[0][0] <= a && a <= res.ci95[0][1]) {
      ++cover_alpha;
    }
    if (res.ci_valid[1] && res.ci95[1][0] <= g && g <= res.ci95[1][1]) {
      ++cover_gamma;
    }
  }
  CHECK(cover_alpha >= 31);  // >= 78% on a 40-draw smoke test
  CHECK(cover_gamma >= 31);
}

TEST_CASE("velocity-bias variance grows with gamma") {
  // Half on / half off cells; for each gamma the spread of v_hat - v_true
  // pools alphas, stages and times. Variance should rise with gamma up to
  // one inversion.
  const int n_gamma = 10, n_alpha = 32, cells = 800;
  std::vector<double> variances;
  EmConfig em_cfg;
  em_cfg.workers = 2;
  // One alpha sample shared by every gamma group, as in the protocol.
  CounterRng arng(500);
  Eigen::VectorXd alphas(n_alpha);
  for (int i = 0; i < n_alpha; ++i) {
    alphas[i] = std::exp(3.0 + 0.1 * arng.normal());
  }
  for (int gi = 0; gi < n_gamma; ++gi) {
    const double gamma = 1.6 + 0.1 * gi;
    SimConfig sim;
    sim.n_cells = cells;
    sim.n_genes = n_alpha;
    sim.param_law.kind = ParamLaw::Kind::Grid;
    sim.param_law.alpha_grid = alphas;
    sim.param_law.beta_grid = Eigen::VectorXd::Constant(1, 1.0);
    sim.param_law.gamma_grid = Eigen::VectorXd::Constant(1, gamma);
    sim.time_law.median_tau = false;
    sim.time_law.fixed_T = kNearSteadyTime;
    sim.noise_sigma = 0.2;
    sim.stage_plan = StagePlan::HalfHalf;
    sim.seed = 900 + gi;
    auto ds = generate(sim);

    // Infer each stage half on its own.
    const int half = cells / 2;
    ExpressionDataset on_half, off_half;
    on_half.U = ds.U.topRows(half);
    on_half.S = ds.S.topRows(half);
    off_half.U = ds.U.bottomRows(cells - half);
    off_half.S = ds.S.bottomRows(cells - half);
    EmConfig on_cfg = em_cfg;
    on_cfg.stage = Stage::On;
    EmConfig off_cfg = em_cfg;
    off_cfg.stage = Stage::Off;
    auto em_on = em_infer(on_half, on_cfg);
    auto em_off = em_infer(off_half, off_cfg);

    SimConfig noiseless = sim;
    noiseless.noise_sigma = 0.0;
    auto truth = generate(noiseless);
    double acc = 0.0, acc2 = 0.0;
    long count = 0;
    for (int g = 0; g < n_alpha; ++g) {
      for (int c = 0; c < cells; ++c) {
        const auto& em = c < half ? em_on : em_off;
        const double ghat = em.kinetics_hat[g].gamma;
        const double vhat = ds.U(c, g) - ghat * ds.S(c, g);
        const double vtrue = truth.U(c, g) - gamma * truth.S(c, g);
        const double bias = vhat - vtrue;
        acc += bias;
        acc2 += bias * bias;
        ++count;
      }
    }
    const double mean = acc / count;
    variances.push_back(acc2 / count - mean * mean);
  }
  int inversions = 0;
  for (std::size_t i = 1; i < variances.size(); ++i) {
    if (variances[i] < variances[i - 1]) ++inversions;
  }
  CHECK(inversions <= 1);
}
