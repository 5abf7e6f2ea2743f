#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "velokit/errors.hpp"
#include "velokit/parallel.hpp"
#include "velokit/quadrature.hpp"
#include "velokit/rng.hpp"
#include "velokit/synth.hpp"

// Velocity-kernel random walk: k_eps(x_i, x_j) = h(||d||^2 / eps) *
// g(cos<d, v_i>) with row normalization, its discrete generator
// (P f - f)/sqrt(eps), and the kernel moment constants m0, m1 that set the
// drift magnitude of the continuum limit (m1/m0) v_hat . grad f.

namespace velokit {

using KernelFn = double (*)(double);

inline KernelFn velocity_kernel_fn(const std::string& name) {
  if (name == "exp") return +[](double x) { return std::exp(x); };
  if (name == "one") return +[](double) { return 1.0; };
  throw config_error("unknown velocity kernel g: " + name);
}

inline KernelFn diffusion_kernel_fn(const std::string& name) {
  if (name == "exp-neg") return +[](double x) { return std::exp(-x); };
  throw config_error("unknown diffusion kernel h: " + name);
}

struct KernelSpec {
  double epsilon = 0.0;
  std::string g_name = "exp";
  std::string h_name = "exp-neg";
  int d = 0;  // ambient dimension
  bool include_diagonal = true;   // self-weight h(0) g(0) with cos := 0
  bool zero_velocity_fallback = false;

  void validate() const {
    if (!(epsilon > 0.0)) throw config_error("KernelSpec: epsilon > 0");
    velocity_kernel_fn(g_name);
    diffusion_kernel_fn(h_name);
  }
};

struct CellGraph {
  Eigen::MatrixXd P;  // row-stochastic
  KernelSpec kernel;
  Eigen::MatrixXd points;      // n x d
  Eigen::MatrixXd velocities;  // n x d
};

struct MomentConstants {
  double m0 = 0.0;
  double m1 = 0.0;
  double m0_sq = 0.0;  // same integrals with h^2, g^2
  double m1_sq = 0.0;
};

namespace detail {

// Squared distances and g(cos) factors; the epsilon-independent part of the
// kernel, shared by build_graph and the bandwidth sweep.
struct PairCache {
  Eigen::MatrixXd sqdist;
  Eigen::MatrixXd gcos;
};

inline PairCache pairwise_cache(const Eigen::MatrixXd& points,
                                const Eigen::MatrixXd& velocities,
                                const KernelSpec& spec) {
  const Eigen::Index n = points.rows();
  if (velocities.rows() != n || velocities.cols() != points.cols()) {
    throw config_error("build_graph: points/velocities shape mismatch");
  }
  const KernelFn g = velocity_kernel_fn(spec.g_name);
  Eigen::VectorXd vnorm = velocities.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (vnorm[i] == 0.0) {
      if (!spec.zero_velocity_fallback) {
        throw numeric_error("build_graph: zero velocity at point " +
                            std::to_string(i));
      }
      vnorm[i] = 1.0;  // fallback: cos term degrades to g(0)
    }
  }
  PairCache cache;
  const Eigen::MatrixXd gram = points * points.transpose();
  const Eigen::VectorXd nrm2 = gram.diagonal();
  cache.sqdist = (nrm2.replicate(1, n) + nrm2.transpose().replicate(n, 1) -
                  2.0 * gram)
                     .cwiseMax(0.0);
  // dots(i, j) = (x_j - x_i) . v_i
  const Eigen::MatrixXd a = velocities * points.transpose();  // a(i,j)=v_i.x_j
  cache.gcos.resize(n, n);
  const double g0 = g(0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d2 = cache.sqdist(i, j);
      if (i == j || d2 == 0.0) {
        cache.gcos(i, j) = g0;  // displacement undefined: cos := 0
        continue;
      }
      const double c = (a(i, j) - a(i, i)) / (std::sqrt(d2) * vnorm[i]);
      cache.gcos(i, j) = g(std::clamp(c, -1.0, 1.0));
    }
  }
  return cache;
}

inline Eigen::MatrixXd transition_from_cache(const PairCache& cache,
                                             const KernelSpec& spec) {
  const KernelFn h = diffusion_kernel_fn(spec.h_name);
  const Eigen::Index n = cache.sqdist.rows();
  Eigen::MatrixXd P(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      double k = 0.0;
      if (i != j || spec.include_diagonal) {
        k = h(cache.sqdist(i, j) / spec.epsilon) * cache.gcos(i, j);
      }
      P(i, j) = k;
      row_sum += k;
    }
    if (!(row_sum > 0.0)) {
      throw numeric_error("build_graph: row " + std::to_string(i) +
                          " has zero kernel mass; increase epsilon");
    }
    P.row(i) /= row_sum;
  }
  return P;
}

}  // namespace detail

inline CellGraph build_graph(const Eigen::MatrixXd& points,
                             const Eigen::MatrixXd& velocities,
                             const KernelSpec& spec_in) {
  KernelSpec spec = spec_in;
  if (spec.d == 0) spec.d = static_cast<int>(points.cols());
  spec.validate();
  CellGraph graph;
  graph.kernel = spec;
  graph.points = points;
  graph.velocities = velocities;
  const detail::PairCache cache =
      detail::pairwise_cache(points, velocities, spec);
  graph.P = detail::transition_from_cache(cache, spec);
  return graph;
}

// Surface area of the unit sphere in R^d.
inline double sphere_area(int d) {
  return 2.0 * std::pow(M_PI, d / 2.0) / std::tgamma(d / 2.0);
}

// Radial and angular kernel moments (appendix constants). The radial
// integral is truncated where h(r^2) r^d drops below 1e-14.
inline MomentConstants moment_constants(const KernelSpec& spec) {
  if (spec.d < 2) {
    throw config_error("moment_constants: derived for dimension d > 1");
  }
  const KernelFn g = velocity_kernel_fn(spec.g_name);
  const KernelFn h = diffusion_kernel_fn(spec.h_name);
  const int d = spec.d;

  double r_max = 1.0;
  while (h(r_max * r_max) * std::pow(r_max, d) >= 1e-14 && r_max < 1e6) {
    r_max *= 2.0;
  }

  auto radial = [&](int power, bool squared) {
    return integrate(
        [&](double r) {
          const double hv = h(r * r);
          return std::pow(r, power) * (squared ? hv * hv : hv);
        },
        0.0, r_max, 1e-12);
  };
  auto angular = [&](int cos_power, bool squared) {
    return integrate(
        [&](double th) {
          const double gv = g(std::cos(th));
          const double sinp = std::pow(std::abs(std::sin(th)), d - 2);
          const double cosp = cos_power == 0 ? 1.0 : std::cos(th);
          return cosp * sinp * (squared ? gv * gv : gv);
        },
        -M_PI, M_PI, 1e-12);
  };

  const double sin_only = integrate(
      [&](double th) { return std::pow(std::abs(std::sin(th)), d - 2); },
      -M_PI, M_PI, 1e-12);
  const double c_d = sphere_area(d) / sin_only;

  MomentConstants mc;
  mc.m0 = c_d * radial(d - 1, false) * angular(0, false);
  mc.m1 = c_d * radial(d, false) * angular(1, false);
  mc.m0_sq = c_d * radial(d - 1, true) * angular(0, true);
  mc.m1_sq = c_d * radial(d, true) * angular(1, true);
  if (!(mc.m0 > 0.0) || !std::isfinite(mc.m1)) {
    throw numeric_error("moment_constants: degenerate moments");
  }
  return mc;
}

// Discrete generator (P f - f)/sqrt(eps), written as sum_j p_ij (f_j - f_i)
// so that constants are annihilated exactly.
inline Eigen::VectorXd discrete_generator(const Eigen::MatrixXd& P,
                                          const Eigen::VectorXd& f_values,
                                          const Eigen::VectorXd& f_at_x,
                                          double epsilon) {
  if (P.rows() != P.cols() || P.rows() != f_values.size() ||
      f_at_x.size() != f_values.size()) {
    throw config_error("discrete_generator: shape mismatch");
  }
  if (!(epsilon > 0.0)) throw config_error("discrete_generator: epsilon > 0");
  const double inv = 1.0 / std::sqrt(epsilon);
  Eigen::VectorXd out(f_values.size());
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      acc += P(i, j) * (f_values[j] - f_at_x[i]);
    }
    out[i] = acc * inv;
  }
  return out;
}

inline Eigen::VectorXd discrete_generator(const CellGraph& graph,
                                          const Eigen::VectorXd& f_values) {
  return discrete_generator(graph.P, f_values, f_values,
                            graph.kernel.epsilon);
}

// Continuum drift (m1/m0) v_hat . grad f.
inline double continuum_generator(const Eigen::VectorXd& velocity,
                                  const Eigen::VectorXd& grad_f,
                                  const MomentConstants& mc) {
  const double vn = velocity.norm();
  if (vn == 0.0) throw numeric_error("continuum_generator: zero velocity");
  return mc.m1 / mc.m0 * velocity.dot(grad_f) / vn;
}

// Registered test observables: f1 = sum of coordinates, f2 = square of the
// last coordinate.
struct TestFunction {
  std::string name;
  std::function<double(const Eigen::VectorXd&)> f;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> grad;
};

inline TestFunction test_function(const std::string& name, int d) {
  if (name == "f1") {
    return {name, [](const Eigen::VectorXd& x) { return x.sum(); },
            [d](const Eigen::VectorXd&) {
              return Eigen::VectorXd::Ones(d).eval();
            }};
  }
  if (name == "f2") {
    return {name,
            [d](const Eigen::VectorXd& x) { return x[d - 1] * x[d - 1]; },
            [d](const Eigen::VectorXd& x) {
              Eigen::VectorXd g = Eigen::VectorXd::Zero(d);
              g[d - 1] = 2.0 * x[d - 1];
              return g;
            }};
  }
  throw config_error("unknown test function: " + name);
}

// Optimal bandwidth for n samples in dimension d.
inline double optimal_epsilon(double n, int d) {
  if (!(n >= 1.0) || d < 1) throw config_error("optimal_epsilon: bad input");
  return std::pow(n, -2.0 / (d + 2));
}

// Data for the sweep. Section43 is the RNA protocol: d genes with
// alpha_g = 20 + 0.5 g, beta = 1, gamma_g = 1.5 + 0.05 g, shared cell times
// uniform on [0, 2 ln 10], dynamics rescaled to max entry 1, then Gaussian
// coordinate noise (std 0.5) and velocities beta u - gamma x. The epsilon
// grid below only couples neighbors on O(1)-scale coordinates, hence the
// rescaling; on raw counts the kernel starves.
//
// UniformField draws points uniformly in the unit box with a smooth
// synthetic velocity field. This is the configuration that satisfies the
// hypotheses of the convergence theorem (smooth density, no thin manifold),
// and the one on which the -3/4 variance law is quantitatively visible at
// n = 2000; errors are evaluated away from the box boundary.
enum class SweepData { Section43, UniformField };

struct SweepConfig {
  int n = 2000;
  int d = 3;
  double eps_start = 0.002;
  double eps_step = 0.002;
  double eps_stop = 0.082;
  std::string fn = "f1";
  std::string g_name = "exp";
  std::string h_name = "exp-neg";
  SweepData data = SweepData::Section43;
  double coord_noise_sd = 0.5;  // std of the coordinate noise (Section43)
  std::uint64_t seed = 0;
  // Regression window for the variance-dominated regime.
  double fit_window_factor = 0.8;
  // UniformField: points this close to a box face are skipped when the
  // error is averaged, so boundary bias does not mask the interior law.
  double boundary_margin = 0.2;
  unsigned workers = 0;

  void validate() const {
    if (n < 8) throw config_error("SweepConfig: n >= 8");
    if (d < 2) throw config_error("SweepConfig: d >= 2");
    if (!(eps_start > 0.0) || !(eps_step > 0.0) || eps_stop < eps_start) {
      throw config_error("SweepConfig: bad epsilon grid");
    }
  }
};

struct SweepSamples {
  Eigen::MatrixXd points;
  Eigen::MatrixXd velocities;
  std::vector<char> evaluate;  // include this point in the error average
};

inline SweepSamples sweep_samples(const SweepConfig& cfg) {
  cfg.validate();
  SweepSamples out;
  out.points.resize(cfg.n, cfg.d);
  out.velocities.resize(cfg.n, cfg.d);
  out.evaluate.assign(static_cast<std::size_t>(cfg.n), 1);
  CounterRng root(cfg.seed);
  CounterRng times = root.substream(1);
  CounterRng noise = root.substream(2);

  if (cfg.data == SweepData::Section43) {
    Eigen::MatrixXd u(cfg.n, cfg.d), s(cfg.n, cfg.d);
    for (int k = 0; k < cfg.n; ++k) {
      const double t = times.uniform(0.0, kNearSteadyTime);
      for (int g = 0; g < cfg.d; ++g) {
        GeneKineticsd kin{20.0 + 0.5 * g, 1.0, 1.5 + 0.05 * g,
                          std::numeric_limits<double>::infinity()};
        const StateUSd z = solve_on_stage(t, kin, StateUSd{0.0, 0.0});
        u(k, g) = z.u;
        s(k, g) = z.s;
      }
    }
    const double scale = s.cwiseAbs().maxCoeff();
    u /= scale;
    s /= scale;
    for (int k = 0; k < cfg.n; ++k) {
      for (int g = 0; g < cfg.d; ++g) {
        const double gamma = 1.5 + 0.05 * g;
        const double x = s(k, g) + cfg.coord_noise_sd * noise.normal();
        out.points(k, g) = x;
        out.velocities(k, g) = u(k, g) - gamma * x;
      }
    }
    return out;
  }

  // UniformField
  for (int k = 0; k < cfg.n; ++k) {
    bool interior = true;
    for (int g = 0; g < cfg.d; ++g) {
      const double x = times.uniform();
      out.points(k, g) = x;
      if (x < cfg.boundary_margin || x > 1.0 - cfg.boundary_margin) {
        interior = false;
      }
    }
    for (int g = 0; g < cfg.d; ++g) {
      const double x0 = out.points(k, 0);
      const double xg = out.points(k, g);
      out.velocities(k, g) =
          g == 0 ? 1.0 + 0.3 * std::sin(3.0 * out.points(k, cfg.d - 1))
                 : 0.5 + 0.2 * x0 - 0.3 * (xg - 0.5);
    }
    out.evaluate[static_cast<std::size_t>(k)] = interior ? 1 : 0;
  }
  return out;
}

struct SweepResult {
  Eigen::VectorXd epsilons;
  Eigen::VectorXd errors;  // RMS of L_{eps,n} f - L f over the samples
  double slope = 0.0;
  double intercept = 0.0;
  double argmin_ln_eps = 0.0;
  double optimal_eps = 0.0;
  int n_fit = 0;
};

// RMS generator error on given samples at one bandwidth, averaged over the
// points marked for evaluation.
inline double generator_rms_error(const SweepSamples& samples,
                                  const detail::PairCache& cache,
                                  KernelSpec spec, const TestFunction& fn,
                                  const MomentConstants& mc) {
  const Eigen::Index n = samples.points.rows();
  Eigen::VectorXd fvals(n);
  for (Eigen::Index i = 0; i < n; ++i) fvals[i] = fn.f(samples.points.row(i));
  const Eigen::MatrixXd P = detail::transition_from_cache(cache, spec);
  const Eigen::VectorXd lhs =
      discrete_generator(P, fvals, fvals, spec.epsilon);
  double acc = 0.0;
  long count = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!samples.evaluate[static_cast<std::size_t>(i)]) continue;
    const double ref = continuum_generator(
        samples.velocities.row(i), fn.grad(samples.points.row(i)), mc);
    const double diff = lhs[i] - ref;
    acc += diff * diff;
    ++count;
  }
  if (count == 0) throw numeric_error("sweep: no evaluation points");
  return std::sqrt(acc / static_cast<double>(count));
}

inline SweepResult bandwidth_sweep(const SweepConfig& cfg) {
  cfg.validate();
  const SweepSamples samples = sweep_samples(cfg);
  KernelSpec spec;
  spec.g_name = cfg.g_name;
  spec.h_name = cfg.h_name;
  spec.d = cfg.d;
  spec.epsilon = cfg.eps_start;
  const detail::PairCache cache =
      detail::pairwise_cache(samples.points, samples.velocities, spec);
  const MomentConstants mc = moment_constants(spec);
  const TestFunction fn = test_function(cfg.fn, cfg.d);

  std::vector<double> eps_list;
  for (double e = cfg.eps_start; e <= cfg.eps_stop + 1e-12;
       e += cfg.eps_step) {
    eps_list.push_back(e);
  }
  SweepResult res;
  res.epsilons.resize(static_cast<Eigen::Index>(eps_list.size()));
  res.errors.resize(static_cast<Eigen::Index>(eps_list.size()));
  parallel_for(eps_list.size(), cfg.workers, [&](std::size_t i) {
    KernelSpec local = spec;
    local.epsilon = eps_list[i];
    res.epsilons[static_cast<Eigen::Index>(i)] = eps_list[i];
    res.errors[static_cast<Eigen::Index>(i)] =
        generator_rms_error(samples, cache, local, fn, mc);
  });

  res.optimal_eps = optimal_epsilon(cfg.n, cfg.d);
  const double window = cfg.fit_window_factor * res.optimal_eps;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (Eigen::Index i = 0; i < res.epsilons.size(); ++i) {
    if (res.epsilons[i] > window) continue;
    const double x = std::log(res.epsilons[i]);
    const double y = std::log(res.errors[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++res.n_fit;
  }
  if (res.n_fit >= 2) {
    const double nfit = res.n_fit;
    res.slope = (nfit * sxy - sx * sy) / (nfit * sxx - sx * sx);
    res.intercept = (sy - res.slope * sx) / nfit;
  }
  Eigen::Index imin = 0;
  res.errors.minCoeff(&imin);
  res.argmin_ln_eps = std::log(res.epsilons[imin]);
  return res;
}

}  // namespace velokit
