#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "velokit/errors.hpp"
#include "velokit/hitting.hpp"
#include "velokit/inference.hpp"
#include "velokit/kernelwalk.hpp"
#include "velokit/rescale.hpp"
#include "velokit/synth.hpp"
#include "velokit/uq.hpp"

// File formats: matrices and series go to CSV (UTF-8, '.' decimal, header
// row carries column ids), structured results to JSON. Values are printed
// with %.17g so that identical numbers round-trip bit-exactly.

namespace velokit {

using json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

namespace io {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> gene_ids(Eigen::Index d) {
  std::vector<std::string> ids(static_cast<std::size_t>(d));
  for (Eigen::Index g = 0; g < d; ++g) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "gene_%04d", static_cast<int>(g));
    ids[static_cast<std::size_t>(g)] = buf;
  }
  return ids;
}

inline void write_matrix_csv(const std::filesystem::path& path,
                             const Eigen::MatrixXd& m,
                             const std::vector<std::string>& headers) {
  if (static_cast<Eigen::Index>(headers.size()) != m.cols()) {
    throw config_error("write_matrix_csv: header count mismatch");
  }
  std::ofstream out(path);
  if (!out) throw config_error("cannot open for writing: " + path.string());
  for (std::size_t i = 0; i < headers.size(); ++i) {
    out << (i ? "," : "") << headers[i];
  }
  out << "\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out << (c ? "," : "") << format_double(m(r, c));
    }
    out << "\n";
  }
  if (!out) throw config_error("write failed: " + path.string());
}

struct CsvMatrix {
  Eigen::MatrixXd values;
  std::vector<std::string> headers;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline CsvMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw config_error("empty CSV: " + path.string());
  CsvMatrix out;
  out.headers = split_csv_line(line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != out.headers.size()) {
      throw config_error("ragged CSV row in " + path.string());
    }
    std::vector<double> row(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      try {
        row[i] = std::stod(cells[i]);
      } catch (const std::exception&) {
        throw config_error("non-numeric cell '" + cells[i] + "' in " +
                           path.string());
      }
    }
    rows.push_back(std::move(row));
  }
  out.values.resize(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(out.headers.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      out.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          rows[r][c];
    }
  }
  return out;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw config_error("bad JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

// ---------------------------------------------------------------------------
// key = value config files ("#" comments). Unknown keys are rejected so that
// typos fail loudly; the accepted keys are documented in the repo README.
// ---------------------------------------------------------------------------

using KvMap = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  const auto b = s.find_last_not_of(" \t");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline KvMap parse_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config: " + path.string());
  KvMap kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw config_error(path.string() + ":" + std::to_string(lineno) +
                         ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw config_error(path.string() + ":" + std::to_string(lineno) +
                         ": empty key");
    }
    kv[key] = val;
  }
  return kv;
}

class KvReader {
 public:
  explicit KvReader(KvMap kv, std::string origin)
      : kv_(std::move(kv)), origin_(std::move(origin)) {}

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }

  double num(const std::string& key, double fallback) {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw config_error(origin_ + ": key '" + key + "' is not a number");
    }
  }

  long integer(const std::string& key, long fallback) {
    const double v = num(key, static_cast<double>(fallback));
    return static_cast<long>(v);
  }

  // Accepts "a,b,c" lists and MATLAB-style "start:step:stop" ranges.
  Eigen::VectorXd grid(const std::string& key) {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) {
      throw config_error(origin_ + ": missing key '" + key + "'");
    }
    return parse_grid(it->second, key);
  }

  Eigen::VectorXd grid_or(const std::string& key, double fallback) {
    used_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) {
      return Eigen::VectorXd::Constant(1, fallback);
    }
    return parse_grid(it->second, key);
  }

  void finish() const {
    for (const auto& [key, value] : kv_) {
      (void)value;
      if (!used_.count(key)) {
        throw config_error(origin_ + ": unknown key '" + key + "'");
      }
    }
  }

  Eigen::VectorXd parse_grid(const std::string& text, const std::string& key) {
    const auto colon = text.find(':');
    try {
      if (colon != std::string::npos) {
        const auto colon2 = text.find(':', colon + 1);
        if (colon2 == std::string::npos) {
          throw config_error("expected start:step:stop");
        }
        const double start = std::stod(text.substr(0, colon));
        const double step = std::stod(text.substr(colon + 1, colon2 - colon - 1));
        const double stop = std::stod(text.substr(colon2 + 1));
        if (!(step > 0.0) || stop < start) {
          throw config_error("bad range");
        }
        std::vector<double> vals;
        for (double v = start; v <= stop + 1e-12 * std::abs(step); v += step) {
          vals.push_back(v);
        }
        return Eigen::Map<Eigen::VectorXd>(vals.data(),
                                           static_cast<Eigen::Index>(vals.size()));
      }
      std::vector<double> vals;
      std::stringstream ss(text);
      std::string cell;
      while (std::getline(ss, cell, ',')) vals.push_back(std::stod(trim(cell)));
      if (vals.empty()) throw config_error("empty list");
      return Eigen::Map<Eigen::VectorXd>(vals.data(),
                                         static_cast<Eigen::Index>(vals.size()));
    } catch (const config_error&) {
      throw;
    } catch (const std::exception&) {
      throw config_error(origin_ + ": cannot parse grid '" + key + "'");
    }
  }

 private:
  KvMap kv_;
  std::string origin_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Typed config builders
// ---------------------------------------------------------------------------

inline StagePlan stage_plan_from(const std::string& name) {
  if (name == "on") return StagePlan::AllOn;
  if (name == "off") return StagePlan::AllOff;
  if (name == "half") return StagePlan::HalfHalf;
  if (name == "bifurcation") return StagePlan::Bifurcation;
  throw config_error("unknown stage_plan: " + name);
}

inline Stage stage_from(const std::string& name) {
  if (name == "on") return Stage::On;
  if (name == "off") return Stage::Off;
  if (name == "auto") return Stage::Auto;
  throw config_error("unknown stage: " + name);
}

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::On: return "on";
    case Stage::Off: return "off";
    default: return "auto";
  }
}

inline SimConfig sim_config_from_kv(KvReader& r) {
  SimConfig cfg;
  cfg.n_cells = static_cast<int>(r.integer("n_cells", 0));
  cfg.n_genes = static_cast<int>(r.integer("n_genes", 0));
  cfg.seed = static_cast<std::uint64_t>(r.integer("seed", 0));
  cfg.noise_sigma = r.num("noise_sigma", 0.0);
  cfg.stage_plan = stage_plan_from(r.str("stage_plan", "on"));
  cfg.bifurcation_off_fraction = r.num("off_fraction", 0.7);

  const std::string law = r.str("param_law", "lognormal");
  if (law == "lognormal") {
    cfg.param_law.kind = ParamLaw::Kind::LogNormal;
    const Eigen::VectorXd mu = r.grid_or("mu", 0.0);
    if (mu.size() == 3) cfg.param_law.mu = mu;
    if (r.has("sigma")) {
      const Eigen::VectorXd s = r.grid("sigma");
      if (s.size() != 9) {
        throw config_error("sigma must have 9 row-major entries");
      }
      cfg.param_law.sigma =
          Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(
              s.data());
    }
  } else if (law == "grid") {
    cfg.param_law.kind = ParamLaw::Kind::Grid;
    cfg.param_law.alpha_grid = r.grid("alpha_grid");
    cfg.param_law.beta_grid = r.grid_or("beta_grid", 1.0);
    cfg.param_law.gamma_grid = r.grid("gamma_grid");
  } else {
    throw config_error("param_law must be lognormal or grid");
  }

  const std::string tl = r.str("time_law", "median_tau");
  if (tl == "median_tau") {
    cfg.time_law.median_tau = true;
  } else if (tl == "fixed") {
    cfg.time_law.median_tau = false;
    cfg.time_law.fixed_T = r.num("T", 0.0);
  } else {
    throw config_error("time_law must be median_tau or fixed");
  }
  return cfg;
}

inline EmConfig em_config_from_kv(KvReader& r) {
  EmConfig cfg;
  cfg.stage = stage_from(r.str("stage", "auto"));
  cfg.t_horizon = r.num("t_horizon", cfg.t_horizon);
  cfg.grid_size = static_cast<int>(r.integer("grid_size", cfg.grid_size));
  cfg.max_iters = static_cast<int>(r.integer("max_iters", cfg.max_iters));
  cfg.rel_tol = r.num("rel_tol", cfg.rel_tol);
  cfg.proj_tol = r.num("proj_tol", cfg.proj_tol);
  cfg.gn_max_iters =
      static_cast<int>(r.integer("gn_max_iters", cfg.gn_max_iters));
  cfg.multistart_keep =
      static_cast<int>(r.integer("multistart_keep", cfg.multistart_keep));
  return cfg;
}

// ---------------------------------------------------------------------------
// Dataset directory: U.csv, S.csv, truth.json
// ---------------------------------------------------------------------------

inline const char* stage_plan_name(StagePlan p) {
  switch (p) {
    case StagePlan::AllOn: return "on";
    case StagePlan::AllOff: return "off";
    case StagePlan::HalfHalf: return "half";
    default: return "bifurcation";
  }
}

inline void write_dataset(const std::filesystem::path& dir,
                          const ExpressionDataset& ds, const SimConfig& cfg) {
  std::filesystem::create_directories(dir);
  const auto ids = gene_ids(ds.U.cols());
  write_matrix_csv(dir / "U.csv", ds.U, ids);
  write_matrix_csv(dir / "S.csv", ds.S, ids);

  json truth;
  truth["n_cells"] = ds.U.rows();
  truth["n_genes"] = ds.U.cols();
  truth["seed"] = cfg.seed;
  truth["noise_sigma"] = cfg.noise_sigma;
  truth["stage_plan"] = stage_plan_name(cfg.stage_plan);
  truth["time_horizon"] = ds.time_horizon;
  truth["true_times"] =
      std::vector<double>(ds.true_times.data(),
                          ds.true_times.data() + ds.true_times.size());
  json kin;
  for (const auto& k : ds.true_kinetics) {
    kin["alpha"].push_back(k.alpha_on);
    kin["beta"].push_back(k.beta);
    kin["gamma"].push_back(k.gamma);
    kin["t_switch"].push_back(std::isfinite(k.t_switch) ? k.t_switch : -1.0);
  }
  truth["true_kinetics"] = kin;
  if (!ds.stage_labels.empty()) truth["stage_labels"] = ds.stage_labels;
  if (!ds.branch_labels.empty()) truth["branch_labels"] = ds.branch_labels;
  if (!ds.branch1_off_genes.empty()) {
    truth["branch1_off_genes"] = ds.branch1_off_genes;
  }
  write_json(dir / "truth.json", truth);
}

inline ExpressionDataset read_dataset(const std::filesystem::path& dir) {
  ExpressionDataset ds;
  ds.U = read_matrix_csv(dir / "U.csv").values;
  ds.S = read_matrix_csv(dir / "S.csv").values;
  if (ds.U.rows() != ds.S.rows() || ds.U.cols() != ds.S.cols()) {
    throw config_error("dataset: U and S shapes differ");
  }
  const auto truth_path = dir / "truth.json";
  if (std::filesystem::exists(truth_path)) {
    const json truth = read_json(truth_path);
    if (truth.contains("true_times")) {
      const auto v = truth["true_times"].get<std::vector<double>>();
      ds.true_times = Eigen::Map<const Eigen::VectorXd>(
          v.data(), static_cast<Eigen::Index>(v.size()));
    }
    if (truth.contains("time_horizon")) {
      ds.time_horizon = truth["time_horizon"].get<double>();
    }
    if (truth.contains("true_kinetics")) {
      const auto& kin = truth["true_kinetics"];
      const auto alpha = kin["alpha"].get<std::vector<double>>();
      const auto beta = kin["beta"].get<std::vector<double>>();
      const auto gamma = kin["gamma"].get<std::vector<double>>();
      const auto ts = kin["t_switch"].get<std::vector<double>>();
      ds.true_kinetics.resize(alpha.size());
      for (std::size_t g = 0; g < alpha.size(); ++g) {
        ds.true_kinetics[g] = GeneKineticsd{
            alpha[g], beta[g], gamma[g],
            ts[g] < 0 ? std::numeric_limits<double>::infinity() : ts[g]};
      }
    }
    if (truth.contains("stage_labels")) {
      ds.stage_labels = truth["stage_labels"].get<std::vector<int>>();
    }
    if (truth.contains("branch_labels")) {
      ds.branch_labels = truth["branch_labels"].get<std::vector<int>>();
    }
    if (truth.contains("branch1_off_genes")) {
      ds.branch1_off_genes =
          truth["branch1_off_genes"].get<std::vector<int>>();
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Result writers / readers
// ---------------------------------------------------------------------------

inline void write_em_result(const std::filesystem::path& dir,
                            const EmResult& em) {
  std::filesystem::create_directories(dir);
  write_matrix_csv(dir / "time_matrix.csv", em.time_matrix,
                   gene_ids(em.time_matrix.cols()));
  json j;
  for (const auto& k : em.kinetics_hat) {
    j["kinetics"]["alpha"].push_back(k.alpha_on);
    j["kinetics"]["beta"].push_back(k.beta);
    j["kinetics"]["gamma"].push_back(k.gamma);
  }
  for (Stage s : em.gene_stage) j["stage"].push_back(stage_name(s));
  j["loss"] = em.loss;
  j["iters"] = em.iters;
  j["converged"] = em.converged;
  j["gene_converged"] = std::vector<int>(em.gene_converged.begin(),
                                         em.gene_converged.end());
  j["time_matrix_csv"] = "time_matrix.csv";
  write_json(dir / "em.json", j);
}

inline EmResult read_em_result(const std::filesystem::path& dir) {
  const json j = read_json(dir / "em.json");
  EmResult em;
  const auto alpha = j["kinetics"]["alpha"].get<std::vector<double>>();
  const auto beta = j["kinetics"]["beta"].get<std::vector<double>>();
  const auto gamma = j["kinetics"]["gamma"].get<std::vector<double>>();
  const auto stages = j["stage"].get<std::vector<std::string>>();
  em.kinetics_hat.resize(alpha.size());
  em.gene_stage.resize(alpha.size());
  for (std::size_t g = 0; g < alpha.size(); ++g) {
    const Stage st = stage_from(stages[g]);
    em.kinetics_hat[g] = GeneKineticsd{
        alpha[g], beta[g], gamma[g],
        st == Stage::On ? std::numeric_limits<double>::infinity() : 0.0};
    em.gene_stage[g] = st;
  }
  em.loss = j["loss"].get<double>();
  em.iters = j["iters"].get<int>();
  em.converged = j["converged"].get<bool>();
  const auto gc = j["gene_converged"].get<std::vector<int>>();
  em.gene_converged.assign(gc.begin(), gc.end());
  em.time_matrix =
      read_matrix_csv(dir / j["time_matrix_csv"].get<std::string>()).values;
  return em;
}

inline void write_rescale_result(const std::filesystem::path& dir,
                                 const RescaleResult& res) {
  std::filesystem::create_directories(dir);
  Eigen::MatrixXd t_star = res.t_star;
  t_star.resize(res.t_star.size(), 1);
  write_matrix_csv(dir / "t_star.csv", t_star, {"t_star"});
  json j;
  j["proposal"] = res.proposal;
  j["beta_star"] = std::vector<double>(
      res.beta_star.data(), res.beta_star.data() + res.beta_star.size());
  j["kept_genes"] = res.kept_genes;
  j["skipped_genes"] = res.skipped_genes;
  j["objective"] = res.objective;
  j["top_eigenvalue"] = res.top_eigenvalue;
  j["power_iterations"] = res.power_iterations;
  j["normalization"] =
      res.proposal == 1 ? "t_star has unit norm" : "beta_star has unit norm";
  j["t_star_csv"] = "t_star.csv";
  write_json(dir / "rescale.json", j);
}

inline json sem_to_json(const SemResult& r, int gene, Stage stage) {
  json j;
  j["gene"] = gene;
  j["stage"] = stage_name(stage);
  j["params"] = {"alpha", "gamma"};
  j["theta_hat"] = {r.theta_hat[0], r.theta_hat[1]};
  auto mat = [](const Eigen::Matrix2d& m) {
    return json::array({json::array({m(0, 0), m(0, 1)}),
                        json::array({m(1, 0), m(1, 1)})});
  };
  j["I_oc"] = mat(r.I_oc);
  j["J_M"] = mat(r.J_M);
  j["V_hat"] = mat(r.V_hat);
  for (int i = 0; i < 2; ++i) {
    const char* name = i == 0 ? "alpha" : "gamma";
    if (r.ci_valid[i]) {
      j["ci95"][name] = {r.ci95[i][0], r.ci95[i][1]};
    } else {
      j["ci95"][name] = nullptr;
    }
  }
  j["pd"] = r.pd_flag;
  j["sigma2_hat"] = r.sigma2_hat;
  j["n_cells"] = r.n_cells;
  return j;
}

inline void write_hitting_result(const std::filesystem::path& dir,
                                 const HittingResult& res) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "hitting.csv");
  out << "state,k,converged\n";
  for (Eigen::Index i = 0; i < res.k.size(); ++i) {
    out << i << "," << format_double(res.k[i]) << ","
        << static_cast<int>(res.converged[static_cast<std::size_t>(i)])
        << "\n";
  }
  json j;
  j["iters"] = res.iters;
  j["all_converged"] = res.all_converged;
  j["divergent"] = res.divergent;
  j["min_increment"] = res.min_increment;
  if (res.rcond >= 0) j["rcond"] = res.rcond;
  write_json(dir / "hitting.json", j);
}

inline std::vector<int> read_index_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open index file: " + path.string());
  std::vector<int> out;
  std::string tok;
  while (in >> tok) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw config_error("bad index '" + tok + "' in " + path.string());
    }
  }
  return out;
}

}  // namespace io
}  // namespace velokit
