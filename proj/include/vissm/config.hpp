#pragma once

// Run configuration: a JSON document with sections model, data, quadrature,
// solver, init, output, oracle, seed and threads. Unknown keys are rejected.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "vissm/error.hpp"
#include "vissm/io.hpp"
#include "vissm/model.hpp"
#include "vissm/models/lgssm.hpp"
#include "vissm/models/pendulum.hpp"
#include "vissm/models/sv.hpp"
#include "vissm/optimizer.hpp"
#include "vissm/parallel.hpp"
#include "vissm/quadrature.hpp"
#include "vissm/reference.hpp"

namespace vissm::config {

using json = nlohmann::json;

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? get<T>(j, key, where) : fallback;
}

inline Eigen::VectorXd vec(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  return io::vector_from(j.at(key), where + "." + key);
}

inline Eigen::MatrixXd mat(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  return io::matrix_from(j.at(key), where + "." + key);
}

// ---------------------------------------------------------------------------
// Model

inline std::unique_ptr<Model> lgssm_from(const json& j) {
  const std::string w = "model";
  check_keys(j, {"kind", "A", "B", "C", "Q", "R", "prior_mean", "prior_cov", "theta"}, w);
  LgssmConfig c;
  c.A = mat(j, "A", w);
  if (j.contains("B")) c.B = mat(j, "B", w);
  c.C = mat(j, "C", w);
  c.Q = mat(j, "Q", w);
  c.R = mat(j, "R", w);
  c.prior_mean = vec(j, "prior_mean", w);
  c.prior_cov = mat(j, "prior_cov", w);
  if (j.contains("theta")) {
    if (!j["theta"].is_array()) throw ConfigError("model.theta: expected an array of slots");
    for (const auto& s : j["theta"]) {
      check_keys(s, {"target", "row", "col"}, "model.theta[]");
      ThetaSlot slot;
      const auto t = get<std::string>(s, "target", "model.theta[]");
      if (t == "A") slot.target = ThetaTarget::A;
      else if (t == "B") slot.target = ThetaTarget::B;
      else if (t == "q_log_sd") slot.target = ThetaTarget::QLogSd;
      else throw ConfigError("model.theta[].target: unknown target '" + t + "' (A, B or q_log_sd)");
      slot.row = get<int>(s, "row", "model.theta[]");
      slot.col = get_or<int>(s, "col", 0, "model.theta[]");
      c.theta_layout.push_back(slot);
    }
  }
  return lgssm_model(std::move(c));
}

inline std::unique_ptr<Model> sv_from(const json& j) {
  const std::string w = "model";
  check_keys(j, {"kind", "theta_prior_mean", "theta_prior_cov", "nonstationary_x1_var"}, w);
  SvConfig c;
  if (j.contains("theta_prior_mean")) {
    const auto m = vec(j, "theta_prior_mean", w);
    if (m.size() != 3) throw ConfigError("model.theta_prior_mean: expected 3 entries");
    c.theta_prior_mean = m;
  }
  if (j.contains("theta_prior_cov")) {
    const auto S = mat(j, "theta_prior_cov", w);
    if (S.rows() != 3 || S.cols() != 3) throw ConfigError("model.theta_prior_cov: expected 3 x 3");
    c.theta_prior_cov = S;
  }
  c.nonstationary_x1_var = get_or<double>(j, "nonstationary_x1_var", c.nonstationary_x1_var, w);
  return sv_model(c);
}

inline PendulumParam pendulum_param(const std::string& name) {
  for (std::size_t i = 0; i < kPendulumParamNames.size(); ++i)
    if (name == kPendulumParamNames[i]) return static_cast<PendulumParam>(i);
  throw ConfigError("model.theta: unknown pendulum parameter '" + name + "'");
}

inline std::unique_ptr<Model> pendulum_from(const json& j) {
  const std::string w = "model";
  check_keys(j, {"kind", "constants", "phi", "theta", "Pi", "Pi_diag", "estimate_noise", "prior_mean", "prior_cov",
                 "sample_time", "substeps"},
             w);
  PendulumConfig c;
  if (j.contains("constants")) {
    const auto& k = j["constants"];
    check_keys(k, {"m_p", "l_p", "l_r", "g"}, "model.constants");
    c.constants.m_p = get_or<double>(k, "m_p", c.constants.m_p, "model.constants");
    c.constants.l_p = get_or<double>(k, "l_p", c.constants.l_p, "model.constants");
    c.constants.l_r = get_or<double>(k, "l_r", c.constants.l_r, "model.constants");
    c.constants.g = get_or<double>(k, "g", c.constants.g, "model.constants");
  }
  if (j.contains("phi")) {
    const auto p = vec(j, "phi", w);
    if (p.size() != 6) throw ConfigError("model.phi: expected 6 entries");
    for (int i = 0; i < 6; ++i) c.phi[static_cast<std::size_t>(i)] = p[i];
  }
  if (j.contains("theta")) {
    if (!j["theta"].is_array()) throw ConfigError("model.theta: expected an array of parameter names");
    for (const auto& n : j["theta"]) {
      if (!n.is_string()) throw ConfigError("model.theta: expected parameter names");
      c.theta_params.push_back(pendulum_param(n.get<std::string>()));
    }
  }
  if (j.contains("Pi") && j.contains("Pi_diag")) throw ConfigError("model: give either Pi or Pi_diag, not both");
  if (j.contains("Pi")) c.Pi = mat(j, "Pi", w);
  else if (j.contains("Pi_diag")) c.Pi = vec(j, "Pi_diag", w).asDiagonal();
  else throw ConfigError("model: missing 'Pi' (or 'Pi_diag')");
  c.estimate_noise = get_or<bool>(j, "estimate_noise", false, w);
  c.prior_mean = vec(j, "prior_mean", w);
  c.prior_cov = mat(j, "prior_cov", w);
  c.sample_time = get_or<double>(j, "sample_time", c.sample_time, w);
  c.substeps = get_or<int>(j, "substeps", c.substeps, w);
  return pendulum_model(std::move(c));
}

inline std::unique_ptr<Model> model_from(const json& j) {
  const auto kind = get<std::string>(j, "kind", "model");
  if (kind == "lgssm") return lgssm_from(j);
  if (kind == "sv") return sv_from(j);
  if (kind == "pendulum") return pendulum_from(j);
  throw ConfigError("model.kind: unknown model '" + kind + "' (lgssm, sv or pendulum)");
}

// ---------------------------------------------------------------------------
// Quadrature, solver, init

inline SchemeConfig scheme_from(const json& j) {
  check_keys(j, {"kind", "alpha", "kappa", "beta"}, "quadrature");
  const auto kind = get_or<std::string>(j, "kind", "cubature5", "quadrature");
  if (kind == "cubature5") {
    if (j.contains("alpha") || j.contains("kappa") || j.contains("beta"))
      throw ConfigError("quadrature: alpha, kappa and beta apply to the unscented rule only");
    return SchemeConfig::cubature5();
  }
  if (kind != "unscented") throw ConfigError("quadrature.kind: unknown rule '" + kind + "' (cubature5 or unscented)");
  SchemeConfig s = SchemeConfig::unscented();
  s.alpha = get_or<double>(j, "alpha", s.alpha, "quadrature");
  s.kappa = get_or<double>(j, "kappa", s.kappa, "quadrature");
  s.beta = get_or<double>(j, "beta", s.beta, "quadrature");
  if (!(s.alpha > 0.0)) throw ConfigError("quadrature.alpha must be positive");
  return s;
}

inline SolverOptions solver_from(const json& j) {
  const std::string w = "solver";
  check_keys(j, {"method", "max_outer", "max_inner", "tol_grad", "tol_constraint", "hessian", "penalty_init",
                 "penalty_growth", "diag_floor", "multipliers", "elimination", "verbosity"},
             w);
  SolverOptions o;
  const auto method = get_or<std::string>(j, "method", "augmented-lagrangian", w);
  if (method == "augmented-lagrangian") o.method = SolverMethod::AugmentedLagrangian;
  else if (method == "sqp") o.method = SolverMethod::Sqp;
  else throw ConfigError("solver.method: unknown method '" + method + "'");
  o.max_outer = get_or<int>(j, "max_outer", o.max_outer, w);
  o.max_inner = get_or<int>(j, "max_inner", o.max_inner, w);
  o.tol_grad = get_or<double>(j, "tol_grad", o.tol_grad, w);
  o.tol_constraint = get_or<double>(j, "tol_constraint", o.tol_constraint, w);
  const auto hess = get_or<std::string>(j, "hessian", "exact", w);
  if (hess == "exact") o.hessian = HessianMode::Exact;
  else if (hess == "gauss-newton") o.hessian = HessianMode::GaussNewton;
  else throw ConfigError("solver.hessian: unknown mode '" + hess + "' (exact or gauss-newton)");
  o.penalty_init = get_or<double>(j, "penalty_init", o.penalty_init, w);
  o.penalty_growth = get_or<double>(j, "penalty_growth", o.penalty_growth, w);
  o.diag_floor = get_or<double>(j, "diag_floor", o.diag_floor, w);
  const auto mult = get_or<std::string>(j, "multipliers", "zero", w);
  if (mult == "zero") o.multipliers = MultiplierInit::Zero;
  else if (mult == "least-squares") o.multipliers = MultiplierInit::LeastSquares;
  else throw ConfigError("solver.multipliers: unknown initialization '" + mult + "'");
  const auto elim = get_or<std::string>(j, "elimination", "none", w);
  if (elim == "none") o.elimination = Elimination::None;
  else if (elim == "linear") o.elimination = Elimination::Linear;
  else if (elim == "full") o.elimination = Elimination::Full;
  else throw ConfigError("solver.elimination: unknown mode '" + elim + "' (none, linear or full)");
  o.verbosity = get_or<int>(j, "verbosity", 0, w);
  o.validate();
  return o;
}

inline InitOptions init_from(const json& j) {
  check_keys(j, {"state_scale", "theta_scale", "theta_mean", "x1_mean", "eta"}, "init");
  InitOptions o;
  o.state_scale = get_or<double>(j, "state_scale", o.state_scale, "init");
  o.theta_scale = get_or<double>(j, "theta_scale", o.theta_scale, "init");
  if (j.contains("theta_mean")) o.theta_mean = vec(j, "theta_mean", "init");
  if (j.contains("x1_mean")) o.x1_mean = vec(j, "x1_mean", "init");
  if (j.contains("eta")) o.eta = vec(j, "eta", "init");
  return o;
}

// ---------------------------------------------------------------------------
// Data

struct InputSpec {
  std::string kind = "zero";  // zero | sine | normal
  double amplitude = 1.0;
  double period = 100.0;  // in steps
  double sd = 1.0;
};

struct SimulateSpec {
  int T = 0;
  Eigen::VectorXd theta;
  Eigen::VectorXd eta;
  std::uint64_t seed = 0;
  InputSpec inputs;
};

struct DataSpec {
  std::optional<std::string> path;
  std::optional<SimulateSpec> simulate;
};

inline std::vector<Eigen::VectorXd> make_inputs(const InputSpec& s, int nu, int T, std::uint64_t seed) {
  if (nu == 0) return {};
  std::vector<Eigen::VectorXd> u(static_cast<std::size_t>(T), Eigen::VectorXd::Zero(nu));
  if (s.kind == "sine") {
    const double w = 2.0 * std::acos(-1.0) / s.period;
    for (int k = 0; k < T; ++k) u[static_cast<std::size_t>(k)].setConstant(s.amplitude * std::sin(w * k));
  } else if (s.kind == "normal") {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> n01;
    for (auto& v : u)
      for (int i = 0; i < nu; ++i) v[i] = s.sd * n01(rng);
  } else if (s.kind != "zero") {
    throw ConfigError("data.simulate.inputs.kind: unknown input '" + s.kind + "' (zero, sine or normal)");
  }
  return u;
}

// ---------------------------------------------------------------------------
// Whole run

struct OracleSpec {
  std::string kind = "kalman";  // kalman | particle
  int particles = 10000;
  int trajectories = 500;
  std::optional<std::uint64_t> seed;
  std::optional<Eigen::VectorXd> theta;
  std::optional<std::string> posterior;  // θ fixed at this posterior's mean
  std::optional<std::string> output;
};

struct Output {
  std::optional<std::string> dataset;
  std::optional<std::string> truth;
  std::optional<std::string> posterior;
  std::optional<std::string> report;
};

struct RunConfig {
  json raw;
  std::string hash;
  std::filesystem::path base;
  std::unique_ptr<Model> model;
  std::string model_kind;
  DataSpec data;
  SchemeConfig scheme;
  SolverOptions solver;
  InitOptions init;
  Output output;
  OracleSpec oracle;
  std::uint64_t seed = 0;
  int threads = 1;

  /// Paths in the file are relative to the directory holding it.
  std::string resolve(const std::string& p) const {
    const std::filesystem::path q(p);
    return q.is_absolute() ? p : (base / q).string();
  }
};

inline int thread_count(const json& j) {
  int t = j.contains("threads") ? get<int>(j, "threads", "config") : default_threads();
  if (const char* env = std::getenv("VI_SSM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("VI_SSM_THREADS must be a positive integer");
    t = static_cast<int>(v);
  }
  if (t < 1) throw ConfigError("threads must be at least 1");
  return t;
}

inline RunConfig parse(const json& j, std::filesystem::path base = {}) {
  check_keys(j, {"model", "data", "quadrature", "solver", "init", "output", "oracle", "seed", "threads"}, "config");
  RunConfig rc;
  rc.raw = j;
  rc.hash = io::config_hash(j);
  rc.base = std::move(base);
  if (!j.contains("model")) throw ConfigError("config: missing 'model'");
  rc.model_kind = get<std::string>(j["model"], "kind", "model");
  rc.model = model_from(j["model"]);
  rc.seed = get_or<std::uint64_t>(j, "seed", 0, "config");
  rc.threads = thread_count(j);
  rc.scheme = j.contains("quadrature") ? scheme_from(j["quadrature"]) : SchemeConfig{};
  rc.solver = j.contains("solver") ? solver_from(j["solver"]) : SolverOptions{};
  rc.solver.threads = rc.threads;
  rc.init = j.contains("init") ? init_from(j["init"]) : InitOptions{};

  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, {"path", "simulate"}, "data");
    if (d.contains("path") == d.contains("simulate")) throw ConfigError("data: give exactly one of 'path' or 'simulate'");
    if (d.contains("path")) rc.data.path = rc.resolve(get<std::string>(d, "path", "data"));
    if (d.contains("simulate")) {
      const auto& s = d["simulate"];
      const std::string w = "data.simulate";
      check_keys(s, {"T", "theta", "eta", "seed", "inputs"}, w);
      SimulateSpec sp;
      sp.T = get<int>(s, "T", w);
      if (sp.T < 0) throw ConfigError("data.simulate.T must be non-negative");
      const auto& dims = rc.model->dims();
      sp.theta = s.contains("theta") ? vec(s, "theta", w) : Eigen::VectorXd::Zero(dims.ntheta);
      sp.eta = s.contains("eta") ? vec(s, "eta", w) : rc.model->default_eta();
      if (sp.theta.size() != dims.ntheta)
        throw ConfigError(w + ".theta: expected " + std::to_string(dims.ntheta) + " entries");
      if (sp.eta.size() != dims.neta) throw ConfigError(w + ".eta: expected " + std::to_string(dims.neta) + " entries");
      sp.seed = get_or<std::uint64_t>(s, "seed", rc.seed, w);
      if (s.contains("inputs")) {
        const auto& in = s["inputs"];
        check_keys(in, {"kind", "amplitude", "period", "sd"}, w + ".inputs");
        sp.inputs.kind = get_or<std::string>(in, "kind", "zero", w + ".inputs");
        sp.inputs.amplitude = get_or<double>(in, "amplitude", 1.0, w + ".inputs");
        sp.inputs.period = get_or<double>(in, "period", 100.0, w + ".inputs");
        sp.inputs.sd = get_or<double>(in, "sd", 1.0, w + ".inputs");
        if (!(sp.inputs.period > 0.0)) throw ConfigError(w + ".inputs.period must be positive");
      }
      rc.data.simulate = sp;
    }
  }

  if (j.contains("output")) {
    const auto& o = j["output"];
    check_keys(o, {"dataset", "truth", "posterior", "report"}, "output");
    auto path = [&](const char* k) -> std::optional<std::string> {
      if (!o.contains(k)) return std::nullopt;
      return rc.resolve(get<std::string>(o, k, "output"));
    };
    rc.output = {path("dataset"), path("truth"), path("posterior"), path("report")};
  }

  if (j.contains("oracle")) {
    const auto& o = j["oracle"];
    const std::string w = "oracle";
    check_keys(o, {"kind", "particles", "trajectories", "seed", "theta", "posterior", "output"}, w);
    rc.oracle.kind = get_or<std::string>(o, "kind", "kalman", w);
    if (rc.oracle.kind != "kalman" && rc.oracle.kind != "particle")
      throw ConfigError("oracle.kind: unknown oracle '" + rc.oracle.kind + "' (kalman or particle)");
    rc.oracle.particles = get_or<int>(o, "particles", rc.oracle.particles, w);
    rc.oracle.trajectories = get_or<int>(o, "trajectories", rc.oracle.trajectories, w);
    if (o.contains("seed")) rc.oracle.seed = get<std::uint64_t>(o, "seed", w);
    if (o.contains("theta")) rc.oracle.theta = vec(o, "theta", w);
    if (o.contains("posterior")) rc.oracle.posterior = rc.resolve(get<std::string>(o, "posterior", w));
    if (o.contains("output")) rc.oracle.output = rc.resolve(get<std::string>(o, "output", w));
  }
  return rc;
}

inline RunConfig load(const std::string& path) {
  const json j = io::read_json(path);
  return parse(j, std::filesystem::path(path).parent_path());
}

/// The dataset named by the data section, simulated or read from disk.
struct LoadedData {
  Dataset data;
  std::optional<Simulation> simulation;
};

inline LoadedData load_data(const RunConfig& rc) {
  const auto& d = rc.model->dims();
  LoadedData out;
  if (rc.data.path) {
    out.data = io::read_dataset_csv(*rc.data.path, d.ny, d.nu);
    return out;
  }
  if (!rc.data.simulate) throw ConfigError("config: missing 'data'");
  const auto& s = *rc.data.simulate;
  const auto u = make_inputs(s.inputs, d.nu, s.T, s.seed);
  out.simulation = simulate(*rc.model, s.theta, s.eta, s.T, u, s.seed);
  out.data = out.simulation->data;
  return out;
}

}  // namespace vissm::config
