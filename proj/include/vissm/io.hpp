#pragma once

// File formats: datasets and truth trajectories as CSV, posteriors, reports and
// oracle exports as JSON. Every file carries the hash of the run configuration.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <limits>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "vissm/error.hpp"
#include "vissm/gaussian.hpp"
#include "vissm/optimizer.hpp"
#include "vissm/reference.hpp"
#include "vissm/simulate.hpp"

namespace vissm::io {

using json = nlohmann::json;

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Hash of a configuration: FNV-1a over its canonical (key-sorted, compact) dump.
inline std::string config_hash(const json& cfg) {
  const std::uint64_t h = fnv1a64(cfg.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Shortest decimal form that parses back to the same double.
inline std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && *b == ' ') ++b;
  double v = 0.0;
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) throw IoError(where + ": not a number: '" + s + "'");
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  const auto dir = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!dir.empty()) std::filesystem::create_directories(dir, ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline json read_json(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string header_comment(const std::string& hash) { return "# config-hash: " + hash + "\n"; }

}  // namespace detail

/// Columns k, y_1..y_ny, u_1..u_nu; k runs from 1.
inline std::string dataset_csv(const Dataset& data, int ny, int nu, const std::string& hash) {
  std::string s = detail::header_comment(hash);
  if (data.seed) s += "# seed: " + std::to_string(*data.seed) + "\n";
  s += "k";
  for (int i = 1; i <= ny; ++i) s += ",y_" + std::to_string(i);
  for (int i = 1; i <= nu; ++i) s += ",u_" + std::to_string(i);
  s += "\n";
  for (int k = 0; k < data.T(); ++k) {
    s += std::to_string(k + 1);
    for (int i = 0; i < ny; ++i) s += "," + fmt(data.y[k][i]);
    for (int i = 0; i < nu; ++i) s += "," + fmt(data.u[k][i]);
    s += "\n";
  }
  return s;
}

inline Dataset read_dataset_csv(const std::string& path, int ny, int nu) {
  std::istringstream in(read_file(path));
  std::string line;
  Dataset d;
  bool header = false;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    if (line[0] == '#') {
      const std::string tag = "# seed: ";
      if (line.rfind(tag, 0) == 0) d.seed = std::stoull(line.substr(tag.size()));
      continue;
    }
    const auto f = detail::split(line);
    if (!header) {
      header = true;
      int cy = 0, cu = 0;
      if (f.empty() || f[0] != "k") throw IoError(path + ": first column must be 'k'");
      for (std::size_t i = 1; i < f.size(); ++i) {
        if (f[i].rfind("y_", 0) == 0) ++cy;
        else if (f[i].rfind("u_", 0) == 0) ++cu;
        else throw IoError(path + ": unexpected column '" + f[i] + "'");
      }
      if (cy != ny || cu != nu)
        throw ConfigError(path + ": dataset has " + std::to_string(cy) + " measurement and " + std::to_string(cu) +
                          " input columns, model expects " + std::to_string(ny) + " and " + std::to_string(nu));
      continue;
    }
    ++row;
    const std::string where = path + ":" + std::to_string(row);
    if (static_cast<int>(f.size()) != 1 + ny + nu) throw IoError(where + ": wrong number of fields");
    Eigen::VectorXd y(ny), u(nu);
    for (int i = 0; i < ny; ++i) y[i] = parse_double(f[1 + i], where);
    for (int i = 0; i < nu; ++i) u[i] = parse_double(f[1 + ny + i], where);
    if (!y.allFinite() || !u.allFinite()) throw IoError(where + ": non-finite value");
    d.y.push_back(y);
    if (nu > 0) d.u.push_back(u);
  }
  if (!header) throw IoError(path + ": missing header row");
  return d;
}

/// Columns k, x_1..x_nx for k = 1..T+1; θ and η in header comments.
inline std::string truth_csv(const Simulation& sim, int nx, const std::string& hash) {
  std::string s = detail::header_comment(hash);
  auto vec = [](const Eigen::VectorXd& v) {
    std::string out;
    for (Eigen::Index i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
    return out;
  };
  s += "# theta: " + vec(sim.theta) + "\n";
  s += "# eta: " + vec(sim.eta) + "\n";
  s += "k";
  for (int i = 1; i <= nx; ++i) s += ",x_" + std::to_string(i);
  s += "\n";
  for (std::size_t k = 0; k < sim.states.size(); ++k) {
    s += std::to_string(k + 1);
    for (int i = 0; i < nx; ++i) s += "," + fmt(sim.states[k][i]);
    s += "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSON helpers

inline json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

/// Row-major nested arrays.
inline json to_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(row);
  }
  return a;
}

inline Eigen::VectorXd vector_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + ": expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(what + ": expected an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline Eigen::MatrixXd matrix_from(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Eigen::MatrixXd(0, 0);
  if (!j[0].is_array()) throw ConfigError(what + ": expected an array of rows");
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ConfigError(what + ": rows must have equal length");
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number()) throw ConfigError(what + ": non-numeric entry");
      m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Posterior

inline json elbo_to_json(const ElboBreakdown& e) {
  json j;
  j["i1"] = e.i1;
  j["i23"] = e.i23;
  j["i4"] = e.i4;
  j["total"] = e.total;
  j["per_step_i23"] = e.per_step_i23;
  if (!e.diagnostic.empty()) j["diagnostic"] = e.diagnostic;
  return j;
}

inline json pair_to_json(const PairwiseGaussian& q, int k) {
  json j;
  j["k"] = k;
  j["mu_theta"] = to_json(Eigen::VectorXd(q.mu_theta()));
  j["mu_xk"] = to_json(Eigen::VectorXd(q.mu_xk()));
  j["mu_xk1"] = to_json(Eigen::VectorXd(q.mu_xk1()));
  j["A"] = to_json(Eigen::MatrixXd(q.A()));
  j["B"] = to_json(Eigen::MatrixXd(q.B()));
  j["C"] = to_json(Eigen::MatrixXd(q.C()));
  j["D"] = to_json(Eigen::MatrixXd(q.D()));
  j["E"] = to_json(Eigen::MatrixXd(q.E()));
  j["F"] = to_json(Eigen::MatrixXd(q.F()));
  return j;
}

inline json posterior_to_json(const BetaParams& beta, const std::string& model, const std::string& hash) {
  json j;
  j["config_hash"] = hash;
  j["model"] = model;
  j["ntheta"] = beta.ntheta;
  j["nx"] = beta.nx;
  j["T"] = beta.T();
  j["eta"] = to_json(beta.eta);
  json pairs = json::array();
  for (int k = 0; k < beta.T(); ++k) pairs.push_back(pair_to_json(beta.pairs[static_cast<std::size_t>(k)], k + 1));
  j["pairs"] = pairs;
  if (beta.head) {
    j["head"]["mean"] = to_json(beta.head->mean);
    j["head"]["U"] = to_json(beta.head->U);
  }
  return j;
}

namespace detail {

inline Eigen::MatrixXd block_from(const json& j, const char* key, int rows, int cols, const std::string& where) {
  if (!j.contains(key)) throw IoError(where + ": missing '" + key + "'");
  Eigen::MatrixXd m = matrix_from(j[key], where + "." + key);
  if (rows == 0 || cols == 0) return Eigen::MatrixXd(rows, cols);
  if (m.rows() != rows || m.cols() != cols) throw IoError(where + "." + key + ": wrong shape");
  return m;
}

inline Eigen::VectorXd vec_from(const json& j, const char* key, int n, const std::string& where) {
  if (!j.contains(key)) throw IoError(where + ": missing '" + key + "'");
  Eigen::VectorXd v = vector_from(j[key], where + "." + key);
  if (v.size() != n) throw IoError(where + "." + key + ": wrong length");
  return v;
}

}  // namespace detail

inline BetaParams posterior_from_json(const json& j) {
  try {
    BetaParams b;
    b.ntheta = j.at("ntheta").get<int>();
    b.nx = j.at("nx").get<int>();
    const int T = j.at("T").get<int>();
    b.eta = vector_from(j.at("eta"), "eta");
    const int nt = b.ntheta, nx = b.nx;
    const auto& pairs = j.at("pairs");
    if (static_cast<int>(pairs.size()) != T) throw IoError("posterior: 'pairs' length differs from T");
    for (int k = 0; k < T; ++k) {
      const auto& p = pairs[static_cast<std::size_t>(k)];
      const std::string where = "pairs[" + std::to_string(k) + "]";
      PairwiseGaussian q(nt, nx);
      q.mu_theta() = detail::vec_from(p, "mu_theta", nt, where);
      q.mu_xk() = detail::vec_from(p, "mu_xk", nx, where);
      q.mu_xk1() = detail::vec_from(p, "mu_xk1", nx, where);
      q.U.setZero();
      q.A() = detail::block_from(p, "A", nt, nt, where);
      q.B() = detail::block_from(p, "B", nt, nx, where);
      q.C() = detail::block_from(p, "C", nt, nx, where);
      q.D() = detail::block_from(p, "D", nx, nx, where);
      q.E() = detail::block_from(p, "E", nx, nx, where);
      q.F() = detail::block_from(p, "F", nx, nx, where);
      q.validate();
      b.pairs.push_back(q);
    }
    if (j.contains("head")) {
      GaussianFactor h;
      h.mean = vector_from(j["head"].at("mean"), "head.mean");
      h.U = matrix_from(j["head"].at("U"), "head.U");
      b.head = h;
    }
    return b;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed posterior: ") + e.what());
  } catch (const DomainError& e) {
    throw IoError(std::string("malformed posterior: ") + e.what());
  }
}

/// Maximum absolute deviation per field; the posteriors must share dimensions.
inline json compare_posteriors(const BetaParams& a, const BetaParams& b) {
  if (a.ntheta != b.ntheta || a.nx != b.nx || a.T() != b.T())
    throw ConfigError("compare: posteriors differ in ntheta, nx or T");
  const char* names[] = {"mu_theta", "mu_xk", "mu_xk1", "A", "B", "C", "D", "E", "F"};
  double dev[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
  auto upd = [](double& d, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    if (x.size()) d = std::max(d, (x - y).cwiseAbs().maxCoeff());
  };
  for (int k = 0; k < a.T(); ++k) {
    const auto& p = a.pairs[static_cast<std::size_t>(k)];
    const auto& q = b.pairs[static_cast<std::size_t>(k)];
    upd(dev[0], p.mu_theta(), q.mu_theta());
    upd(dev[1], p.mu_xk(), q.mu_xk());
    upd(dev[2], p.mu_xk1(), q.mu_xk1());
    upd(dev[3], p.A(), q.A());
    upd(dev[4], p.B(), q.B());
    upd(dev[5], p.C(), q.C());
    upd(dev[6], p.D(), q.D());
    upd(dev[7], p.E(), q.E());
    upd(dev[8], p.F(), q.F());
  }
  json j;
  double worst = 0.0;
  for (int i = 0; i < 9; ++i) {
    j["max_abs"][names[i]] = dev[i];
    worst = std::max(worst, dev[i]);
  }
  double de = 0.0;
  if (a.eta.size() != b.eta.size()) throw ConfigError("compare: posteriors differ in the size of eta");
  if (a.eta.size()) de = (a.eta - b.eta).cwiseAbs().maxCoeff();
  j["max_abs"]["eta"] = de;
  j["max_abs_overall"] = std::max(worst, de);
  j["T"] = a.T();
  return j;
}

// ---------------------------------------------------------------------------
// Solver report

inline json options_to_json(const SolverOptions& o) {
  json j;
  j["method"] = to_string(o.method);
  j["max_outer"] = o.max_outer;
  j["max_inner"] = o.max_inner;
  j["tol_grad"] = o.tol_grad;
  j["tol_constraint"] = o.tol_constraint;
  j["hessian"] = to_string(o.hessian);
  j["penalty_init"] = o.penalty_init;
  j["penalty_growth"] = o.penalty_growth;
  j["diag_floor"] = o.diag_floor;
  j["multipliers"] = to_string(o.multipliers);
  j["elimination"] = to_string(o.elimination);
  return j;
}

inline json report_to_json(const SolveReport& r, const SolverOptions& o, const std::string& hash) {
  json j;
  j["config_hash"] = hash;
  j["status"] = to_string(r.status);
  j["message"] = r.message;
  j["elbo"] = elbo_to_json(r.elbo);
  j["constraint_residual"] = r.constraint_residual;
  j["lagrangian_gradient"] = r.lagrangian_gradient;
  j["iterations"] = r.iterations;
  j["outer_iterations"] = r.outer_iterations;
  j["penalty"] = r.penalty;
  j["options"] = options_to_json(o);
  json tr = json::array();
  for (const auto& t : r.trace)
    tr.push_back({{"outer", t.outer}, {"objective", t.objective}, {"residual", t.residual}, {"penalty", t.penalty},
                  {"inner", t.inner}});
  j["trace"] = tr;
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& m : r.merit) worst = std::max(worst, m.after - m.before);
  j["accepted_steps"] = r.merit.size();
  j["max_merit_change"] = r.merit.empty() ? 0.0 : worst;
  return j;
}

// ---------------------------------------------------------------------------
// Oracles

inline json kalman_to_json(const SmootherResult& s, const BetaParams& beta, const std::string& hash) {
  json j = posterior_to_json(beta, "lgssm", hash);
  j["oracle"] = "kalman";
  j["loglik"] = s.loglik;
  return j;
}

inline json particle_to_json(const ParticleResult& p, const Eigen::VectorXd& theta, const std::string& hash) {
  json j;
  j["config_hash"] = hash;
  j["oracle"] = "particle";
  j["N"] = p.N;
  j["seed"] = p.seed;
  j["theta"] = to_json(theta);
  j["loglik"] = p.loglik;
  j["ess"] = p.ess;
  j["warnings"] = p.warnings;
  json states = json::array();
  for (int k = 0; k <= p.T(); ++k)
    states.push_back({{"k", k + 1}, {"mean", to_json(p.smoothed_mean(k))}, {"cov", to_json(p.smoothed_cov(k))}});
  j["states"] = states;
  return j;
}

}  // namespace vissm::io
