// vissm: simulate, fit, marginals, oracle, compare.
//
// Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 solver failure (or not converged).

#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vissm/config.hpp"
#include "vissm/io.hpp"
#include "vissm/marginals.hpp"
#include "vissm/optimizer.hpp"
#include "vissm/reference.hpp"
#include "vissm/simulate.hpp"

using namespace vissm;
using json = nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kConfig = 2;
constexpr int kIo = 3;
constexpr int kSolver = 4;

struct SolverFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int cmd_simulate(const std::string& cfg_path, std::string dataset, std::string truth) {
  const auto rc = config::load(cfg_path);
  if (!rc.data.simulate) throw ConfigError("simulate: the data section needs a 'simulate' block");
  if (dataset.empty() && rc.output.dataset) dataset = *rc.output.dataset;
  if (truth.empty() && rc.output.truth) truth = *rc.output.truth;
  if (dataset.empty()) throw ConfigError("simulate: no dataset output path (output.dataset or --dataset)");
  const auto loaded = config::load_data(rc);
  const auto& d = rc.model->dims();
  io::write_file(dataset, io::dataset_csv(loaded.data, d.ny, d.nu, rc.hash));
  if (!truth.empty()) io::write_file(truth, io::truth_csv(*loaded.simulation, d.nx, rc.hash));
  std::printf("wrote %d steps to %s\n", loaded.data.T(), dataset.c_str());
  return kOk;
}

int cmd_fit(const std::string& cfg_path, std::string posterior, std::string report) {
  const auto rc = config::load(cfg_path);
  if (posterior.empty() && rc.output.posterior) posterior = *rc.output.posterior;
  if (report.empty() && rc.output.report) report = *rc.output.report;
  if (posterior.empty()) throw ConfigError("fit: no posterior output path (output.posterior or --posterior)");
  const auto loaded = config::load_data(rc);
  const auto beta0 = initialize(*rc.model, loaded.data, rc.init);
  const auto res = solve(*rc.model, loaded.data, rc.scheme, rc.solver, beta0);
  json post = io::posterior_to_json(res.beta, rc.model_kind, rc.hash);
  post["elbo"] = io::elbo_to_json(res.report.elbo);
  io::write_json(posterior, post);
  if (!report.empty()) io::write_json(report, io::report_to_json(res.report, rc.solver, rc.hash));
  std::printf("%s: elbo %.10g, residual %.3e, gradient %.3e, %d iterations\n", to_string(res.report.status).c_str(),
              res.report.elbo.total, res.report.constraint_residual, res.report.lagrangian_gradient,
              res.report.iterations);
  if (res.report.status != SolveStatus::Converged)
    throw SolverFailure("solver did not converge: " + to_string(res.report.status) +
                        (res.report.message.empty() ? "" : " (" + res.report.message + ")"));
  return kOk;
}

int cmd_marginals(const std::string& post_path, const std::string& what, int k, int i, int j, int grid,
                  const std::string& out) {
  const json pj = io::read_json(post_path);
  const auto beta = io::posterior_from_json(pj);
  const std::string hash = pj.value("config_hash", std::string());
  marginal::Gaussian g;
  std::vector<int> index;
  if (what == "theta") {
    g = marginal::theta(beta);
  } else if (what == "state") {
    g = marginal::state(beta, k);
  } else if (what == "pair") {
    g = marginal::theta_pair(beta, i, j);
    index = {i, j};
  } else {
    throw ConfigError("marginals: --what must be theta, state or pair");
  }
  if (grid < 2) throw ConfigError("marginals: --grid must be at least 2");
  const std::string csv = what == "pair" ? marginal::pair_csv(g, index, grid, hash) : marginal::csv(g, grid, hash);
  if (out.empty()) std::cout << csv;
  else io::write_file(out, csv);
  return kOk;
}

int cmd_oracle(const std::string& cfg_path, std::string posterior, std::string out) {
  const auto rc = config::load(cfg_path);
  if (out.empty() && rc.oracle.output) out = *rc.oracle.output;
  if (out.empty()) throw ConfigError("oracle: no output path (oracle.output or --out)");
  if (posterior.empty() && rc.oracle.posterior) posterior = *rc.oracle.posterior;
  const auto loaded = config::load_data(rc);
  const auto& d = rc.model->dims();

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d.ntheta);
  Eigen::VectorXd eta = rc.model->default_eta();
  if (rc.oracle.theta) theta = *rc.oracle.theta;
  if (!posterior.empty()) {
    const auto b = io::posterior_from_json(io::read_json(posterior));
    if (b.ntheta != d.ntheta || b.nx != d.nx) throw ConfigError("oracle: posterior does not match the model");
    if (b.T() > 0 && !rc.oracle.theta) theta = b.pairs.front().mu_theta();
    if (b.eta.size() == d.neta) eta = b.eta;
  } else if (!rc.oracle.theta && loaded.simulation) {
    theta = loaded.simulation->theta;
  }
  if (theta.size() != d.ntheta) throw ConfigError("oracle.theta: expected " + std::to_string(d.ntheta) + " entries");

  if (rc.oracle.kind == "kalman") {
    const auto* lg = dynamic_cast<const LgssmModel*>(rc.model.get());
    if (!lg) throw ConfigError("oracle: the Kalman smoother needs an lgssm model");
    const auto s = kalman_smoother(*lg, loaded.data, theta);
    const auto beta = to_beta(s, d.nx);
    io::write_json(out, io::kalman_to_json(s, beta, rc.hash));
    std::printf("kalman: loglik %.10g\n", s.loglik);
  } else {
    ParticleOptions po;
    po.particles = rc.oracle.particles;
    po.trajectories = rc.oracle.trajectories;
    po.seed = rc.oracle.seed.value_or(rc.seed);
    const auto p = particle_smoother(*rc.model, loaded.data, theta, eta, po);
    io::write_json(out, io::particle_to_json(p, theta, rc.hash));
    std::printf("particle: loglik %.10g, %zu warnings\n", p.loglik, p.warnings.size());
  }
  return kOk;
}

int cmd_compare(const std::string& a, const std::string& b, const std::string& out) {
  const auto pa = io::posterior_from_json(io::read_json(a));
  const auto pb = io::posterior_from_json(io::read_json(b));
  const json diff = io::compare_posteriors(pa, pb);
  if (out.empty()) std::cout << diff.dump(2) << "\n";
  else io::write_json(out, diff);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational inference for nonlinear state-space models"};
  app.require_subcommand(1);

  std::string cfg, posterior, report, dataset, truth, out, what = "theta", a, b;
  int k = 1, i = 0, j = 1, grid = 101;

  auto* sim = app.add_subcommand("simulate", "Simulate a dataset and its true trajectory");
  sim->add_option("-c,--config", cfg, "Run configuration (JSON)")->required();
  sim->add_option("--dataset", dataset, "Dataset CSV (overrides output.dataset)");
  sim->add_option("--truth", truth, "Truth CSV (overrides output.truth)");

  auto* fit = app.add_subcommand("fit", "Fit the variational posterior");
  fit->add_option("-c,--config", cfg, "Run configuration (JSON)")->required();
  fit->add_option("--posterior", posterior, "Posterior JSON (overrides output.posterior)");
  fit->add_option("--report", report, "Solver report JSON (overrides output.report)");

  auto* mar = app.add_subcommand("marginals", "Export marginal parameters and density grids as CSV");
  mar->add_option("-p,--posterior", posterior, "Posterior JSON")->required();
  mar->add_option("-w,--what", what, "theta, state or pair")->check(CLI::IsMember({"theta", "state", "pair"}));
  mar->add_option("-k,--k", k, "State index (1..T+1) for --what state");
  mar->add_option("-i,--i", i, "First θ index for --what pair");
  mar->add_option("-j,--j", j, "Second θ index for --what pair");
  mar->add_option("--grid", grid, "Grid points per axis");
  mar->add_option("-o,--out", out, "Output CSV (default: stdout)");

  auto* ora = app.add_subcommand("oracle", "Run the Kalman or particle smoother");
  ora->add_option("-c,--config", cfg, "Run configuration (JSON)")->required();
  ora->add_option("-p,--posterior", posterior, "Fix θ and η at this posterior's mean");
  ora->add_option("-o,--out", out, "Output JSON (overrides oracle.output)");

  auto* cmp = app.add_subcommand("compare", "Maximum absolute deviation per field between two posteriors");
  cmp->add_option("a", a, "First posterior JSON")->required();
  cmp->add_option("b", b, "Second posterior JSON")->required();
  cmp->add_option("-o,--out", out, "Output JSON (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*sim) return cmd_simulate(cfg, dataset, truth);
    if (*fit) return cmd_fit(cfg, posterior, report);
    if (*mar) return cmd_marginals(posterior, what, k, i, j, grid, out);
    if (*ora) return cmd_oracle(cfg, posterior, out);
    if (*cmp) return cmd_compare(a, b, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const UnsupportedError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const SolverFailure& e) {
    std::fprintf(stderr, "solver error: %s\n", e.what());
    return kSolver;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "solver error: %s\n", e.what());
    return kSolver;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  }
  return kOk;
}
