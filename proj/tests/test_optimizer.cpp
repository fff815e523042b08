#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "common.hpp"
#include "vissm/elbo.hpp"
#include "vissm/models/lgssm.hpp"
#include "vissm/models/pendulum.hpp"
#include "vissm/models/sv.hpp"
#include "vissm/optimizer.hpp"
#include "vissm/reference.hpp"
#include "vissm/simulate.hpp"

using namespace vissm;
using namespace testing_util;

namespace {

Dataset lgssm_data(const LgssmModel& m, int T, std::uint64_t seed) {
  const auto& d = m.dims();
  return simulate(m, VectorXd::Zero(d.ntheta), VectorXd(), T, d.nu ? sine_inputs(T, d.nu) : std::vector<VectorXd>{},
                  seed)
      .data;
}

VectorXd sv_theta() { return (VectorXd(3) << 0.1, 0.9, std::log(0.3)).finished(); }

SolverOptions full_elimination() {
  SolverOptions o;
  o.elimination = Elimination::Full;
  return o;
}

/// Largest gap between the moments of the smoothed pairs and those of β.
double gap_to_smoother(const BetaParams& b, const SmootherResult& s) {
  const auto ref = to_beta(s, b.nx);
  double worst = 0.0;
  for (int k = 0; k < b.T(); ++k) {
    worst = std::max(worst, (b.pairs[k].mean - ref.pairs[k].mean).cwiseAbs().maxCoeff());
    worst = std::max(worst, (b.pairs[k].covariance() - ref.pairs[k].covariance()).cwiseAbs().maxCoeff());
  }
  return worst;
}

void expect_report_invariants(const SolveResult& r, const Model& m, const Dataset& d, const SchemeConfig& s,
                              const SolverOptions& o) {
  const auto& rep = r.report;
  EXPECT_EQ(static_cast<int>(rep.trace.size()), rep.outer_iterations);
  EXPECT_EQ(static_cast<int>(rep.merit.size()), rep.iterations);
  EXPECT_NEAR(rep.elbo.total, elbo(r.beta, m, d, s).total, 1e-9 * std::max(1.0, std::abs(rep.elbo.total)));
  EXPECT_EQ(rep.constraint_residual, constraints(r.beta).max_abs());
  if (rep.status == SolveStatus::Converged) {
    EXPECT_LE(rep.constraint_residual, o.tol_constraint);
    EXPECT_LE(rep.lagrangian_gradient, o.tol_grad);
  }
  EXPECT_NO_THROW(r.beta.validate());
}

}  // namespace

TEST(Initialize, FeasibleAndRolledOut) {
  LgssmModel m(two_state_lgssm());
  const auto data = lgssm_data(m, 12, 1);
  const auto b = initialize(m, data, {.state_scale = 0.7});
  ASSERT_EQ(b.T(), 12);
  EXPECT_LE(constraints(b).max_abs(), 1e-12);
  const auto& c = two_state_lgssm();
  VectorXd x = c.prior_mean;
  for (int k = 0; k < 12; ++k) {
    const auto& q = b.pairs[k];
    EXPECT_LE((q.mu_xk() - x).cwiseAbs().maxCoeff(), 1e-14);
    x = c.A * x + c.B * data.u[k];
    EXPECT_LE((q.mu_xk1() - x).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LE((MatrixXd(q.F()) - 0.7 * MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(MatrixXd(q.E()).cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_LE((MatrixXd(b.pairs[0].D()) - 0.7 * MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Initialize, ThetaBlockFromPrior) {
  const auto cfg = theta_lgssm();
  LgssmModel m(cfg);
  const auto data = simulate(m, VectorXd::Constant(2, 0.5), VectorXd(), 6, {}, 2).data;
  const auto b = initialize(m, data, {.theta_scale = 0.5});
  EXPECT_LE(constraints(b).max_abs(), 1e-12);
  for (const auto& q : b.pairs) {
    EXPECT_LE((MatrixXd(q.A()) - 0.5 * upper_factor(cfg.prior_cov.topLeftCorner(2, 2))).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(MatrixXd(q.B()).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(MatrixXd(q.C()).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_LE((q.mu_theta() - cfg.prior_mean.head(2)).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Initialize, SvMeansDecayGeometrically) {
  SvModel m;
  const auto data = simulate(m, sv_theta(), VectorXd(), 20, {}, 3).data;
  const VectorXd th = (VectorXd(3) << 0.0, 0.5, std::log(0.3)).finished();
  const auto b = initialize(m, data, {.theta_mean = th, .x1_mean = VectorXd::Constant(1, 1.0)});
  for (int k = 0; k < 20; ++k) {
    EXPECT_NEAR(b.pairs[k].mu_xk()[0], std::pow(0.5, k), 1e-15);
    EXPECT_NEAR(b.pairs[k].mu_xk1()[0], std::pow(0.5, k + 1), 1e-15);
  }
  EXPECT_LE(constraints(b).max_abs(), 1e-12);
}

TEST(Initialize, EmptyDataGivesHeadOnly) {
  LgssmModel m(theta_lgssm());
  const auto b = initialize(m, Dataset{});
  EXPECT_EQ(b.T(), 0);
  ASSERT_TRUE(b.head.has_value());
  EXPECT_EQ(b.head->dim(), 4);
}

TEST(Initialize, BadScalesAreConfigErrors) {
  LgssmModel m(scalar_lgssm());
  EXPECT_THROW(initialize(m, Dataset{}, {.state_scale = 0.0}), ConfigError);
  EXPECT_THROW(initialize(m, Dataset{}, {.theta_scale = -1.0}), ConfigError);
  EXPECT_THROW(initialize(m, Dataset{}, {.x1_mean = VectorXd::Zero(2)}), ConfigError);
}

TEST(Solve, LgssmRecoversSmoother) {
  LgssmModel m(two_state_lgssm());
  const auto data = lgssm_data(m, 50, 4);
  const auto s = kalman_smoother(m, data);
  for (auto elim : {Elimination::None, Elimination::Full}) {
    SolverOptions o;
    o.elimination = elim;
    const auto r = solve(m, data, SchemeConfig::cubature5(), o, initialize(m, data));
    EXPECT_EQ(r.report.status, SolveStatus::Converged) << r.report.message;
    EXPECT_LE(gap_to_smoother(r.beta, s), 1e-6) << to_string(elim);
    EXPECT_NEAR(r.report.elbo.total, s.loglik, 1e-6);
    expect_report_invariants(r, m, data, SchemeConfig::cubature5(), o);
  }
}

TEST(Solve, OracleStartConvergesImmediately) {
  LgssmModel m(two_state_lgssm());
  const auto data = lgssm_data(m, 30, 5);
  const auto s = kalman_smoother(m, data);
  const auto b0 = to_beta(s, 2);
  const double start = elbo(b0, m, data, SchemeConfig::cubature5()).total;
  SolverOptions full = full_elimination();
  SolverOptions ls;
  ls.multipliers = MultiplierInit::LeastSquares;
  for (const auto& o : {full, ls}) {
    const auto r = solve(m, data, SchemeConfig::cubature5(), o, b0);
    EXPECT_EQ(r.report.status, SolveStatus::Converged);
    EXPECT_LE(r.report.outer_iterations, 2);
    EXPECT_GE(r.report.elbo.total, start - 1e-12);
    EXPECT_LE(gap_to_smoother(r.beta, s), 1e-8);
  }
}

TEST(Solve, FormulationsAgree) {
  SvModel m;
  const auto data = simulate(m, sv_theta(), VectorXd(), 40, {}, 6).data;
  const auto b0 = initialize(m, data);
  std::vector<SolveResult> rs;
  std::vector<std::string> names;
  for (auto elim : {Elimination::Linear, Elimination::Full}) {
    SolverOptions o;
    o.elimination = elim;
    rs.push_back(solve(m, data, SchemeConfig::cubature5(), o, b0));
    names.push_back(to_string(elim));
  }
  {
    SolverOptions o;
    o.method = SolverMethod::Sqp;
    o.elimination = Elimination::Full;
    rs.push_back(solve(m, data, SchemeConfig::cubature5(), o, b0));
    names.push_back("sqp");
  }
  for (std::size_t i = 0; i < rs.size(); ++i) {
    ASSERT_EQ(rs[i].report.status, SolveStatus::Converged) << names[i] << ": " << rs[i].report.message;
    EXPECT_NEAR(rs[i].report.elbo.total, rs[0].report.elbo.total, 1e-6) << names[i];
    for (int k = 0; k < 40; ++k) {
      EXPECT_LE((rs[i].beta.pairs[k].mean - rs[0].beta.pairs[k].mean).cwiseAbs().maxCoeff(), 1e-4) << names[i];
      EXPECT_LE((rs[i].beta.pairs[k].covariance() - rs[0].beta.pairs[k].covariance()).cwiseAbs().maxCoeff(), 1e-4)
          << names[i];
    }
  }
}

TEST(Solve, UnconstrainedFormulationAgreesOnLgssm) {
  LgssmModel m(theta_lgssm());
  const auto data = simulate(m, VectorXd::Constant(2, 0.5), VectorXd(), 25, {}, 7).data;
  const auto b0 = initialize(m, data);
  std::vector<SolveResult> rs;
  for (auto elim : {Elimination::None, Elimination::Linear, Elimination::Full}) {
    SolverOptions o;
    o.elimination = elim;
    rs.push_back(solve(m, data, SchemeConfig::cubature5(), o, b0));
    ASSERT_EQ(rs.back().report.status, SolveStatus::Converged) << to_string(elim) << ": " << rs.back().report.message;
  }
  for (const auto& r : rs) {
    EXPECT_NEAR(r.report.elbo.total, rs[0].report.elbo.total, 1e-6);
    EXPECT_LE((r.beta.pairs[0].mean - rs[0].beta.pairs[0].mean).cwiseAbs().maxCoeff(), 1e-4);
  }
}

TEST(Solve, MeritDecreasesAndOverlapsAgree) {
  SvModel m;
  const auto data = simulate(m, sv_theta(), VectorXd(), 40, {}, 8).data;
  const auto o = full_elimination();
  const auto r = solve(m, data, SchemeConfig::cubature5(), o, initialize(m, data));
  ASSERT_EQ(r.report.status, SolveStatus::Converged) << r.report.message;
  ASSERT_FALSE(r.report.merit.empty());
  for (const auto& s : r.report.merit)
    EXPECT_LE(s.after, s.before + 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(s.before)));
  for (int k = 0; k + 1 < 40; ++k) {
    const auto a = marginal_theta_x(r.beta.pairs[k], Slot::Second);
    const auto b = marginal_theta_x(r.beta.pairs[k + 1], Slot::First);
    EXPECT_LE((a.mean - b.mean).cwiseAbs().maxCoeff(), 10.0 * o.tol_constraint);
    EXPECT_LE((a.covariance() - b.covariance()).cwiseAbs().maxCoeff(), 10.0 * o.tol_constraint);
  }
  expect_report_invariants(r, m, data, SchemeConfig::cubature5(), o);
}

TEST(Solve, PenalizedPathMeritDecreases) {
  LgssmModel m(theta_lgssm());
  const auto data = simulate(m, VectorXd::Constant(2, 0.5), VectorXd(), 15, {}, 9).data;
  const SolverOptions o;
  const auto r = solve(m, data, SchemeConfig::cubature5(), o, initialize(m, data));
  ASSERT_EQ(r.report.status, SolveStatus::Converged) << r.report.message;
  for (const auto& s : r.report.merit)
    EXPECT_LE(s.after, s.before + 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(s.before)));
  expect_report_invariants(r, m, data, SchemeConfig::cubature5(), o);
}

TEST(Solve, FullEliminationWithUnscentedRule) {
  LgssmModel m(theta_lgssm());
  const auto data = simulate(m, VectorXd::Constant(2, 0.5), VectorXd(), 15, {}, 9).data;
  const auto o = full_elimination();
  const auto r = solve(m, data, SchemeConfig::unscented(), o, initialize(m, data));
  ASSERT_EQ(r.report.status, SolveStatus::Converged) << r.report.message;
  for (const auto& s : r.report.merit)
    EXPECT_LE(s.after, s.before + 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(s.before)));
  expect_report_invariants(r, m, data, SchemeConfig::unscented(), o);
}

TEST(Solve, RerunsAreBitIdentical) {
  SvModel m;
  const auto data = simulate(m, sv_theta(), VectorXd(), 30, {}, 10).data;
  const auto b0 = initialize(m, data);
  auto o = full_elimination();
  const auto a = solve(m, data, SchemeConfig::cubature5(), o, b0).beta.pack();
  const auto b = solve(m, data, SchemeConfig::cubature5(), o, b0).beta.pack();
  o.threads = 3;
  const auto c = solve(m, data, SchemeConfig::cubature5(), o, b0).beta.pack();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
  EXPECT_EQ(std::memcmp(a.data(), c.data(), sizeof(double) * a.size()), 0);
}

TEST(Solve, GaussNewtonSolutionIsStationary) {
  auto cfg = pendulum_config();
  PendulumModel m(cfg);
  std::vector<VectorXd> u;
  for (int k = 0; k < 20; ++k) u.push_back(VectorXd::Constant(1, 3.0 * std::sin(2.0 * M_PI * k / 25.0)));
  const auto data = simulate(m, cfg.prior_mean.head(2), VectorXd(), 20, u, 11).data;
  auto o = full_elimination();
  o.hessian = HessianMode::GaussNewton;
  const auto scheme = SchemeConfig::cubature5();
  const auto r = solve(m, data, scheme, o, initialize(m, data, {.state_scale = 0.01}));
  ASSERT_EQ(r.report.status, SolveStatus::Converged) << r.report.message;
  auto exact = o;
  exact.hessian = HessianMode::Exact;
  const detail::Problem prob(m, data, scheme, exact, r.beta);
  ASSERT_EQ(prob.constraint_count(), 0);
  const auto w = prob.to_w(r.beta);
  const auto pt = prob.evaluate(w);
  const auto d = prob.derivatives(w, pt, VectorXd(), 0.0);
  ASSERT_TRUE(d.ok) << d.error;
  EXPECT_LE(d.g.cwiseAbs().maxCoeff(), 10.0 * o.tol_grad);
  expect_report_invariants(r, m, data, scheme, o);
}

TEST(Solve, MinusInfinityStartIsNumericalFailure) {
  HalfLineModel m;
  Dataset d;
  d.y = {VectorXd::Constant(1, 0.5), VectorXd::Constant(1, 0.5)};
  BetaParams b;
  b.nx = 1;
  b.pairs = {PairwiseGaussian(0, 1, (VectorXd(2) << 0.1, 0.1).finished(), MatrixXd::Identity(2, 2)),
             PairwiseGaussian(0, 1, (VectorXd(2) << 0.1, 0.1).finished(), MatrixXd::Identity(2, 2))};
  const auto r = solve(m, d, SchemeConfig::cubature5(), SolverOptions{}, b);
  EXPECT_EQ(r.report.status, SolveStatus::NumericalFailure);
  EXPECT_NE(r.report.message.find("-inf"), std::string::npos) << r.report.message;
  EXPECT_NE(r.report.message.find("sigma point"), std::string::npos) << r.report.message;
}

TEST(Solve, IterationLimitIsReported) {
  SvModel m;
  const auto data = simulate(m, sv_theta(), VectorXd(), 30, {}, 12).data;
  auto o = full_elimination();
  o.max_outer = 1;
  o.max_inner = 2;
  const auto r = solve(m, data, SchemeConfig::cubature5(), o, initialize(m, data));
  EXPECT_EQ(r.report.status, SolveStatus::MaxIter);
  EXPECT_EQ(r.report.outer_iterations, 1);
  EXPECT_LE(r.report.iterations, 2);
}

TEST(Solve, EmptyDataReturnsPrior) {
  const auto cfg = theta_lgssm();
  LgssmModel m(cfg);
  const auto r = solve(m, Dataset{}, SchemeConfig::cubature5(), SolverOptions{}, initialize(m, Dataset{}));
  EXPECT_EQ(r.report.status, SolveStatus::Converged);
  ASSERT_TRUE(r.beta.head.has_value());
  EXPECT_LE((r.beta.head->covariance() - cfg.prior_cov).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(r.report.elbo.total, 0.0, 1e-12);
}

TEST(Solve, MismatchedStartIsConfigError) {
  LgssmModel m(scalar_lgssm());
  const auto data = lgssm_data(m, 5, 1);
  const auto b = initialize(m, lgssm_data(m, 4, 1));
  EXPECT_THROW(solve(m, data, SchemeConfig::cubature5(), SolverOptions{}, b), ConfigError);
}

TEST(SolverOptionsTest, ValidateRejectsBadValues) {
  const std::vector<std::function<void(SolverOptions&)>> bad = {
      [](SolverOptions& o) { o.tol_grad = 0.0; },        [](SolverOptions& o) { o.tol_constraint = -1.0; },
      [](SolverOptions& o) { o.penalty_growth = 1.0; },  [](SolverOptions& o) { o.penalty_init = 0.0; },
      [](SolverOptions& o) { o.diag_floor = -1e-3; },    [](SolverOptions& o) { o.max_outer = 0; },
      [](SolverOptions& o) { o.max_inner = 0; },         [](SolverOptions& o) { o.hessian = HessianMode::None; },
      [](SolverOptions& o) { o.threads = 0; },
  };
  EXPECT_NO_THROW(SolverOptions{}.validate());
  for (const auto& f : bad) {
    SolverOptions o;
    f(o);
    EXPECT_THROW(o.validate(), ConfigError);
  }
}
