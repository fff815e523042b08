#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "common.hpp"
#include "oracles.hpp"
#include "vissm/quadrature.hpp"

using namespace vissm;
using namespace testing_util;

TEST(Unscented, ScalarPaperConfiguration) {
  const auto r = unit_rule(1, SchemeConfig::unscented(1.0, 0.0, 0.0));
  ASSERT_EQ(r.size(), 3);
  EXPECT_DOUBLE_EQ(r.points(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(r.points(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(r.points(0, 2), -1.0);
  EXPECT_DOUBLE_EQ(r.weights[0], 0.0);
  EXPECT_DOUBLE_EQ(r.weights[1], 0.5);
  EXPECT_DOUBLE_EQ(r.weights[2], 0.5);
  const auto s = generate(VectorXd::Zero(1), MatrixXd::Identity(1, 1), r);
  EXPECT_EQ(expect(s, [](const VectorXd& x) { return x[0]; }), 0.0);
  EXPECT_EQ(expect(s, [](const VectorXd& x) { return x[0] * x[0]; }), 1.0);
}

TEST(Unscented, PointCountAndCovarianceWeight) {
  const auto r = unit_rule(4, SchemeConfig::unscented(0.5, 1.0, 2.0));
  EXPECT_EQ(r.size(), 9);
  const double spread = 0.25 * 5.0, lambda = spread - 4.0;
  EXPECT_NEAR(r.weights[0], lambda / spread, 1e-15);
  EXPECT_NEAR(r.cov_weights[0], lambda / spread + 1.0 - 0.25 + 2.0, 1e-15);
  for (int j = 1; j < r.size(); ++j) EXPECT_NEAR(r.weights[j], 0.5 / spread, 1e-15);
}

TEST(Unscented, DegenerateSpreadIsConfigError) {
  EXPECT_THROW(unit_rule(3, SchemeConfig::unscented(1.0, -3.0, 0.0)), ConfigError);
  EXPECT_THROW(unit_rule(3, SchemeConfig::unscented(0.0, 0.0, 0.0)), ConfigError);
}

TEST(Cubature5, PointCount) {
  EXPECT_EQ(unit_rule(5, SchemeConfig::cubature5()).size(), 51);
  for (int n = 1; n <= 10; ++n) EXPECT_EQ(unit_rule(n, SchemeConfig::cubature5()).size(), 2 * n * n + 1);
}

TEST(Quadrature, ZeroSpreadCollapsesToMean) {
  Rng rng(1);
  const VectorXd m = random_vector(4, rng);
  for (auto cfg : {SchemeConfig::unscented(), SchemeConfig::cubature5()}) {
    const auto s = generate(m, 1e-15 * MatrixXd::Identity(4, 4), cfg);
    for (const auto& p : s.points) EXPECT_LE((p - m).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Quadrature, ConstantIntegratesToOne) {
  Rng rng(2);
  for (auto cfg : {SchemeConfig::unscented(), SchemeConfig::cubature5()}) {
    for (int n = 1; n <= 7; ++n) {
      const auto g = random_gaussian(n, rng);
      EXPECT_NEAR(expect(generate(g.mean, g.factor, cfg), [](const VectorXd&) { return 1.0; }), 1.0, 1e-12);
    }
  }
}

TEST(Quadrature, QuadraticFormIsTraceOfMP) {
  Rng rng(3);
  for (auto cfg : {SchemeConfig::unscented(), SchemeConfig::cubature5()}) {
    for (int n = 1; n <= 6; ++n) {
      const auto g = random_gaussian(n, rng);
      const MatrixXd M = random_spd(n, rng) - MatrixXd::Identity(n, n);
      const auto s = generate(VectorXd::Zero(n), g.factor, cfg);
      const double got = expect(s, [&](const VectorXd& x) { return x.dot(M * x); });
      EXPECT_NEAR(got, (M * g.cov).trace(), 1e-12);
    }
  }
}

TEST(Quadrature, FourthMomentSeparatesTheRules) {
  auto fourth = [](const VectorXd& x) { return std::pow(x[0], 4); };
  const auto c5 = generate(VectorXd::Zero(1), MatrixXd::Identity(1, 1), SchemeConfig::cubature5());
  const auto ut = generate(VectorXd::Zero(1), MatrixXd::Identity(1, 1), SchemeConfig::unscented(1.0, 0.0, 0.0));
  EXPECT_NEAR(expect(c5, fourth), 3.0, 1e-14);
  EXPECT_NEAR(expect(ut, fourth), 1.0, 1e-14);
  EXPECT_NEAR(gaussian_moment({0, 0, 0, 0}, VectorXd::Zero(1), MatrixXd::Identity(1, 1)), 3.0, 0.0);
}

TEST(Quadrature, NaNNamesThePoint) {
  const auto s = generate(VectorXd::Zero(2), MatrixXd::Identity(2, 2), SchemeConfig::cubature5());
  try {
    expect(s, [&](const VectorXd& x) { return x[0] > 1.0 ? std::numeric_limits<double>::quiet_NaN() : 0.0; });
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("point 1"), std::string::npos) << e.what();
  }
}

TEST(Quadrature, MinusInfinityPropagates) {
  const auto s = generate(VectorXd::Zero(2), MatrixXd::Identity(2, 2), SchemeConfig::unscented());
  const double v = expect(s, [](const VectorXd& x) {
    return x[1] < -0.5 ? -std::numeric_limits<double>::infinity() : 1.0;
  });
  EXPECT_EQ(v, -std::numeric_limits<double>::infinity());
}

TEST(Quadrature, DimensionMismatchIsConfigError) {
  EXPECT_THROW(generate(VectorXd::Zero(3), MatrixXd::Identity(2, 2), SchemeConfig::cubature5()), ConfigError);
}

TEST(QuadratureProps, UnscentedExactToDegreeThree) {
  Rng rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 7;
    const auto g = random_gaussian(n, rng);
    worst = std::max(worst, max_monomial_error(generate(g.mean, g.factor, SchemeConfig::unscented()), g.mean, g.cov, 3));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(QuadratureProps, UnscentedOtherParametersExactToDegreeThree) {
  Rng rng(5);
  for (auto cfg : {SchemeConfig::unscented(0.5, 1.0, 2.0), SchemeConfig::unscented(1.0, 2.0, 0.0)}) {
    for (int n = 1; n <= 5; ++n) {
      const auto g = random_gaussian(n, rng);
      EXPECT_LE(max_monomial_error(generate(g.mean, g.factor, cfg), g.mean, g.cov, 3), 1e-10);
    }
  }
}

TEST(QuadratureProps, UnscentedNotExactAtDegreeFour) {
  const auto s = generate(VectorXd::Zero(2), MatrixXd::Identity(2, 2), SchemeConfig::unscented());
  EXPECT_GT(max_monomial_error(s, VectorXd::Zero(2), MatrixXd::Identity(2, 2), 4), 0.1);
}

TEST(QuadratureProps, CubatureExactToDegreeFive) {
  Rng rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 7;
    const auto g = random_gaussian(n, rng);
    worst = std::max(worst, max_monomial_error(generate(g.mean, g.factor, SchemeConfig::cubature5()), g.mean, g.cov, 5));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(QuadratureProps, AffineCovariance) {
  Rng rng(7);
  for (auto cfg : {SchemeConfig::unscented(), SchemeConfig::cubature5()}) {
    for (int n = 1; n <= 6; ++n) {
      const auto g = random_gaussian(n, rng);
      MatrixXd S = random_spd(n, rng) + random_rotation(n, rng);
      ASSERT_GT(std::abs(S.determinant()), 1e-6);
      const VectorXd t = random_vector(n, rng);
      const auto a = generate(g.mean, g.factor, cfg);
      const auto b = generate(S * g.mean + t, S * g.factor, cfg);
      for (int j = 0; j < a.size(); ++j) EXPECT_LE((b.points[j] - (S * a.points[j] + t)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(QuadratureProps, WeightsMeanAndCovariance) {
  Rng rng(8);
  for (auto cfg : {SchemeConfig::unscented(), SchemeConfig::unscented(0.5, 1.0, 2.0), SchemeConfig::cubature5()}) {
    for (int n = 1; n <= 7; ++n) {
      const auto g = random_gaussian(n, rng);
      const auto s = generate(g.mean, g.factor, cfg);
      double wsum = 0.0;
      VectorXd m = VectorXd::Zero(n);
      for (int j = 0; j < s.size(); ++j) {
        wsum += s.weights[j];
        m += s.weights[j] * s.points[j];
      }
      MatrixXd P = MatrixXd::Zero(n, n);
      for (int j = 0; j < s.size(); ++j) P += s.cov_weights[j] * (s.points[j] - m) * (s.points[j] - m).transpose();
      EXPECT_NEAR(wsum, 1.0, 1e-12);
      EXPECT_LE((m - g.mean).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LE((P - g.cov).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(QuadratureProps, PointsAreAffineInMeanAndFactor) {
  Rng rng(9);
  const int n = 4;
  for (auto cfg : {SchemeConfig::unscented(), SchemeConfig::cubature5()}) {
    const auto a = random_gaussian(n, rng), b = random_gaussian(n, rng);
    const double t = 0.3;
    const auto sa = generate(a.mean, a.factor, cfg), sb = generate(b.mean, b.factor, cfg);
    const auto sm = generate((1 - t) * a.mean + t * b.mean, (1 - t) * a.factor + t * b.factor, cfg);
    for (int j = 0; j < sa.size(); ++j)
      EXPECT_LE((sm.points[j] - ((1 - t) * sa.points[j] + t * sb.points[j])).cwiseAbs().maxCoeff(), 1e-13);
  }
}
