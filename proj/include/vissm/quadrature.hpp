#pragma once

// Sigma-point rules for Gaussian expectations E[f(ξ)], ξ ~ N(m, L Lᵀ).
//
// Every rule is a fixed set of unit points z_j with weights w_j; the sigma
// points are ξ_j = m + L z_j, so each point is affine in (m, L). That makes
// the derivatives of Σ_j w_j f(ξ_j) with respect to the mean and the Cholesky
// entries a direct contraction of the per-point derivatives of f.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vissm/error.hpp"

namespace vissm {

enum class SchemeKind { Unscented, Cubature5 };

struct SchemeConfig {
  SchemeKind kind = SchemeKind::Cubature5;
  // Unscented transform parameters.
  double alpha = 1.0;
  double kappa = 0.0;
  double beta = 0.0;

  static SchemeConfig unscented(double alpha = 1.0, double kappa = 0.0, double beta = 0.0) {
    return {SchemeKind::Unscented, alpha, kappa, beta};
  }
  static SchemeConfig cubature5() { return {}; }
};

inline std::string to_string(SchemeKind k) { return k == SchemeKind::Unscented ? "unscented" : "cubature5"; }

/// Unit points z_j (columns) and weights of a rule in dimension n.
struct UnitRule {
  int n = 0;
  SchemeKind scheme = SchemeKind::Cubature5;
  Eigen::MatrixXd points;            // n × n_s
  std::vector<double> weights;      // mean weights
  std::vector<double> cov_weights;  // covariance weights (differ from `weights` at the centre for the UT)

  int size() const { return static_cast<int>(weights.size()); }
};

inline UnitRule unit_rule(int n, const SchemeConfig& cfg) {
  if (n < 0) throw ConfigError("quadrature: negative dimension");
  UnitRule r;
  r.n = n;
  r.scheme = cfg.kind;
  if (cfg.kind == SchemeKind::Unscented) {
    if (!(cfg.alpha > 0.0)) throw ConfigError("unscented: alpha must be positive");
    const double spread = cfg.alpha * cfg.alpha * (n + cfg.kappa);  // n + λ
    if (n > 0 && !(spread > 0.0)) throw ConfigError("unscented: degenerate spread, n + lambda must be positive");
    if (n == 0) {
      r.points = Eigen::MatrixXd::Zero(0, 1);
      r.weights = {1.0};
      r.cov_weights = {1.0};
      return r;
    }
    const double lambda = spread - n;
    const double s = std::sqrt(spread);
    r.points = Eigen::MatrixXd::Zero(n, 2 * n + 1);
    r.weights.assign(2 * n + 1, 0.5 / spread);
    r.weights[0] = lambda / spread;
    r.cov_weights = r.weights;
    r.cov_weights[0] += 1.0 - cfg.alpha * cfg.alpha + cfg.beta;
    for (int i = 0; i < n; ++i) {
      r.points(i, 1 + i) = s;
      r.points(i, 1 + n + i) = -s;
    }
    return r;
  }

  // Fifth-degree fully symmetric rule with 2n² + 1 points: the centre, 2n axis
  // points at ±sqrt(n+2) e_i and 2n(n−1) points at sqrt((n+2)/2)(±e_i ± e_j).
  if (n == 0) {
    r.points = Eigen::MatrixXd::Zero(0, 1);
    r.weights = {1.0};
    r.cov_weights = {1.0};
    return r;
  }
  const double np2 = n + 2.0;
  const int ns = 2 * n * n + 1;
  r.points = Eigen::MatrixXd::Zero(n, ns);
  r.weights.assign(ns, 0.0);
  r.weights[0] = 2.0 / np2;
  int j = 1;
  const double axis = std::sqrt(np2);
  const double w_axis = (4.0 - n) / (2.0 * np2 * np2);
  for (int i = 0; i < n; ++i) {
    r.points(i, j) = axis;
    r.weights[j++] = w_axis;
    r.points(i, j) = -axis;
    r.weights[j++] = w_axis;
  }
  const double diag = std::sqrt(np2 / 2.0);
  const double w_pair = 1.0 / (np2 * np2);
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      for (double sa : {1.0, -1.0}) {
        for (double sb : {1.0, -1.0}) {
          r.points(a, j) = sa * diag;
          r.points(b, j) = sb * diag;
          r.weights[j++] = w_pair;
        }
      }
    }
  }
  r.cov_weights = r.weights;
  return r;
}

struct SigmaPointSet {
  SchemeKind scheme = SchemeKind::Cubature5;
  std::vector<Eigen::VectorXd> points;
  std::vector<double> weights;
  std::vector<double> cov_weights;

  int size() const { return static_cast<int>(points.size()); }
};

/// Sigma points of N(mean, cholT cholTᵀ); cholT is the lower factor P^{T/2}.
inline SigmaPointSet generate(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cholT, const UnitRule& rule) {
  if (cholT.rows() != mean.size() || cholT.cols() != mean.size() || rule.n != mean.size())
    throw ConfigError("quadrature: dimension mismatch between mean, factor and rule");
  SigmaPointSet s;
  s.scheme = rule.scheme;
  s.weights = rule.weights;
  s.cov_weights = rule.cov_weights;
  s.points.reserve(rule.size());
  for (int j = 0; j < rule.size(); ++j) s.points.emplace_back(mean + cholT * rule.points.col(j));
  return s;
}

inline SigmaPointSet generate(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cholT, const SchemeConfig& cfg) {
  return generate(mean, cholT, unit_rule(static_cast<int>(mean.size()), cfg));
}

/// Σ_j w_j f(ξ_j). −∞ propagates; NaN is an error naming the point.
inline double expect(const SigmaPointSet& set, const std::function<double(const Eigen::VectorXd&)>& f) {
  double acc = 0.0;
  bool minus_inf = false;
  for (int j = 0; j < set.size(); ++j) {
    if (set.weights[j] == 0.0) continue;
    const double v = f(set.points[j]);
    if (std::isnan(v)) throw NumericalError("quadrature: NaN at sigma point " + std::to_string(j));
    // −∞ at any point wins regardless of the sign of its weight.
    if (v == -std::numeric_limits<double>::infinity()) minus_inf = true;
    acc += set.weights[j] * v;
  }
  return minus_inf ? -std::numeric_limits<double>::infinity() : acc;
}

/// Value, gradient and Hessian of f at one point with respect to (ξ, η).
struct PointDerivatives {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

/// Derivatives of Σ_j w_j f(m + Uᵀ z_j, η) with respect to the local parameter
/// vector [m (d), upper entries of U row-major (d(d+1)/2), η (neta)].
struct LocalDerivatives {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

inline int upper_count(int d) { return d * (d + 1) / 2; }

/// Row-major position of U(r, c), r ≤ c, among the upper entries of a d × d matrix.
inline int upper_index(int d, int r, int c) { return r * d - r * (r - 1) / 2 + (c - r); }

/// Contracts per-point derivatives through ξ_j = m + Uᵀ z_j. Each sigma point
/// depends on U(a, b) only via ξ_b += U(a, b) z_a.
inline LocalDerivatives contract_affine(const UnitRule& rule, int neta, const std::vector<PointDerivatives>& pts,
                                        bool with_hessian) {
  const int d = rule.n;
  const int nu = upper_count(d);
  const int q = d + nu + neta;
  const int m = d + neta;
  LocalDerivatives out;
  out.gradient = Eigen::VectorXd::Zero(q);
  if (with_hessian) out.hessian = Eigen::MatrixXd::Zero(q, q);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(m, q);
  for (int i = 0; i < d; ++i) G(i, i) = 1.0;
  for (int e = 0; e < neta; ++e) G(d + e, d + nu + e) = 1.0;
  for (int j = 0; j < rule.size(); ++j) {
    const double w = rule.weights[j];
    if (w == 0.0) continue;
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b) G(b, d + upper_index(d, a, b)) = rule.points(a, j);
    out.value += w * pts[j].value;
    out.gradient.noalias() += w * (G.transpose() * pts[j].gradient);
    if (with_hessian) out.hessian.noalias() += w * (G.transpose() * (pts[j].hessian * G));
  }
  if (with_hessian) out.hessian = 0.5 * (out.hessian + out.hessian.transpose());
  return out;
}

}  // namespace vissm
