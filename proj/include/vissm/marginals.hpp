#pragma once

// Marginals of a fitted posterior and their plot data.
//
// CSV rows are long format with columns record,i,j,x,y,value:
//   mean      i            value = mean of coordinate i
//   cov       i j          value = covariance
//   density   i   x        value = 1-D marginal density (one coordinate)
//   density   i j x y      value = 2-D density (pair output)
//   ellipse_Ns i j x y     value = point index, N = 1, 2, 3 standard deviations

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/Core>

#include "vissm/error.hpp"
#include "vissm/gaussian.hpp"
#include "vissm/io.hpp"

namespace vissm::marginal {

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline constexpr int kEllipsePoints = 64;

/// θ marginal taken from pair 1.
inline Gaussian theta(const BetaParams& beta) {
  if (beta.ntheta == 0) throw ConfigError("marginals: the posterior has no θ");
  if (beta.T() == 0) {
    if (!beta.head) throw ConfigError("marginals: empty posterior");
    return {beta.head->mean.head(beta.ntheta), beta.head->covariance().topLeftCorner(beta.ntheta, beta.ntheta)};
  }
  const auto& q = beta.pairs.front();
  return {q.mu_theta(), Eigen::MatrixXd(q.A().transpose() * q.A())};
}

/// Marginal of x_k, k = 1..T+1: the first slot of pair k, or the second slot of pair T for k = T+1.
inline Gaussian state(const BetaParams& beta, int k) {
  const int T = beta.T(), nx = beta.nx;
  if (k < 1 || k > T + 1) throw ConfigError("marginals: state index " + std::to_string(k) + " outside 1.." + std::to_string(T + 1));
  GaussianFactor g;
  if (T == 0) g = *beta.head;
  else if (k <= T) g = marginal_theta_x(beta.pairs[static_cast<std::size_t>(k - 1)], Slot::First);
  else g = marginal_theta_x(beta.pairs.back(), Slot::Second);
  const Eigen::MatrixXd P = g.covariance();
  return {g.mean.tail(nx), P.bottomRightCorner(nx, nx).eval()};
}

inline Gaussian theta_pair(const BetaParams& beta, int i, int j) {
  const auto t = theta(beta);
  const int n = static_cast<int>(t.mean.size());
  if (i < 0 || j < 0 || i >= n || j >= n || i == j)
    throw ConfigError("marginals: pair indices must be distinct and in 0.." + std::to_string(n - 1));
  Gaussian g;
  g.mean = Eigen::Vector2d(t.mean[i], t.mean[j]);
  g.cov.resize(2, 2);
  g.cov << t.cov(i, i), t.cov(i, j), t.cov(j, i), t.cov(j, j);
  return g;
}

inline double normal_pdf(double x, double m, double var) {
  const double z = x - m;
  return std::exp(-0.5 * z * z / var) / std::sqrt(2.0 * std::acos(-1.0) * var);
}

/// Contour of the 2-D Gaussian at `level` standard deviations: m + s·L[cos t, sin t] with LLᵀ = P.
inline std::vector<Eigen::Vector2d> ellipse(const Gaussian& g, double level, int points = kEllipsePoints) {
  const Eigen::Matrix2d L = Eigen::LLT<Eigen::Matrix2d>(Eigen::Matrix2d(g.cov)).matrixL();
  std::vector<Eigen::Vector2d> out;
  const double two_pi = 2.0 * std::acos(-1.0);
  for (int p = 0; p < points; ++p) {
    const double t = two_pi * p / points;
    out.push_back(Eigen::Vector2d(g.mean) + level * L * Eigen::Vector2d(std::cos(t), std::sin(t)));
  }
  return out;
}

namespace detail {

inline std::string row(const std::string& rec, const std::string& i, const std::string& j, const std::string& x,
                       const std::string& y, double v) {
  return rec + "," + i + "," + j + "," + x + "," + y + "," + io::fmt(v) + "\n";
}

inline std::string header(const std::string& hash) {
  return "# config-hash: " + hash + "\nrecord,i,j,x,y,value\n";
}

inline std::string moments(const Gaussian& g, const std::vector<int>& idx) {
  std::string s;
  const auto n = static_cast<int>(g.mean.size());
  auto label = [&](int a) { return std::to_string(idx.empty() ? a : idx[static_cast<std::size_t>(a)]); };
  for (int a = 0; a < n; ++a) s += row("mean", label(a), "", "", "", g.mean[a]);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) s += row("cov", label(a), label(b), "", "", g.cov(a, b));
  return s;
}

}  // namespace detail

/// Grids span the mean ± 4 standard deviations.
inline std::string csv(const Gaussian& g, int grid, const std::string& hash) {
  std::string s = detail::header(hash) + detail::moments(g, {});
  for (int a = 0; a < g.mean.size(); ++a) {
    const double sd = std::sqrt(g.cov(a, a));
    for (int p = 0; p < grid; ++p) {
      const double x = g.mean[a] - 4.0 * sd + 8.0 * sd * p / (grid - 1);
      s += detail::row("density", std::to_string(a), "", io::fmt(x), "", normal_pdf(x, g.mean[a], g.cov(a, a)));
    }
  }
  return s;
}

inline std::string pair_csv(const Gaussian& g, const std::vector<int>& idx, int grid, const std::string& hash) {
  std::string s = detail::header(hash) + detail::moments(g, idx);
  const std::string si = std::to_string(idx[0]), sj = std::to_string(idx[1]);
  const Eigen::Matrix2d P = g.cov;
  const Eigen::Matrix2d Pinv = P.inverse();
  const double norm = 1.0 / (2.0 * std::acos(-1.0) * std::sqrt(P.determinant()));
  const double sx = std::sqrt(P(0, 0)), sy = std::sqrt(P(1, 1));
  for (int p = 0; p < grid; ++p)
    for (int q = 0; q < grid; ++q) {
      const double x = g.mean[0] - 4.0 * sx + 8.0 * sx * p / (grid - 1);
      const double y = g.mean[1] - 4.0 * sy + 8.0 * sy * q / (grid - 1);
      const Eigen::Vector2d z(x - g.mean[0], y - g.mean[1]);
      s += detail::row("density", si, sj, io::fmt(x), io::fmt(y), norm * std::exp(-0.5 * z.dot(Pinv * z)));
    }
  for (int level = 1; level <= 3; ++level) {
    const auto pts = ellipse(g, level);
    for (std::size_t p = 0; p < pts.size(); ++p)
      s += detail::row("ellipse_" + std::to_string(level) + "s", si, sj, io::fmt(pts[p][0]), io::fmt(pts[p][1]),
                       static_cast<double>(p));
  }
  return s;
}

}  // namespace vissm::marginal
