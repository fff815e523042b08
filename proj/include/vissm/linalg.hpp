#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "vissm/ad.hpp"
#include "vissm/error.hpp"

namespace vissm {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Upper-triangular U with positive diagonal and UᵀU = P.
inline Eigen::MatrixXd upper_cholesky(const Eigen::MatrixXd& P, const std::string& what = "matrix") {
  if (P.rows() != P.cols()) throw DomainError(what + " is not square");
  if (P.size() == 0) return Eigen::MatrixXd(0, 0);
  Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (P + P.transpose()));
  if (llt.info() != Eigen::Success) throw DomainError(what + " is not symmetric positive definite");
  Eigen::MatrixXd U = llt.matrixU();
  for (Eigen::Index i = 0; i < U.rows(); ++i) {
    if (!(U(i, i) > 0.0)) throw DomainError(what + " is not symmetric positive definite");
  }
  return U;
}

inline bool is_spd(const Eigen::MatrixXd& P) {
  if (P.rows() != P.cols()) return false;
  if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + P.cwiseAbs().maxCoeff())) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(P);
  return llt.info() == Eigen::Success;
}

/// log N(x; mean, cov) evaluated densely.
inline double gaussian_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  const Eigen::Index d = x.size();
  if (d == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw DomainError("covariance is not positive definite");
  const Eigen::VectorXd r = llt.matrixL().solve(x - mean);
  const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * (r.squaredNorm() + logdet + static_cast<double>(d) * kLog2Pi);
}

/// Row-major lower Cholesky factor of a small dense matrix with generic scalar.
template <class S>
std::vector<S> cholesky_lower(const std::vector<S>& m, int n) {
  using std::sqrt;
  std::vector<S> L(static_cast<std::size_t>(n) * n, S(0.0));
  for (int j = 0; j < n; ++j) {
    S d = m[j * n + j];
    for (int k = 0; k < j; ++k) d = d - L[j * n + k] * L[j * n + k];
    if (!(ad::value(d) > 0.0)) throw NumericalError("matrix is not positive definite at pivot " + std::to_string(j));
    L[j * n + j] = sqrt(d);
    for (int i = j + 1; i < n; ++i) {
      S s = m[i * n + j];
      for (int k = 0; k < j; ++k) s = s - L[i * n + k] * L[j * n + k];
      L[i * n + j] = s / L[j * n + j];
    }
  }
  return L;
}

/// Solves L w = r for row-major lower-triangular L.
template <class S>
std::vector<S> forward_substitute(const std::vector<S>& L, const std::vector<S>& r, int n) {
  std::vector<S> w(n, S(0.0));
  for (int i = 0; i < n; ++i) {
    S s = r[i];
    for (int k = 0; k < i; ++k) s = s - L[i * n + k] * w[k];
    w[i] = s / L[i * n + i];
  }
  return w;
}

/// log N(r; 0, L Lᵀ) for row-major lower L.
template <class S>
S gaussian_residual_logpdf(const std::vector<S>& r, const std::vector<S>& L, int n) {
  using std::log;
  const auto w = forward_substitute(L, r, n);
  S quad(0.0);
  S logdet(0.0);
  for (int i = 0; i < n; ++i) {
    quad = quad + w[i] * w[i];
    logdet = logdet + log(L[i * n + i]);
  }
  return -0.5 * quad - logdet - 0.5 * n * kLog2Pi;
}

/// Moments of the trailing block of N(mean, cov) conditioned on the leading block taking `head`.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> condition_on_head(const Eigen::VectorXd& mean,
                                                                     const Eigen::MatrixXd& cov,
                                                                     const Eigen::VectorXd& head) {
  const Eigen::Index h = head.size(), t = mean.size() - h;
  Eigen::VectorXd m = mean.tail(t);
  Eigen::MatrixXd c = cov.bottomRightCorner(t, t);
  if (h > 0) {
    const Eigen::MatrixXd Sth = cov.bottomLeftCorner(t, h);
    const Eigen::MatrixXd G = cov.topLeftCorner(h, h).llt().solve(Sth.transpose()).transpose();
    m += G * (head - mean.head(h));
    c -= G * Sth.transpose();
  }
  return {m, 0.5 * (c + c.transpose())};
}

inline std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline Eigen::VectorXd to_eigen(std::span<const double> v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace vissm
