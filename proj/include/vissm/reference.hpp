#pragma once

// Reference posteriors: the Kalman filter with RTS smoothing for linear-Gaussian
// models, and a bootstrap particle filter with backward-simulation smoothing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "vissm/error.hpp"
#include "vissm/gaussian.hpp"
#include "vissm/linalg.hpp"
#include "vissm/model.hpp"
#include "vissm/models/lgssm.hpp"

namespace vissm {

struct SmootherResult {
  // Index k = 0..T−1 for filtered quantities (after y_k), k = 0..T for predicted and smoothed.
  std::vector<Eigen::VectorXd> filtered_mean;
  std::vector<Eigen::MatrixXd> filtered_cov;
  std::vector<Eigen::VectorXd> predicted_mean;
  std::vector<Eigen::MatrixXd> predicted_cov;
  std::vector<Eigen::VectorXd> smoothed_mean;
  std::vector<Eigen::MatrixXd> smoothed_cov;
  /// cov(x_k, x_{k+1} | y_{1:T}), k = 0..T−1.
  std::vector<Eigen::MatrixXd> cross_cov;
  double loglik = 0.0;

  int T() const { return static_cast<int>(filtered_mean.size()); }
};

/// Kalman filter and RTS smoother for an LGSSM with θ held fixed (x_1 is conditioned on θ).
inline SmootherResult kalman_smoother(const LgssmModel& model, const Dataset& data,
                                      const Eigen::VectorXd& theta = Eigen::VectorXd()) {
  const auto& d = model.dims();
  const auto& cfg = model.config();
  if (theta.size() != d.ntheta) throw ConfigError("kalman: theta has wrong dimension");
  const int T = data.T(), nx = d.nx;
  const Eigen::MatrixXd A = model.A_at(theta), B = model.B_at(theta), Q = model.Q_at(theta);
  const Eigen::MatrixXd& C = cfg.C;
  const Eigen::MatrixXd& R = cfg.R;

  SmootherResult r;
  Eigen::VectorXd m = cfg.prior_mean.tail(nx);
  Eigen::MatrixXd P = cfg.prior_cov.bottomRightCorner(nx, nx);
  if (d.ntheta > 0) std::tie(m, P) = condition_on_head(cfg.prior_mean, cfg.prior_cov, theta);

  for (int k = 0; k < T; ++k) {
    r.predicted_mean.push_back(m);
    r.predicted_cov.push_back(P);
    const Eigen::VectorXd y = data.y[k];
    if (y.size() != d.ny) throw ConfigError("kalman: measurement " + std::to_string(k + 1) + " has wrong dimension");
    const Eigen::VectorXd e = y - C * m;
    const Eigen::MatrixXd S = C * P * C.transpose() + R;
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success)
      throw NumericalError("kalman: innovation covariance not positive definite at step " + std::to_string(k + 1));
    const Eigen::MatrixXd Ls = llt.matrixL();
    r.loglik += -0.5 * (llt.matrixL().solve(e).squaredNorm() + d.ny * kLog2Pi) -
                Ls.diagonal().array().log().sum();
    const Eigen::MatrixXd K = llt.solve(C * P).transpose();  // P Cᵀ S⁻¹
    m = m + K * e;
    const Eigen::MatrixXd IKC = Eigen::MatrixXd::Identity(nx, nx) - K * C;
    P = IKC * P * IKC.transpose() + K * R * K.transpose();
    r.filtered_mean.push_back(m);
    r.filtered_cov.push_back(P);
    m = A * m;
    if (d.nu > 0) m += B * data.u[k];
    P = A * P * A.transpose() + Q;
    P = 0.5 * (P + P.transpose());
  }
  r.predicted_mean.push_back(m);
  r.predicted_cov.push_back(P);

  r.smoothed_mean.assign(T + 1, Eigen::VectorXd());
  r.smoothed_cov.assign(T + 1, Eigen::MatrixXd());
  r.cross_cov.assign(T, Eigen::MatrixXd());
  r.smoothed_mean[T] = m;
  r.smoothed_cov[T] = P;
  for (int k = T - 1; k >= 0; --k) {
    const Eigen::MatrixXd& Pf = r.filtered_cov[k];
    const Eigen::MatrixXd& Pp = r.predicted_cov[k + 1];
    Eigen::LLT<Eigen::MatrixXd> llt(Pp);
    if (llt.info() != Eigen::Success)
      throw NumericalError("kalman: predicted covariance not positive definite at step " + std::to_string(k + 2));
    const Eigen::MatrixXd G = llt.solve(A * Pf).transpose();  // Pf Aᵀ Pp⁻¹
    r.smoothed_mean[k] = r.filtered_mean[k] + G * (r.smoothed_mean[k + 1] - r.predicted_mean[k + 1]);
    Eigen::MatrixXd Ps = Pf + G * (r.smoothed_cov[k + 1] - Pp) * G.transpose();
    r.smoothed_cov[k] = 0.5 * (Ps + Ps.transpose());
    r.cross_cov[k] = G * r.smoothed_cov[k + 1];
  }
  return r;
}

/// Exact smoothing pairs as a BetaParams (models without θ).
inline BetaParams to_beta(const SmootherResult& s, int nx, const Eigen::VectorXd& eta = Eigen::VectorXd()) {
  BetaParams b;
  b.ntheta = 0;
  b.nx = nx;
  b.eta = eta;
  for (int k = 0; k < s.T(); ++k) {
    Eigen::VectorXd mean(2 * nx);
    mean << s.smoothed_mean[k], s.smoothed_mean[k + 1];
    Eigen::MatrixXd P(2 * nx, 2 * nx);
    P << s.smoothed_cov[k], s.cross_cov[k], s.cross_cov[k].transpose(), s.smoothed_cov[k + 1];
    b.pairs.emplace_back(0, nx, mean, upper_cholesky(0.5 * (P + P.transpose()), "smoothed pair covariance"));
  }
  if (s.T() == 0) b.head = GaussianFactor{s.smoothed_mean[0], upper_cholesky(s.smoothed_cov[0], "smoothed covariance")};
  return b;
}

struct ParticleOptions {
  int particles = 1000;
  /// Number of backward-simulated trajectories.
  int trajectories = 500;
  std::uint64_t seed = 0;
};

struct ParticleResult {
  int N = 0;
  std::uint64_t seed = 0;
  /// particles[k][i] and normalized weights[k][i] for k = 0..T (the last set is unweighted).
  std::vector<std::vector<Eigen::VectorXd>> particles;
  std::vector<std::vector<double>> weights;
  std::vector<double> ess;
  double loglik = 0.0;
  /// trajectories[m][k], k = 0..T.
  std::vector<std::vector<Eigen::VectorXd>> trajectories;
  std::vector<std::string> warnings;

  int T() const { return static_cast<int>(particles.size()) - 1; }

  Eigen::VectorXd smoothed_mean(int k) const {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(trajectories.front()[k].size());
    for (const auto& t : trajectories) m += t[k];
    return m / static_cast<double>(trajectories.size());
  }

  Eigen::MatrixXd smoothed_cov(int k) const {
    const Eigen::VectorXd m = smoothed_mean(k);
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(m.size(), m.size());
    for (const auto& t : trajectories) P += (t[k] - m) * (t[k] - m).transpose();
    return P / static_cast<double>(std::max<std::size_t>(1, trajectories.size() - 1));
  }
};

namespace detail {

inline std::vector<int> systematic_resample(const std::vector<double>& w, Rng& rng) {
  const int N = static_cast<int>(w.size());
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double u = u01(rng) / N;
  std::vector<int> idx(N);
  double cum = w[0];
  int j = 0;
  for (int i = 0; i < N; ++i) {
    const double t = u + static_cast<double>(i) / N;
    while (t > cum && j < N - 1) cum += w[++j];
    idx[i] = j;
  }
  return idx;
}

inline double normalize_log_weights(std::vector<double>& lw) {
  const double mx = *std::max_element(lw.begin(), lw.end());
  if (mx == -std::numeric_limits<double>::infinity()) return mx;
  double s = 0.0;
  for (double& v : lw) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : lw) v /= s;
  return mx + std::log(s);
}

}  // namespace detail

/// Bootstrap particle filter under the factorization p(y_k | x_k) p(x_{k+1} | x_k, y_k),
/// systematic resampling, then backward simulation of smoothed trajectories.
inline ParticleResult particle_smoother(const Model& model, const Dataset& data, const Eigen::VectorXd& theta,
                                        const Eigen::VectorXd& eta, const ParticleOptions& opt = {}) {
  if (!model.supports_particle_filter() || !model.can_sample())
    throw UnsupportedError("model '" + model.name() + "' does not support particle smoothing");
  if (opt.particles < 1) throw ConfigError("particles must be at least 1");
  if (opt.trajectories < 1) throw ConfigError("trajectories must be at least 1");
  const int T = data.T(), N = opt.particles;
  ParticleResult r;
  r.N = N;
  r.seed = opt.seed;
  Rng rng(opt.seed);

  std::vector<Eigen::VectorXd> x(N);
  for (int i = 0; i < N; ++i) x[i] = model.sample_initial(theta, eta, rng);
  for (int k = 0; k < T; ++k) {
    std::vector<double> lw(N);
    for (int i = 0; i < N; ++i) lw[i] = model.measurement_logpdf(data.y_at(k), x[i], theta, eta, data.u_at(k), k);
    const double lse = detail::normalize_log_weights(lw);
    if (lse == -std::numeric_limits<double>::infinity())
      throw NumericalError("particle filter: all weights are zero at step " + std::to_string(k + 1));
    r.loglik += lse - std::log(static_cast<double>(N));
    double s2 = 0.0;
    for (double w : lw) s2 += w * w;
    r.ess.push_back(1.0 / s2);
    if (r.ess.back() < 2.0 && N >= 2)
      r.warnings.push_back("effective sample size " + std::to_string(r.ess.back()) + " below 2 at step " +
                           std::to_string(k + 1));
    r.particles.push_back(x);
    r.weights.push_back(lw);
    const auto anc = detail::systematic_resample(lw, rng);
    std::vector<Eigen::VectorXd> next(N);
    for (int i = 0; i < N; ++i)
      next[i] = model.sample_transition(x[anc[i]], data.y_at(k), theta, eta, data.u_at(k), k, rng);
    x = std::move(next);
  }
  r.particles.push_back(x);
  r.weights.emplace_back(N, 1.0 / N);
  r.ess.push_back(N);

  // Backward simulation; rejection sampling against the transition bound when available.
  const auto bound = model.transition_logpdf_bound(theta, eta);
  std::uniform_int_distribution<int> pick(0, N - 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  r.trajectories.assign(opt.trajectories, std::vector<Eigen::VectorXd>(T + 1));
  for (int m = 0; m < opt.trajectories; ++m) r.trajectories[m][T] = r.particles[T][pick(rng)];
  for (int k = T - 1; k >= 0; --k) {
    const auto& W = r.weights[k];
    std::vector<double> cum(N);
    std::partial_sum(W.begin(), W.end(), cum.begin());
    std::uniform_real_distribution<double> uw(0.0, cum.back());
    auto draw = [&] {
      const auto it = std::lower_bound(cum.begin(), cum.end(), uw(rng));
      return std::min<int>(static_cast<int>(it - cum.begin()), N - 1);
    };
    for (int m = 0; m < opt.trajectories; ++m) {
      const Eigen::VectorXd& xn = r.trajectories[m][k + 1];
      int chosen = -1;
      if (bound) {
        for (int attempt = 0; attempt < 64 && chosen < 0; ++attempt) {
          const int i = draw();
          const double lp = model.transition_logpdf(xn, r.particles[k][i], data.y_at(k), theta, eta, data.u_at(k), k);
          if (std::log(u01(rng)) <= lp - *bound) chosen = i;
        }
      }
      if (chosen < 0) {
        std::vector<double> lw(N);
        for (int i = 0; i < N; ++i)
          lw[i] = W[i] > 0.0 ? std::log(W[i]) + model.transition_logpdf(xn, r.particles[k][i], data.y_at(k), theta,
                                                                         eta, data.u_at(k), k)
                             : -std::numeric_limits<double>::infinity();
        if (detail::normalize_log_weights(lw) == -std::numeric_limits<double>::infinity())
          throw NumericalError("backward simulation: no particle supports the trajectory at step " +
                               std::to_string(k + 1));
        std::partial_sum(lw.begin(), lw.end(), lw.begin());
        const double u = u01(rng) * lw.back();
        chosen = std::min<int>(static_cast<int>(std::lower_bound(lw.begin(), lw.end(), u) - lw.begin()), N - 1);
      }
      r.trajectories[m][k] = r.particles[k][chosen];
    }
  }
  return r;
}

}  // namespace vissm
