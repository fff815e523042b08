#pragma once

// Linear-Gaussian state-space model
//   x_{k+1} = A x_k + B u_k + v_k,  v_k ~ N(0, Q)
//   y_k     = C x_k + w_k,          w_k ~ N(0, R)
// with a Gaussian prior over (θ, x_1). θ may replace entries of A or B, or set
// a decoupled diagonal entry of Q through its log standard deviation.

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "vissm/linalg.hpp"
#include "vissm/model.hpp"

namespace vissm {

enum class ThetaTarget { A, B, QLogSd };

struct ThetaSlot {
  ThetaTarget target = ThetaTarget::A;
  int row = 0;
  int col = 0;
};

struct LgssmConfig {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;  // nx × nu, may have zero columns
  Eigen::MatrixXd C;
  Eigen::MatrixXd Q;
  Eigen::MatrixXd R;
  Eigen::VectorXd prior_mean;  // over (θ, x_1)
  Eigen::MatrixXd prior_cov;
  std::vector<ThetaSlot> theta_layout;
};

class LgssmModel final : public ModelBase<LgssmModel> {
 public:
  explicit LgssmModel(LgssmConfig cfg) : cfg_(std::move(cfg)) {
    const auto nx = static_cast<int>(cfg_.A.rows());
    if (nx < 1 || cfg_.A.cols() != nx) throw ConfigError("lgssm: A must be square and non-empty");
    if (cfg_.B.size() == 0) cfg_.B.resize(nx, 0);
    if (cfg_.B.rows() != nx) throw ConfigError("lgssm: B must have nx rows");
    const auto ny = static_cast<int>(cfg_.C.rows());
    if (ny < 1 || cfg_.C.cols() != nx) throw ConfigError("lgssm: C must be ny × nx");
    if (cfg_.Q.rows() != nx || cfg_.Q.cols() != nx || !is_spd(cfg_.Q)) throw ConfigError("lgssm: Q must be nx × nx SPD");
    if (cfg_.R.rows() != ny || cfg_.R.cols() != ny || !is_spd(cfg_.R)) throw ConfigError("lgssm: R must be ny × ny SPD");
    const auto nth = static_cast<int>(cfg_.theta_layout.size());
    dims_ = {.nx = nx, .ny = ny, .nu = static_cast<int>(cfg_.B.cols()), .ntheta = nth, .neta = 0};
    for (const auto& s : cfg_.theta_layout) {
      switch (s.target) {
        case ThetaTarget::A:
          if (s.row < 0 || s.row >= nx || s.col < 0 || s.col >= nx) throw ConfigError("lgssm: theta slot outside A");
          break;
        case ThetaTarget::B:
          if (s.row < 0 || s.row >= nx || s.col < 0 || s.col >= dims_.nu)
            throw ConfigError("lgssm: theta slot outside B");
          break;
        case ThetaTarget::QLogSd:
          if (s.row < 0 || s.row >= nx || s.col != s.row) throw ConfigError("lgssm: Q theta slot must be diagonal");
          for (int j = 0; j < nx; ++j) {
            if (j != s.row && (cfg_.Q(s.row, j) != 0.0 || cfg_.Q(j, s.row) != 0.0))
              throw ConfigError("lgssm: Q theta slot must be decoupled from other states");
          }
          break;
      }
    }
    const int d = nth + nx;
    if (cfg_.prior_mean.size() != d || cfg_.prior_cov.rows() != d || cfg_.prior_cov.cols() != d)
      throw ConfigError("lgssm: prior over (theta, x1) must have dimension " + std::to_string(d));
    if (!is_spd(cfg_.prior_cov)) throw ConfigError("lgssm: prior covariance must be SPD");
    LQ0_ = Eigen::LLT<Eigen::MatrixXd>(cfg_.Q).matrixL();
    LR_ = Eigen::LLT<Eigen::MatrixXd>(cfg_.R).matrixL();
    prior_L_ = Eigen::LLT<Eigen::MatrixXd>(cfg_.prior_cov).matrixL();
    prior_logdet_ = 2.0 * prior_L_.diagonal().array().log().sum();
  }

  std::string name() const override { return "lgssm"; }
  const LgssmConfig& config() const { return cfg_; }

  /// A, B, Q evaluated at numeric θ.
  Eigen::MatrixXd A_at(const Eigen::VectorXd& theta) const { return fill(cfg_.A, ThetaTarget::A, theta); }
  Eigen::MatrixXd B_at(const Eigen::VectorXd& theta) const { return fill(cfg_.B, ThetaTarget::B, theta); }
  Eigen::MatrixXd Q_at(const Eigen::VectorXd& theta) const {
    Eigen::MatrixXd Q = cfg_.Q;
    for (std::size_t i = 0; i < cfg_.theta_layout.size(); ++i) {
      const auto& s = cfg_.theta_layout[i];
      if (s.target == ThetaTarget::QLogSd) Q(s.row, s.row) = std::exp(2.0 * theta[static_cast<Eigen::Index>(i)]);
    }
    return Q;
  }

  template <class S>
  S joint(const StepArgs<S>& a) const {
    const auto r = residual_t(a);
    const auto L = noise_chol_t<S>(a.theta, a.eta);
    return gaussian_residual_logpdf(r, L, dims_.nx + dims_.ny);
  }

  template <class S>
  std::vector<S> residual_t(const StepArgs<S>& a) const {
    const int nx = dims_.nx, ny = dims_.ny, nu = dims_.nu;
    const auto A = matrix_t<S>(cfg_.A, ThetaTarget::A, a.theta);
    const auto B = matrix_t<S>(cfg_.B, ThetaTarget::B, a.theta);
    std::vector<S> r(nx + ny, S(0.0));
    for (int i = 0; i < nx; ++i) {
      S s = a.x_next[i];
      for (int j = 0; j < nx; ++j) s = s - A[i * nx + j] * a.x[j];
      for (int j = 0; j < nu; ++j) s = s - B[i * nu + j] * a.u[j];
      r[i] = s;
    }
    for (int i = 0; i < ny; ++i) {
      S s(a.y[i]);
      for (int j = 0; j < nx; ++j) s = s - cfg_.C(i, j) * a.x[j];
      r[nx + i] = s;
    }
    return r;
  }

  /// Block-diagonal lower factor of blockdiag(Q(θ), R).
  template <class S>
  std::vector<S> noise_chol_t(std::span<const S> theta, std::span<const S> /*eta*/) const {
    using std::exp;
    const int nx = dims_.nx, ny = dims_.ny, m = nx + ny;
    std::vector<S> L(static_cast<std::size_t>(m) * m, S(0.0));
    for (int i = 0; i < nx; ++i)
      for (int j = 0; j <= i; ++j) L[i * m + j] = S(LQ0_(i, j));
    for (std::size_t t = 0; t < cfg_.theta_layout.size(); ++t) {
      const auto& s = cfg_.theta_layout[t];
      if (s.target == ThetaTarget::QLogSd) L[s.row * m + s.row] = exp(theta[t]);
    }
    for (int i = 0; i < ny; ++i)
      for (int j = 0; j <= i; ++j) L[(nx + i) * m + nx + j] = S(LR_(i, j));
    return L;
  }

  template <class S>
  S prior(const PriorArgs<S>& a) const {
    const int nth = dims_.ntheta, d = nth + dims_.nx;
    std::vector<S> r(d, S(0.0));
    S quad(0.0);
    for (int i = 0; i < d; ++i) {
      S s = (i < nth ? a.theta[i] : a.x1[i - nth]) - cfg_.prior_mean[i];
      for (int j = 0; j < i; ++j) s = s - prior_L_(i, j) * r[j];
      r[i] = s / prior_L_(i, i);
      quad = quad + r[i] * r[i];
    }
    return -0.5 * quad - 0.5 * (prior_logdet_ + d * kLog2Pi);
  }

  std::optional<GaussianMoments> gaussian_prior() const override {
    return GaussianMoments{cfg_.prior_mean, cfg_.prior_cov};
  }
  GaussianMoments prior_moments() const override { return {cfg_.prior_mean, cfg_.prior_cov}; }

  bool has_additive_noise() const override { return true; }

  Eigen::VectorXd predict(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, const Eigen::VectorXd&,
                          std::span<const double> u, int) const override {
    Eigen::VectorXd m = A_at(theta) * x;
    if (dims_.nu > 0) m += B_at(theta) * to_eigen(u);
    return m;
  }

  bool can_sample() const override { return true; }

  Eigen::VectorXd sample_initial(const Eigen::VectorXd& theta, const Eigen::VectorXd&, Rng& rng) const override {
    const int nth = dims_.ntheta, nx = dims_.nx;
    Eigen::VectorXd mean = cfg_.prior_mean.tail(nx);
    Eigen::MatrixXd cov = cfg_.prior_cov.bottomRightCorner(nx, nx);
    if (nth > 0) {
      const Eigen::MatrixXd Stt = cfg_.prior_cov.topLeftCorner(nth, nth);
      const Eigen::MatrixXd Sxt = cfg_.prior_cov.bottomLeftCorner(nx, nth);
      const Eigen::MatrixXd G = Stt.llt().solve(Sxt.transpose()).transpose();
      mean += G * (theta - cfg_.prior_mean.head(nth));
      cov -= G * Sxt.transpose();
    }
    return mean + Eigen::LLT<Eigen::MatrixXd>(cov).matrixL() * standard_normal(nx, rng);
  }

  StepDraw sample_step(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, const Eigen::VectorXd& eta,
                       std::span<const double> u, int k, Rng& rng) const override {
    StepDraw d;
    d.y = cfg_.C * x + LR_ * standard_normal(dims_.ny, rng);
    d.x_next = sample_transition(x, {}, theta, eta, u, k, rng);
    return d;
  }

  bool supports_particle_filter() const override { return true; }

  double measurement_logpdf(std::span<const double> y, const Eigen::VectorXd& x, const Eigen::VectorXd&,
                            const Eigen::VectorXd&, std::span<const double>, int) const override {
    return gaussian_logpdf(to_eigen(y), cfg_.C * x, cfg_.R);
  }

  double transition_logpdf(const Eigen::VectorXd& x_next, const Eigen::VectorXd& x, std::span<const double>,
                           const Eigen::VectorXd& theta, const Eigen::VectorXd& eta, std::span<const double> u,
                           int k) const override {
    return gaussian_logpdf(x_next, predict(x, theta, eta, u, k), Q_at(theta));
  }

  Eigen::VectorXd sample_transition(const Eigen::VectorXd& x, std::span<const double>, const Eigen::VectorXd& theta,
                                    const Eigen::VectorXd& eta, std::span<const double> u, int k,
                                    Rng& rng) const override {
    const Eigen::MatrixXd LQ = Eigen::LLT<Eigen::MatrixXd>(Q_at(theta)).matrixL();
    return predict(x, theta, eta, u, k) + LQ * standard_normal(dims_.nx, rng);
  }

  std::optional<double> transition_logpdf_bound(const Eigen::VectorXd& theta, const Eigen::VectorXd&) const override {
    const Eigen::MatrixXd LQ = Eigen::LLT<Eigen::MatrixXd>(Q_at(theta)).matrixL();
    return -0.5 * dims_.nx * kLog2Pi - LQ.diagonal().array().log().sum();
  }

 private:
  static Eigen::VectorXd standard_normal(int n, Rng& rng) {
    std::normal_distribution<double> n01;
    Eigen::VectorXd z(n);
    for (int i = 0; i < n; ++i) z[i] = n01(rng);
    return z;
  }

  Eigen::MatrixXd fill(const Eigen::MatrixXd& base, ThetaTarget target, const Eigen::VectorXd& theta) const {
    Eigen::MatrixXd M = base;
    for (std::size_t i = 0; i < cfg_.theta_layout.size(); ++i) {
      const auto& s = cfg_.theta_layout[i];
      if (s.target == target) M(s.row, s.col) = theta[static_cast<Eigen::Index>(i)];
    }
    return M;
  }

  template <class S>
  std::vector<S> matrix_t(const Eigen::MatrixXd& base, ThetaTarget target, std::span<const S> theta) const {
    const auto rows = static_cast<int>(base.rows()), cols = static_cast<int>(base.cols());
    std::vector<S> M(static_cast<std::size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) M[i * cols + j] = S(base(i, j));
    for (std::size_t t = 0; t < cfg_.theta_layout.size(); ++t) {
      const auto& s = cfg_.theta_layout[t];
      if (s.target == target) M[s.row * cols + s.col] = theta[t];
    }
    return M;
  }

  LgssmConfig cfg_;
  Eigen::MatrixXd LQ0_;
  Eigen::MatrixXd LR_;
  Eigen::MatrixXd prior_L_;
  double prior_logdet_ = 0.0;
};

inline std::unique_ptr<LgssmModel> lgssm_model(LgssmConfig cfg) { return std::make_unique<LgssmModel>(std::move(cfg)); }

}  // namespace vissm
