#pragma once

// Stochastic volatility model
//   x_{k+1} = a + b x_k + sqrt(c) w_k,   y_k = exp(x_k / 2) v_k,
// with θ = [a, b, log(sqrt(c))] and w_k, v_k standard normal.

#include <cmath>
#include <memory>

#include "vissm/linalg.hpp"
#include "vissm/model.hpp"

namespace vissm {

struct SvConfig {
  Eigen::Vector3d theta_prior_mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d theta_prior_cov = 10.0 * Eigen::Matrix3d::Identity();
  /// Variance of x_1 used when |b| >= 1, where no stationary distribution exists.
  double nonstationary_x1_var = 10.0;
};

class SvModel final : public ModelBase<SvModel> {
 public:
  explicit SvModel(SvConfig cfg = {}) : cfg_(std::move(cfg)) {
    dims_ = {.nx = 1, .ny = 1, .nu = 0, .ntheta = 3, .neta = 0};
    if (!is_spd(cfg_.theta_prior_cov)) throw ConfigError("sv: theta prior covariance must be SPD");
    if (!(cfg_.nonstationary_x1_var > 0.0)) throw ConfigError("sv: nonstationary x1 variance must be positive");
    Eigen::LLT<Eigen::Matrix3d> llt(cfg_.theta_prior_cov);
    prior_L_ = llt.matrixL();
    prior_logdet_ = 2.0 * prior_L_.diagonal().array().log().sum();
  }

  std::string name() const override { return "sv"; }
  const SvConfig& config() const { return cfg_; }

  template <class S>
  S joint(const StepArgs<S>& a) const {
    return transition_term(a.x_next[0], a.x[0], a.theta) + measurement_term(a.y[0], a.x[0]);
  }

  /// log N(x'; a + b x, c).
  template <class S>
  static S transition_term(const S& x_next, const S& x, std::span<const S> theta) {
    using std::exp;
    const S r = x_next - theta[0] - theta[1] * x;
    return -0.5 * kLog2Pi - theta[2] - 0.5 * r * r * exp(-2.0 * theta[2]);
  }

  /// log N(y; 0, e^x).
  template <class S>
  static S measurement_term(double y, const S& x) {
    using std::exp;
    return -0.5 * (kLog2Pi + x + y * y * exp(-x));
  }

  template <class S>
  S prior(const PriorArgs<S>& a) const {
    using std::exp;
    using std::log;
    // θ part: log N(θ; m0, S0) via the lower factor of S0.
    std::vector<S> r(3);
    for (int i = 0; i < 3; ++i) {
      S s = a.theta[i] - cfg_.theta_prior_mean[i];
      for (int j = 0; j < i; ++j) s = s - prior_L_(i, j) * r[j];
      r[i] = s / prior_L_(i, i);
    }
    S lp = -0.5 * (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) - 0.5 * (prior_logdet_ + 3.0 * kLog2Pi);
    const S& b = a.theta[1];
    const S& x1 = a.x1[0];
    if (ad::value(b) > -1.0 && ad::value(b) < 1.0) {
      const S logvar = 2.0 * a.theta[2] - log(1.0 - b * b);
      lp = lp - 0.5 * (kLog2Pi + logvar + x1 * x1 * exp(-logvar));
    } else {
      const double v = cfg_.nonstationary_x1_var;
      lp = lp - 0.5 * (kLog2Pi + std::log(v) + x1 * x1 / v);
    }
    return lp;
  }

  GaussianMoments prior_moments() const override {
    GaussianMoments m{Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Zero(4, 4)};
    m.mean.head(3) = cfg_.theta_prior_mean;
    m.cov.topLeftCorner(3, 3) = cfg_.theta_prior_cov;
    m.cov(3, 3) = x1_variance(cfg_.theta_prior_mean);
    return m;
  }

  Eigen::VectorXd predict(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, const Eigen::VectorXd&,
                          std::span<const double>, int) const override {
    return Eigen::VectorXd::Constant(1, theta[0] + theta[1] * x[0]);
  }

  double x1_variance(const Eigen::VectorXd& theta) const {
    const double b = theta[1];
    if (b > -1.0 && b < 1.0) return std::exp(2.0 * theta[2]) / (1.0 - b * b);
    return cfg_.nonstationary_x1_var;
  }

  bool can_sample() const override { return true; }

  Eigen::VectorXd sample_initial(const Eigen::VectorXd& theta, const Eigen::VectorXd&, Rng& rng) const override {
    std::normal_distribution<double> n01;
    return Eigen::VectorXd::Constant(1, std::sqrt(x1_variance(theta)) * n01(rng));
  }

  StepDraw sample_step(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, const Eigen::VectorXd&,
                       std::span<const double>, int, Rng& rng) const override {
    std::normal_distribution<double> n01;
    StepDraw d;
    d.y = Eigen::VectorXd::Constant(1, std::exp(0.5 * x[0]) * n01(rng));
    d.x_next = Eigen::VectorXd::Constant(1, theta[0] + theta[1] * x[0] + std::exp(theta[2]) * n01(rng));
    return d;
  }

  bool supports_particle_filter() const override { return true; }

  double measurement_logpdf(std::span<const double> y, const Eigen::VectorXd& x, const Eigen::VectorXd&,
                            const Eigen::VectorXd&, std::span<const double>, int) const override {
    return measurement_term(y[0], x[0]);
  }

  double transition_logpdf(const Eigen::VectorXd& x_next, const Eigen::VectorXd& x, std::span<const double>,
                           const Eigen::VectorXd& theta, const Eigen::VectorXd&, std::span<const double>,
                           int) const override {
    return transition_term<double>(x_next[0], x[0], std::span<const double>(theta.data(), 3));
  }

  Eigen::VectorXd sample_transition(const Eigen::VectorXd& x, std::span<const double>, const Eigen::VectorXd& theta,
                                    const Eigen::VectorXd&, std::span<const double>, int,
                                    Rng& rng) const override {
    std::normal_distribution<double> n01;
    return Eigen::VectorXd::Constant(1, theta[0] + theta[1] * x[0] + std::exp(theta[2]) * n01(rng));
  }

  std::optional<double> transition_logpdf_bound(const Eigen::VectorXd& theta, const Eigen::VectorXd&) const override {
    return -0.5 * kLog2Pi - theta[2];
  }

 private:
  SvConfig cfg_;
  Eigen::Matrix3d prior_L_;
  double prior_logdet_ = 0.0;
};

inline std::unique_ptr<SvModel> sv_model(SvConfig cfg = {}) { return std::make_unique<SvModel>(std::move(cfg)); }

}  // namespace vissm
