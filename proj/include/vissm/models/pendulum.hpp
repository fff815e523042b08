#pragma once

// Rotary (Furuta) inverted pendulum.
//
// State x = [ϑ, α, ϑ̇, α̇] (arm angle, pendulum angle and their rates), input
// u = V_m (motor voltage). The process model takes two explicit Euler steps
// over the sampling interval; the measurements are both encoder angles and
// the motor current. Process and measurement noise are jointly Gaussian with
// covariance Π (7 × 7).
//
// Uncertain parameters θ are the logarithms of a chosen subset of
// φ = [J_r, J_p, K_m, R_m, D_p, D_r]; the rest stay at their nominal values.
// Π is either fixed or estimated as a point value through η, the
// log-Cholesky parametrization of Π (diagonal entries stored as logs).

#include <array>
#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "vissm/linalg.hpp"
#include "vissm/model.hpp"

namespace vissm {

enum class PendulumParam : int { Jr = 0, Jp = 1, Km = 2, Rm = 3, Dp = 4, Dr = 5 };

inline constexpr std::array<const char*, 6> kPendulumParamNames = {"J_r", "J_p", "K_m", "R_m", "D_p", "D_r"};

/// Physical constants; defaults are the nominal QUBE-Servo 2 values.
struct PendulumConstants {
  double m_p = 0.024;  // pendulum mass [kg]
  double l_p = 0.129;  // pendulum length [m]
  double l_r = 0.085;  // arm length [m]
  double g = 9.81;
};

struct PendulumConfig {
  PendulumConstants constants;
  /// Nominal φ = [J_r, J_p, K_m, R_m, D_p, D_r].
  std::array<double, 6> phi = {5.72e-5, 3.33e-5, 0.042, 8.4, 5.0e-4, 1.5e-3};
  std::vector<PendulumParam> theta_params;
  Eigen::MatrixXd Pi;  // 7 × 7, joint process/measurement noise covariance
  bool estimate_noise = false;
  Eigen::VectorXd prior_mean;  // over (θ, x_1)
  Eigen::MatrixXd prior_cov;
  double sample_time = 0.008;
  int substeps = 2;
};

class PendulumModel final : public ModelBase<PendulumModel> {
 public:
  static constexpr int kNx = 4;
  static constexpr int kNy = 3;
  static constexpr int kNe = kNx + kNy;
  static constexpr int kNeta = kNe * (kNe + 1) / 2;

  explicit PendulumModel(PendulumConfig cfg) : cfg_(std::move(cfg)) {
    const auto& c = cfg_.constants;
    if (!(c.m_p > 0 && c.l_p > 0 && c.l_r > 0 && c.g > 0)) throw ConfigError("pendulum: constants must be positive");
    for (double v : cfg_.phi)
      if (!(v > 0.0)) throw ConfigError("pendulum: nominal parameters must be positive");
    if (cfg_.Pi.rows() != kNe || cfg_.Pi.cols() != kNe || !is_spd(cfg_.Pi))
      throw ConfigError("pendulum: Pi must be 7 x 7 SPD");
    if (cfg_.substeps < 1 || !(cfg_.sample_time > 0.0)) throw ConfigError("pendulum: bad discretization");
    const auto nth = static_cast<int>(cfg_.theta_params.size());
    dims_ = {.nx = kNx, .ny = kNy, .nu = 1, .ntheta = nth, .neta = cfg_.estimate_noise ? kNeta : 0};
    if (cfg_.prior_mean.size() != nth + kNx || cfg_.prior_cov.rows() != nth + kNx ||
        cfg_.prior_cov.cols() != nth + kNx || !is_spd(cfg_.prior_cov))
      throw ConfigError("pendulum: prior over (theta, x1) must be SPD of dimension " + std::to_string(nth + kNx));
    LPi_ = Eigen::LLT<Eigen::MatrixXd>(cfg_.Pi).matrixL();
    prior_L_ = Eigen::LLT<Eigen::MatrixXd>(cfg_.prior_cov).matrixL();
    prior_logdet_ = 2.0 * prior_L_.diagonal().array().log().sum();
  }

  std::string name() const override { return "pendulum"; }
  const PendulumConfig& config() const { return cfg_; }

  /// η = log-Cholesky parametrization of Π.
  static Eigen::VectorXd eta_from_pi(const Eigen::MatrixXd& Pi) {
    const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(Pi).matrixL();
    Eigen::VectorXd eta(kNeta);
    int t = 0;
    for (int i = 0; i < kNe; ++i)
      for (int j = 0; j <= i; ++j) eta[t++] = i == j ? std::log(L(i, i)) : L(i, j);
    return eta;
  }

  static Eigen::MatrixXd pi_from_eta(const Eigen::VectorXd& eta) {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(kNe, kNe);
    int t = 0;
    for (int i = 0; i < kNe; ++i)
      for (int j = 0; j <= i; ++j) L(i, j) = i == j ? std::exp(eta[t++]) : eta[t++];
    return L * L.transpose();
  }

  /// Mass matrix entries [M11, M12, M22] at pendulum angle α.
  template <class S>
  std::array<S, 3> mass_matrix(const S& alpha, const S& Jr, const S& Jp) const {
    using std::cos;
    const auto& c = cfg_.constants;
    const S ca = cos(alpha);
    const S c2 = ca * ca;
    const double mpp = c.m_p * c.l_p * c.l_p;
    return {Jr + c.m_p * c.l_r * c.l_r + 0.25 * (mpp - mpp * c2), 0.5 * c.m_p * c.l_p * c.l_r * c2, Jp + 0.25 * mpp};
  }

  /// Motor torque τ = k_m (V_m − k_m ϑ̇) / R_m.
  template <class S>
  static S motor_torque(double Vm, const S& theta_dot, const S& Km, const S& Rm) {
    return Km * (Vm - Km * theta_dot) / Rm;
  }

  /// Continuous-time state derivative.
  template <class S>
  std::array<S, 4> dynamics(const std::array<S, 4>& x, double Vm, const std::array<S, 6>& phi) const {
    using std::cos;
    using std::sin;
    const auto& c = cfg_.constants;
    const S& alpha = x[1];
    const S& td = x[2];
    const S& ad_ = x[3];
    const S sa = sin(alpha), ca = cos(alpha);
    const auto M = mass_matrix(alpha, phi[0], phi[1]);
    const S C1 = 0.5 * c.m_p * c.l_p * c.l_p * sa * ca * td * ad_ - 0.5 * c.m_p * c.l_p * c.l_r * sa * ad_ * ad_;
    const S C2 = -0.25 * c.m_p * c.l_p * c.l_p * ca * sa * td * td;
    const S tau = motor_torque(Vm, td, phi[2], phi[3]);
    const S r1 = tau - phi[5] * td - C1;
    const S r2 = -phi[4] * ad_ - 0.5 * c.m_p * c.l_p * c.g * sa - C2;
    const S det = M[0] * M[2] - M[1] * M[1];
    if (!(ad::value(det) > 0.0) || !std::isfinite(ad::value(det))) {
      std::ostringstream os;
      os << "pendulum: singular mass matrix at state [" << ad::value(x[0]) << ", " << ad::value(x[1]) << ", "
         << ad::value(x[2]) << ", " << ad::value(x[3]) << "]";
      throw NumericalError(os.str());
    }
    return {td, ad_, (M[2] * r1 - M[1] * r2) / det, (M[0] * r2 - M[1] * r1) / det};
  }

  /// Discrete transition without noise: `substeps` Euler steps over the sample time.
  template <class S>
  std::array<S, 4> step(const std::array<S, 4>& x, double Vm, const std::array<S, 6>& phi) const {
    const double h = cfg_.sample_time / cfg_.substeps;
    std::array<S, 4> z = x;
    for (int s = 0; s < cfg_.substeps; ++s) {
      const auto dz = dynamics(z, Vm, phi);
      for (int i = 0; i < 4; ++i) z[i] = z[i] + h * dz[i];
    }
    return z;
  }

  template <class S>
  std::array<S, 3> measure(const std::array<S, 4>& x, double Vm, const std::array<S, 6>& phi) const {
    return {x[0], x[1], (Vm - phi[2] * x[2]) / phi[3]};
  }

  template <class S>
  std::array<S, 6> physical(std::span<const S> theta) const {
    using std::exp;
    std::array<S, 6> phi;
    for (int i = 0; i < 6; ++i) phi[i] = S(cfg_.phi[i]);
    for (std::size_t t = 0; t < cfg_.theta_params.size(); ++t)
      phi[static_cast<int>(cfg_.theta_params[t])] = exp(theta[t]);
    return phi;
  }

  template <class S>
  std::vector<S> residual_t(const StepArgs<S>& a) const {
    const auto phi = physical(a.theta);
    const std::array<S, 4> x = {a.x[0], a.x[1], a.x[2], a.x[3]};
    const double Vm = a.u.empty() ? 0.0 : a.u[0];
    const auto xn = step(x, Vm, phi);
    const auto yh = measure(x, Vm, phi);
    std::vector<S> r(kNe);
    for (int i = 0; i < kNx; ++i) r[i] = a.x_next[i] - xn[i];
    for (int i = 0; i < kNy; ++i) r[kNx + i] = a.y[i] - yh[i];
    return r;
  }

  template <class S>
  std::vector<S> noise_chol_t(std::span<const S> /*theta*/, std::span<const S> eta) const {
    using std::exp;
    std::vector<S> L(kNe * kNe, S(0.0));
    if (cfg_.estimate_noise) {
      int t = 0;
      for (int i = 0; i < kNe; ++i)
        for (int j = 0; j <= i; ++j, ++t) L[i * kNe + j] = i == j ? exp(eta[t]) : eta[t];
    } else {
      for (int i = 0; i < kNe; ++i)
        for (int j = 0; j <= i; ++j) L[i * kNe + j] = S(LPi_(i, j));
    }
    return L;
  }

  template <class S>
  S joint(const StepArgs<S>& a) const {
    return gaussian_residual_logpdf(residual_t(a), noise_chol_t<S>(a.theta, a.eta), kNe);
  }

  template <class S>
  S prior(const PriorArgs<S>& a) const {
    const int nth = dims_.ntheta, d = nth + kNx;
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
    const auto phi = physical<double>({theta.data(), static_cast<std::size_t>(theta.size())});
    const auto xn = step<double>({x[0], x[1], x[2], x[3]}, u.empty() ? 0.0 : u[0], phi);
    return Eigen::Map<const Eigen::Vector4d>(xn.data());
  }

  Eigen::Vector3d measurement_mean(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, double Vm) const {
    const auto phi = physical<double>({theta.data(), static_cast<std::size_t>(theta.size())});
    const auto y = measure<double>({x[0], x[1], x[2], x[3]}, Vm, phi);
    return Eigen::Map<const Eigen::Vector3d>(y.data());
  }

  Eigen::VectorXd default_eta() const override {
    return cfg_.estimate_noise ? eta_from_pi(cfg_.Pi) : Eigen::VectorXd();
  }

  Eigen::MatrixXd noise_cov(const Eigen::VectorXd& eta) const {
    return cfg_.estimate_noise ? pi_from_eta(eta) : cfg_.Pi;
  }

  bool can_sample() const override { return true; }

  Eigen::VectorXd sample_initial(const Eigen::VectorXd& theta, const Eigen::VectorXd&, Rng& rng) const override {
    const auto [m, c] = condition_on_head(cfg_.prior_mean, cfg_.prior_cov, theta);
    return m + Eigen::LLT<Eigen::MatrixXd>(c).matrixL() * standard_normal(kNx, rng);
  }

  StepDraw sample_step(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, const Eigen::VectorXd& eta,
                       std::span<const double> u, int k, Rng& rng) const override {
    const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(noise_cov(eta)).matrixL();
    const Eigen::VectorXd e = L * standard_normal(kNe, rng);
    StepDraw d;
    d.x_next = predict(x, theta, eta, u, k) + e.head(kNx);
    d.y = measurement_mean(x, theta, u.empty() ? 0.0 : u[0]) + e.tail(kNy);
    return d;
  }

  // Coupled noise: p(y | x) uses the marginal Π_yy, p(x' | x, y) the conditional given w = y − h(x).
  bool supports_particle_filter() const override { return true; }

  double measurement_logpdf(std::span<const double> y, const Eigen::VectorXd& x, const Eigen::VectorXd& theta,
                            const Eigen::VectorXd& eta, std::span<const double> u, int) const override {
    const Eigen::MatrixXd Pi = noise_cov(eta);
    return gaussian_logpdf(to_eigen(y), measurement_mean(x, theta, u.empty() ? 0.0 : u[0]),
                           Pi.bottomRightCorner(kNy, kNy));
  }

  double transition_logpdf(const Eigen::VectorXd& x_next, const Eigen::VectorXd& x, std::span<const double> y,
                           const Eigen::VectorXd& theta, const Eigen::VectorXd& eta, std::span<const double> u,
                           int k) const override {
    const auto [m, c] = conditional_transition(x, y, theta, eta, u, k);
    return gaussian_logpdf(x_next, m, c);
  }

  Eigen::VectorXd sample_transition(const Eigen::VectorXd& x, std::span<const double> y, const Eigen::VectorXd& theta,
                                    const Eigen::VectorXd& eta, std::span<const double> u, int k,
                                    Rng& rng) const override {
    const auto [m, c] = conditional_transition(x, y, theta, eta, u, k);
    return m + Eigen::LLT<Eigen::MatrixXd>(c).matrixL() * standard_normal(kNx, rng);
  }

  std::optional<double> transition_logpdf_bound(const Eigen::VectorXd& theta, const Eigen::VectorXd& eta) const override {
    const auto [m, c] = conditional_transition(Eigen::VectorXd::Zero(kNx), std::vector<double>(kNy, 0.0), theta, eta,
                                               {}, 0);
    const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(c).matrixL();
    return -0.5 * kNx * kLog2Pi - L.diagonal().array().log().sum();
  }

 private:
  std::pair<Eigen::VectorXd, Eigen::MatrixXd> conditional_transition(const Eigen::VectorXd& x,
                                                                      std::span<const double> y,
                                                                      const Eigen::VectorXd& theta,
                                                                      const Eigen::VectorXd& eta,
                                                                      std::span<const double> u, int k) const {
    // Reorder Π so the measurement noise leads, then condition the process noise on it.
    const Eigen::MatrixXd Pi = noise_cov(eta);
    Eigen::MatrixXd P(kNe, kNe);
    P << Pi.bottomRightCorner(kNy, kNy), Pi.bottomLeftCorner(kNy, kNx), Pi.topRightCorner(kNx, kNy),
        Pi.topLeftCorner(kNx, kNx);
    const Eigen::VectorXd w = to_eigen(y) - measurement_mean(x, theta, u.empty() ? 0.0 : u[0]);
    auto [vm, vc] = condition_on_head(Eigen::VectorXd::Zero(kNe), P, w);
    return {predict(x, theta, eta, u, k) + vm, vc};
  }

  static Eigen::VectorXd standard_normal(int n, Rng& rng) {
    std::normal_distribution<double> n01;
    Eigen::VectorXd z(n);
    for (int i = 0; i < n; ++i) z[i] = n01(rng);
    return z;
  }

  PendulumConfig cfg_;
  Eigen::MatrixXd LPi_;
  Eigen::MatrixXd prior_L_;
  double prior_logdet_ = 0.0;
};

inline std::unique_ptr<PendulumModel> pendulum_model(PendulumConfig cfg) {
  return std::make_unique<PendulumModel>(std::move(cfg));
}

}  // namespace vissm
