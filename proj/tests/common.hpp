#pragma once

// Test oracles and fixtures. Nothing here calls into the library's own density,
// moment or factorization code except to build inputs.

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "vissm/gaussian.hpp"
#include "vissm/model.hpp"
#include "vissm/models/lgssm.hpp"
#include "vissm/models/pendulum.hpp"

namespace testing_util {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Rng = std::mt19937_64;

inline constexpr double kLn2Pi = 1.83787706640934548356;

/// Dense multivariate normal log-density via a partial-pivot LU determinant and solve.
inline double mvn_logpdf(const VectorXd& x, const VectorXd& m, const MatrixXd& S) {
  Eigen::FullPivLU<MatrixXd> lu(S);
  const VectorXd r = x - m;
  const double quad = r.dot(lu.solve(r));
  const double logdet = std::log(lu.determinant());
  return -0.5 * (quad + logdet + static_cast<double>(x.size()) * kLn2Pi);
}

inline double normal_entropy(const MatrixXd& S) {
  const double n = static_cast<double>(S.rows());
  return 0.5 * n * (1.0 + kLn2Pi) + 0.5 * std::log(S.determinant());
}

inline MatrixXd random_spd(int n, Rng& rng, double jitter = 0.5) {
  std::normal_distribution<double> N;
  MatrixXd G(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) G(i, j) = N(rng);
  return G * G.transpose() / n + jitter * MatrixXd::Identity(n, n);
}

inline MatrixXd random_rotation(int n, Rng& rng) {
  std::normal_distribution<double> N;
  MatrixXd G(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) G(i, j) = N(rng);
  Eigen::HouseholderQR<MatrixXd> qr(G);
  return qr.householderQ();
}

inline VectorXd random_vector(int n, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> N(0.0, sd);
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = N(rng);
  return v;
}

/// Random upper-triangular factor with diagonal in [lo, hi].
inline MatrixXd random_upper(int n, Rng& rng, double lo = 0.5, double hi = 1.2, double off = 0.3) {
  std::uniform_real_distribution<double> U(lo, hi);
  std::normal_distribution<double> N(0.0, off);
  MatrixXd R = MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    R(i, i) = U(rng);
    for (int j = i + 1; j < n; ++j) R(i, j) = N(rng);
  }
  return R;
}

/// Upper factor R with RᵀR = P, from the lower Cholesky of P.
inline MatrixXd upper_factor(const MatrixXd& P) {
  Eigen::LLT<MatrixXd> llt(P);
  return llt.matrixU();
}

inline vissm::PairwiseGaussian random_pair(int nt, int nx, Rng& rng, double scale = 1.0) {
  const int n = nt + 2 * nx;
  MatrixXd U = scale * random_upper(n, rng);
  return vissm::PairwiseGaussian(nt, nx, random_vector(n, rng, 0.5), U);
}

/// Consistent chain: pair k+1's (θ, x_{k+1}) block is pair k's second-slot marginal, refactorized
/// here from the dense covariance of pair k.
inline vissm::BetaParams random_consistent_beta(int nt, int nx, int T, Rng& rng, double scale = 1.0) {
  vissm::BetaParams b;
  b.ntheta = nt;
  b.nx = nx;
  if (T == 0) return b;
  b.pairs.push_back(random_pair(nt, nx, rng, scale));
  const int n = nt + 2 * nx, h = nt + nx;
  for (int k = 1; k < T; ++k) {
    const auto& prev = b.pairs.back();
    const MatrixXd P = prev.U.transpose() * prev.U;
    std::vector<int> idx;
    for (int i = 0; i < nt; ++i) idx.push_back(i);
    for (int i = 0; i < nx; ++i) idx.push_back(nt + nx + i);
    MatrixXd M(h, h);
    VectorXd mu(h);
    for (int i = 0; i < h; ++i) {
      mu[i] = prev.mean[idx[i]];
      for (int j = 0; j < h; ++j) M(i, j) = P(idx[i], idx[j]);
    }
    const MatrixXd R = upper_factor(M);
    MatrixXd U = MatrixXd::Zero(n, n);
    U.topLeftCorner(h, h) = R;
    MatrixXd tail = scale * random_upper(n, rng);
    U.rightCols(nx) = tail.rightCols(nx);
    VectorXd mean(n);
    mean << mu, random_vector(nx, rng, 0.5);
    b.pairs.emplace_back(nt, nx, mean, U);
  }
  return b;
}

/// Monte Carlo moments of a Gaussian given by mean and upper factor U (covariance UᵀU).
inline std::vector<VectorXd> sample(const VectorXd& m, const MatrixXd& U, int N, Rng& rng) {
  std::normal_distribution<double> Z;
  std::vector<VectorXd> out;
  out.reserve(static_cast<std::size_t>(N));
  const MatrixXd L = U.transpose();
  VectorXd z(m.size());
  for (int s = 0; s < N; ++s) {
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = Z(rng);
    out.push_back(m + L * z);
  }
  return out;
}

/// E[Π x_{i}] for x ~ N(m, P) over a list of indices (with repeats), from Isserlis' theorem.
inline double gaussian_moment(const std::vector<int>& idx, const VectorXd& m, const MatrixXd& P) {
  const int n = static_cast<int>(idx.size());
  // centered moment over a subset by recursive pairing
  std::function<double(std::vector<int>)> centered = [&](std::vector<int> s) -> double {
    if (s.empty()) return 1.0;
    if (s.size() % 2) return 0.0;
    const int a = s[0];
    double acc = 0.0;
    for (std::size_t t = 1; t < s.size(); ++t) {
      std::vector<int> rest;
      for (std::size_t u = 1; u < s.size(); ++u)
        if (u != t) rest.push_back(s[u]);
      acc += P(a, s[t]) * centered(rest);
    }
    return acc;
  };
  double total = 0.0;
  for (int mask = 0; mask < (1 << n); ++mask) {
    std::vector<int> sub;
    double prod = 1.0;
    for (int i = 0; i < n; ++i) {
      if (mask & (1 << i)) sub.push_back(idx[i]);
      else prod *= m[idx[i]];
    }
    if (prod != 0.0) total += prod * centered(sub);
  }
  return total;
}

/// Every multiset of size `degree` over {0..n-1}.
inline void multisets(int n, int degree, std::vector<std::vector<int>>& out, std::vector<int> cur = {}, int start = 0) {
  if (static_cast<int>(cur.size()) == degree) {
    out.push_back(cur);
    return;
  }
  for (int i = start; i < n; ++i) {
    cur.push_back(i);
    multisets(n, degree, out, cur, i);
    cur.pop_back();
  }
}

inline vissm::LgssmConfig scalar_lgssm(double a = 0.5, double q = 1.0, double r = 1.0) {
  vissm::LgssmConfig c;
  c.A = MatrixXd::Constant(1, 1, a);
  c.C = MatrixXd::Constant(1, 1, 1.0);
  c.Q = MatrixXd::Constant(1, 1, q);
  c.R = MatrixXd::Constant(1, 1, r);
  c.prior_mean = VectorXd::Zero(1);
  c.prior_cov = MatrixXd::Identity(1, 1);
  return c;
}

inline vissm::LgssmConfig two_state_lgssm() {
  vissm::LgssmConfig c;
  c.A.resize(2, 2);
  c.A << 0.9, 0.2, -0.1, 0.7;
  c.B.resize(2, 1);
  c.B << 0.5, 0.1;
  c.C.resize(1, 2);
  c.C << 1.0, 0.5;
  c.Q.resize(2, 2);
  c.Q << 0.3, 0.05, 0.05, 0.2;
  c.R = MatrixXd::Constant(1, 1, 0.4);
  c.prior_mean = VectorXd::Zero(2);
  c.prior_mean << 0.5, -0.5;
  c.prior_cov = MatrixXd::Identity(2, 2);
  return c;
}

/// Two states with θ = the diagonal of A; prior over (θ, x_1).
inline vissm::LgssmConfig theta_lgssm() {
  vissm::LgssmConfig c = two_state_lgssm();
  c.B.resize(2, 0);
  c.theta_layout = {{vissm::ThetaTarget::A, 0, 0}, {vissm::ThetaTarget::A, 1, 1}};
  c.prior_mean = VectorXd::Zero(4);
  c.prior_mean << 0.5, 0.5, 0.0, 0.0;
  c.prior_cov = MatrixXd::Identity(4, 4);
  c.prior_cov(0, 0) = c.prior_cov(1, 1) = 0.25;
  return c;
}

inline std::vector<VectorXd> sine_inputs(int T, int nu) {
  std::vector<VectorXd> u;
  for (int k = 0; k < T; ++k) u.push_back(VectorXd::Constant(nu, std::sin(0.3 * k)));
  return u;
}

inline double evaluate_joint(const vissm::Model& m, const VectorXd& xn, const VectorXd& y, const VectorXd& x,
                             const VectorXd& th, const VectorXd& eta = VectorXd(), const VectorXd& u = VectorXd(),
                             int k = 0) {
  vissm::StepArgs<double> a;
  a.x_next = {xn.data(), static_cast<std::size_t>(xn.size())};
  a.y = {y.data(), static_cast<std::size_t>(y.size())};
  a.x = {x.data(), static_cast<std::size_t>(x.size())};
  a.theta = {th.data(), static_cast<std::size_t>(th.size())};
  a.eta = {eta.data(), static_cast<std::size_t>(eta.size())};
  a.u = {u.data(), static_cast<std::size_t>(u.size())};
  a.k = k;
  return m.joint_logpdf(a);
}

inline double evaluate_prior(const vissm::Model& m, const VectorXd& th, const VectorXd& x1) {
  vissm::PriorArgs<double> a;
  a.theta = {th.data(), static_cast<std::size_t>(th.size())};
  a.x1 = {x1.data(), static_cast<std::size_t>(x1.size())};
  return m.prior_logpdf(a);
}

/// Pendulum with θ = log of the selected physical parameters, prior centred at the nominal values.
inline vissm::PendulumConfig pendulum_config(std::vector<vissm::PendulumParam> params = {vissm::PendulumParam::Jr,
                                                                                         vissm::PendulumParam::Jp}) {
  vissm::PendulumConfig c;
  c.theta_params = params;
  VectorXd pd(7);
  pd << 1e-8, 1e-8, 1e-4, 1e-4, 1e-6, 1e-6, 1e-4;
  c.Pi = pd.asDiagonal();
  const int nt = static_cast<int>(params.size());
  c.prior_mean = VectorXd::Zero(nt + 4);
  for (int t = 0; t < nt; ++t) c.prior_mean[t] = std::log(c.phi[static_cast<int>(params[t])]);
  c.prior_mean[nt + 1] = 0.1;
  c.prior_cov = MatrixXd::Identity(nt + 4, nt + 4);
  for (int i = nt; i < nt + 4; ++i) c.prior_cov(i, i) = 1e-4;
  return c;
}

/// Scalar model with x > 0 support, N(x'; x, 1) N(y; x, 1) inside it and no sampling form.
class HalfLineModel final : public vissm::ModelBase<HalfLineModel> {
 public:
  HalfLineModel() { dims_ = {.nx = 1, .ny = 1, .nu = 0, .ntheta = 0, .neta = 0}; }
  std::string name() const override { return "half-line"; }

  template <class S>
  S joint(const vissm::StepArgs<S>& a) const {
    if (vissm::ad::value(a.x[0]) <= 0.0) return S(-std::numeric_limits<double>::infinity());
    const S r1 = a.x_next[0] - a.x[0];
    const S r2 = a.y[0] - a.x[0];
    return -kLn2Pi - 0.5 * (r1 * r1 + r2 * r2);
  }
  template <class S>
  S prior(const vissm::PriorArgs<S>& a) const {
    return -0.5 * kLn2Pi - 0.5 * a.x1[0] * a.x1[0];
  }
  vissm::GaussianMoments prior_moments() const override {
    return {VectorXd::Zero(1), MatrixXd::Identity(1, 1)};
  }
  VectorXd predict(const VectorXd& x, const VectorXd&, const VectorXd&, std::span<const double>, int) const override {
    return x;
  }
};

}  // namespace testing_util
