#pragma once

// Independent oracles shared by the unit tests and the acceptance harness.

#include <algorithm>
#include <cmath>
#include <vector>

#include "common.hpp"
#include "vissm/elbo.hpp"
#include "vissm/quadrature.hpp"

namespace testing_util {

using namespace vissm;

/// E[log N(G z + h; 0, S)] for z ~ N(m, P).
inline double expected_gaussian_residual(const MatrixXd& G, const VectorXd& h, const MatrixXd& S, const VectorXd& m,
                                  const MatrixXd& P) {
  const VectorXd r = G * m + h;
  Eigen::LLT<MatrixXd> llt(S);
  const double logdet = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * (r.dot(llt.solve(r)) + (llt.solve(G * P * G.transpose())).trace() + S.rows() * kLn2Pi + logdet);
}

/// Markov joint over z = (θ, x_1, …, x_{T+1}) implied by a consistent β, built by sequential conditioning.
inline void dense_joint(const BetaParams& b, VectorXd& mean, MatrixXd& cov) {
  const int nt = b.ntheta, nx = b.nx, T = b.T(), N = nt + (T + 1) * nx, h = nt + nx;
  mean = VectorXd::Zero(N);
  cov = MatrixXd::Zero(N, N);
  const MatrixXd P0 = b.pairs[0].U.transpose() * b.pairs[0].U;
  mean.head(nt + 2 * nx) = b.pairs[0].mean;
  cov.topLeftCorner(nt + 2 * nx, nt + 2 * nx) = P0;
  for (int k = 1; k < T; ++k) {
    const auto& q = b.pairs[k];
    const MatrixXd P = q.U.transpose() * q.U;
    const MatrixXd G = P.bottomLeftCorner(nx, h) * P.topLeftCorner(h, h).inverse();
    const MatrixXd S = P.bottomRightCorner(nx, nx) - G * P.topLeftCorner(h, h) * G.transpose();
    // x_{k+1} = G (θ, x_k) + g + noise; the selector picks (θ, x_k) out of z.
    const int cur = nt + k * nx, nxt = nt + (k + 1) * nx;
    MatrixXd Sel = MatrixXd::Zero(h, N);
    Sel.topLeftCorner(nt, nt).setIdentity();
    Sel.block(nt, cur, nx, nx).setIdentity();
    const VectorXd g = q.mean.tail(nx) - G * q.mean.head(h);
    const MatrixXd W = G * Sel;  // nx × N
    mean.segment(nxt, nx) = W * mean + g;
    const MatrixXd cross = W * cov;  // cov(x_{k+1}, z) using the rows filled so far
    cov.block(nxt, 0, nx, nxt) = cross.leftCols(nxt);
    cov.block(0, nxt, nxt, nx) = cross.leftCols(nxt).transpose();
    cov.block(nxt, nxt, nx, nx) = W.leftCols(nxt) * cov.topLeftCorner(nxt, nxt) * W.leftCols(nxt).transpose() + S;
  }
}

/// E_q[log p(all)] − E_q[log q(all)] for a θ-affine LGSSM (θ only in B), computed on the dense joint.
inline double dense_elbo(const LgssmConfig& c, const BetaParams& b, const Dataset& data) {
  VectorXd m;
  MatrixXd P;
  dense_joint(b, m, P);
  const int nt = b.ntheta, nx = b.nx, T = b.T(), N = static_cast<int>(m.size()), ny = static_cast<int>(c.C.rows());
  double v = 0.0;
  // prior over (θ, x_1)
  {
    MatrixXd G = MatrixXd::Zero(nt + nx, N);
    G.leftCols(nt + nx).setIdentity();
    v += expected_gaussian_residual(G, -c.prior_mean, c.prior_cov, m, P);
  }
  for (int k = 0; k < T; ++k) {
    const int xk = nt + k * nx, xn = nt + (k + 1) * nx;
    const VectorXd u = data.u.empty() ? VectorXd() : data.u[k];
    MatrixXd Gt = MatrixXd::Zero(nx, N);
    Gt.block(0, xn, nx, nx).setIdentity();
    Gt.block(0, xk, nx, nx) -= c.A;
    VectorXd ht = VectorXd::Zero(nx);
    MatrixXd Bu = c.B;
    if (u.size() > 0) {
      // θ_t replaces B(row, col): its coefficient in the residual is −u_col at row `row`.
      for (int t = 0; t < nt; ++t) {
        const auto& s = c.theta_layout[t];
        Gt(s.row, t) -= u[s.col];
        Bu(s.row, s.col) = 0.0;
      }
      ht = -Bu * u;
    }
    v += expected_gaussian_residual(Gt, ht, c.Q, m, P);
    MatrixXd Gm = MatrixXd::Zero(ny, N);
    Gm.block(0, xk, ny, nx) = -c.C;
    v += expected_gaussian_residual(Gm, data.y[k], c.R, m, P);
  }
  return v + normal_entropy(P);
}

inline double relative_error(double fd, double an) { return std::abs(fd - an) / std::max(1.0, std::abs(an)); }

inline double total(const BetaParams& b, const Model& m, const Dataset& d, const SchemeConfig& s) {
  return elbo(b, m, d, s).total;
}

/// Worst relative error of the analytic gradient against central differences with h = 1e-5·max(1, |β_i|).
inline double gradient_fd_error(const BetaParams& b, const Model& m, const Dataset& d, const SchemeConfig& s) {
  const auto der = derivatives(b, m, d, s, HessianMode::None);
  const VectorXd v = b.pack();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(v[i]));
    BetaParams p = b, q = b;
    VectorXd vp = v, vq = v;
    vp[i] += h;
    vq[i] -= h;
    p.unpack(vp);
    q.unpack(vq);
    const double fd = (total(p, m, d, s) - total(q, m, d, s)) / (2.0 * h);
    worst = std::max(worst, relative_error(fd, der.gradient[i]));
  }
  return worst;
}

/// Worst relative error of the constraint Jacobian against central differences.
inline double jacobian_fd_error(const BetaParams& b) {
  const MatrixXd J = MatrixXd(constraint_jacobian(b));
  const VectorXd v = b.pack();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(v[i]));
    BetaParams p = b, q = b;
    VectorXd vp = v, vq = v;
    vp[i] += h;
    vq[i] -= h;
    p.unpack(vp);
    q.unpack(vq);
    const VectorXd fd = (constraints(p).stacked() - constraints(q).stacked()) / (2.0 * h);
    for (Eigen::Index r = 0; r < fd.size(); ++r) worst = std::max(worst, relative_error(fd[r], J(r, i)));
  }
  return worst;
}

inline double monomial(const VectorXd& x, const std::vector<int>& idx) {
  double p = 1.0;
  for (int i : idx) p *= x[i];
  return p;
}

/// Largest |rule − Isserlis| over every monomial of total degree ≤ `degree`.
inline double max_monomial_error(const SigmaPointSet& s, const VectorXd& m, const MatrixXd& P, int degree) {
  const int n = static_cast<int>(m.size());
  double worst = 0.0;
  for (int deg = 0; deg <= degree; ++deg) {
    std::vector<std::vector<int>> sets;
    multisets(n, deg, sets);
    for (const auto& idx : sets) {
      const double got = expect(s, [&](const VectorXd& x) { return monomial(x, idx); });
      worst = std::max(worst, std::abs(got - gaussian_moment(idx, m, P)));
    }
  }
  return worst;
}

struct RandomGaussian {
  VectorXd mean;
  MatrixXd factor;  // lower factor times a random rotation
  MatrixXd cov;
};

inline RandomGaussian random_gaussian(int n, Rng& rng) {
  RandomGaussian g;
  g.mean = random_vector(n, rng, 0.5);
  g.cov = 0.5 * random_spd(n, rng, 0.3);
  const MatrixXd L = Eigen::LLT<MatrixXd>(g.cov).matrixL();
  g.factor = L * random_rotation(n, rng);
  return g;
}

}  // namespace testing_util
