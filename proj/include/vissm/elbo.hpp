#pragma once

// The approximate bound L̂(β) = I1(β) + Î23(β) − I4(β), the consistency
// constraints between consecutive pairs and their exact derivatives.

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "vissm/ad.hpp"
#include "vissm/gaussian.hpp"
#include "vissm/linalg.hpp"
#include "vissm/model.hpp"
#include "vissm/parallel.hpp"
#include "vissm/quadrature.hpp"

namespace vissm {

struct ElboBreakdown {
  double i1 = 0.0;
  double i23 = 0.0;
  double i4 = 0.0;
  double total = 0.0;
  std::vector<double> per_step_i23;
  /// Set when the total is −∞: the first (k, j) where the log-density was −∞.
  std::string diagnostic;
};

struct I23Result {
  double total = 0.0;
  std::vector<double> per_step;
  std::string diagnostic;
};

namespace detail {

template <class S>
StepArgs<S> step_args(const std::vector<S>& xi, const std::vector<S>& eta, int ntheta, int nx, const Dataset& data,
                      int k) {
  const auto nt = static_cast<std::size_t>(ntheta), n = static_cast<std::size_t>(nx);
  StepArgs<S> a;
  a.theta = {xi.data(), nt};
  a.x = {xi.data() + nt, n};
  a.x_next = {xi.data() + nt + n, n};
  a.eta = {eta.data(), eta.size()};
  a.y = data.y_at(k);
  a.u = data.u_at(k);
  a.k = k;
  return a;
}

inline void check_data(const BetaParams& beta, const Model& model, const Dataset& data) {
  const auto& d = model.dims();
  if (beta.T() != data.T())
    throw ConfigError("number of pairs (" + std::to_string(beta.T()) + ") differs from T (" +
                      std::to_string(data.T()) + ")");
  if (beta.ntheta != d.ntheta || beta.nx != d.nx) throw ConfigError("beta dimensions do not match the model");
  if (beta.eta.size() != d.neta) throw ConfigError("eta dimension does not match the model");
  for (int k = 0; k < data.T(); ++k) {
    if (data.y[k].size() != d.ny) throw ConfigError("measurement " + std::to_string(k + 1) + " has wrong dimension");
    if (d.nu > 0 && (data.u.empty() || data.u[k].size() != d.nu))
      throw ConfigError("input " + std::to_string(k + 1) + " missing or of wrong dimension");
  }
}

}  // namespace detail

/// Σ_j w_j log p(x_{k+1}^j, y_k | x_k^j, θ^j) for pair k. Sets `bad_point` to the
/// first sigma point with a −∞ log-density.
inline double i23_step(const PairwiseGaussian& q, const UnitRule& rule, const Model& model, const Dataset& data, int k,
                       const Eigen::VectorXd& eta, int* bad_point = nullptr) {
  const int n = q.dim();
  const Eigen::MatrixXd L = q.U.transpose();
  const std::vector<double> e = to_vector(eta);
  std::vector<double> xi(n);
  double acc = 0.0;
  bool minus_inf = false;
  for (int j = 0; j < rule.size(); ++j) {
    const double w = rule.weights[j];
    if (w == 0.0) continue;
    Eigen::Map<Eigen::VectorXd>(xi.data(), n) = q.mean + L * rule.points.col(j);
    const double v = model.joint_logpdf(detail::step_args(xi, e, q.ntheta, q.nx, data, k));
    if (std::isnan(v)) throw NumericalError("log-density is NaN at step " + std::to_string(k + 1) + ", sigma point " +
                                            std::to_string(j));
    if (v == -std::numeric_limits<double>::infinity()) {
      if (!minus_inf && bad_point) *bad_point = j;
      minus_inf = true;
    }
    acc += w * v;
  }
  return minus_inf ? -std::numeric_limits<double>::infinity() : acc;
}

inline I23Result i23_hat(const BetaParams& beta, const Model& model, const Dataset& data, const SchemeConfig& cfg,
                         int threads = 1) {
  detail::check_data(beta, model, data);
  I23Result out;
  const int T = beta.T();
  out.per_step.assign(T, 0.0);
  if (T == 0) return out;
  const auto rule = unit_rule(beta.pairs[0].dim(), cfg);
  std::vector<int> bad(T, -1);
  parallel_for(T, threads, [&](int k) {
    out.per_step[k] = i23_step(beta.pairs[k], rule, model, data, k, beta.eta, &bad[k]);
  });
  for (int k = 0; k < T; ++k) {
    out.total += out.per_step[k];
    if (bad[k] >= 0 && out.diagnostic.empty())
      out.diagnostic = "log-density is -inf at step " + std::to_string(k + 1) + ", sigma point " + std::to_string(bad[k]);
  }
  if (!out.diagnostic.empty()) out.total = -std::numeric_limits<double>::infinity();
  return out;
}

inline ElboBreakdown elbo(const BetaParams& beta, const Model& model, const Dataset& data, const SchemeConfig& cfg,
                          int threads = 1) {
  ElboBreakdown b;
  auto r = i23_hat(beta, model, data, cfg, threads);
  b.i1 = i1(beta, model, cfg);
  b.i23 = r.total;
  b.i4 = i4(beta);
  b.per_step_i23 = std::move(r.per_step);
  b.diagnostic = std::move(r.diagnostic);
  if (std::isnan(b.i1)) throw NumericalError("prior cross-entropy is NaN");
  b.total = b.i1 + b.i23 - b.i4;
  if (b.i1 == -std::numeric_limits<double>::infinity() || b.i23 == -std::numeric_limits<double>::infinity())
    b.total = -std::numeric_limits<double>::infinity();
  return b;
}

// ---- constraints ------------------------------------------------------------

/// Rows per consecutive pair: θ mean, state mean, A, C − B and the upper triangle of the
/// state covariance equation.
inline int constraint_block_size(int ntheta, int nx) {
  return ntheta + nx + upper_count(ntheta) + ntheta * nx + upper_count(nx);
}

struct ConstraintResidual {
  std::vector<Eigen::VectorXd> blocks;  // one per k = 1..T−1

  Eigen::VectorXd stacked() const {
    Eigen::Index n = 0;
    for (const auto& b : blocks) n += b.size();
    Eigen::VectorXd v(n);
    n = 0;
    for (const auto& b : blocks) {
      v.segment(n, b.size()) = b;
      n += b.size();
    }
    return v;
  }

  double max_abs() const {
    double m = 0.0;
    for (const auto& b : blocks)
      if (b.size() > 0) m = std::max(m, b.cwiseAbs().maxCoeff());
    return m;
  }
};

/// c_k(β) for k = 1..T−1: overlapping (θ, x_{k+1}) marginals of pairs k and k+1 agree iff c_k = 0.
inline ConstraintResidual constraints(const BetaParams& beta) {
  ConstraintResidual res;
  const int nt = beta.ntheta, nx = beta.nx, o2 = nt + nx;
  const int mc = constraint_block_size(nt, nx);
  for (int k = 0; k + 1 < beta.T(); ++k) {
    const auto& p = beta.pairs[k];
    const auto& q = beta.pairs[k + 1];
    Eigen::VectorXd c(mc);
    int r = 0;
    for (int i = 0; i < nt; ++i) c[r++] = p.mean[i] - q.mean[i];
    for (int i = 0; i < nx; ++i) c[r++] = p.mean[o2 + i] - q.mean[nt + i];
    for (int a = 0; a < nt; ++a)
      for (int b = a; b < nt; ++b) c[r++] = p.U(a, b) - q.U(a, b);
    for (int a = 0; a < nt; ++a)
      for (int i = 0; i < nx; ++i) c[r++] = p.U(a, o2 + i) - q.U(a, nt + i);
    for (int i = 0; i < nx; ++i)
      for (int j = i; j < nx; ++j)
        c[r++] = p.U.col(o2 + i).dot(p.U.col(o2 + j)) - q.U.col(nt + i).dot(q.U.col(nt + j));
    res.blocks.push_back(std::move(c));
  }
  return res;
}

/// Jacobian of the stacked constraints with respect to the packed β (block bidiagonal in k).
inline Eigen::SparseMatrix<double> constraint_jacobian(const BetaParams& beta) {
  const int nt = beta.ntheta, nx = beta.nx, o2 = nt + nx;
  const auto L = beta.layout();
  const int mc = constraint_block_size(nt, nx);
  const int rows = std::max(0, beta.T() - 1) * mc;
  std::vector<Eigen::Triplet<double>> trip;
  for (int k = 0; k + 1 < beta.T(); ++k) {
    const auto& p = beta.pairs[k];
    const auto& q = beta.pairs[k + 1];
    const int P = beta.pair_offset(k), Q = beta.pair_offset(k + 1);
    int r = k * mc;
    auto lin = [&](int col_p, int col_q) {
      trip.emplace_back(r, P + col_p, 1.0);
      trip.emplace_back(r, Q + col_q, -1.0);
      ++r;
    };
    for (int i = 0; i < nt; ++i) lin(L.mean_index(i), L.mean_index(i));
    for (int i = 0; i < nx; ++i) lin(L.mean_index(o2 + i), L.mean_index(nt + i));
    for (int a = 0; a < nt; ++a)
      for (int b = a; b < nt; ++b) lin(L.chol_index(a, b), L.chol_index(a, b));
    for (int a = 0; a < nt; ++a)
      for (int i = 0; i < nx; ++i) lin(L.chol_index(a, o2 + i), L.chol_index(a, nt + i));
    for (int i = 0; i < nx; ++i) {
      for (int j = i; j < nx; ++j) {
        // ∂/∂U(s, ci) of U(:, ci)·U(:, cj) is U(s, cj), and symmetrically.
        auto quad = [&](const PairwiseGaussian& g, int off, int ci, int cj, double sign) {
          for (int s = 0; s <= cj; ++s) {
            if (s <= ci) trip.emplace_back(r, off + L.chol_index(s, ci), sign * g.U(s, cj));
            trip.emplace_back(r, off + L.chol_index(s, cj), sign * g.U(s, ci));
          }
        };
        quad(p, P, o2 + i, o2 + j, 1.0);
        quad(q, Q, nt + i, nt + j, -1.0);
        ++r;
      }
    }
  }
  Eigen::SparseMatrix<double> J(rows, beta.packed_size());
  J.setFromTriplets(trip.begin(), trip.end());
  return J;
}

/// Σ_i y_i ∇²c_i(β), returned as one p × p block per pair (the constraints never couple
/// second derivatives across pairs or with η).
inline std::vector<Eigen::MatrixXd> constraint_hessian_blocks(const BetaParams& beta, const Eigen::VectorXd& y) {
  const int nt = beta.ntheta, nx = beta.nx, o2 = nt + nx;
  const auto L = beta.layout();
  const int p = L.size();
  const int mc = constraint_block_size(nt, nx);
  const int quad_start = nt + nx + upper_count(nt) + nt * nx;
  std::vector<Eigen::MatrixXd> H(beta.T(), Eigen::MatrixXd::Zero(p, p));
  for (int k = 0; k + 1 < beta.T(); ++k) {
    int r = k * mc + quad_start;
    for (int i = 0; i < nx; ++i) {
      for (int j = i; j < nx; ++j, ++r) {
        const double w = y[r];
        if (w == 0.0) continue;
        auto add = [&](Eigen::MatrixXd& B, int ci, int cj, double sign) {
          for (int s = 0; s <= ci; ++s) {
            const int a = L.chol_index(s, ci), b = L.chol_index(s, cj);
            B(a, b) += sign * w;
            B(b, a) += sign * w;
          }
        };
        add(H[k], o2 + i, o2 + j, 1.0);
        add(H[k + 1], nt + i, nt + j, -1.0);
      }
    }
  }
  return H;
}

// ---- derivatives -------------------------------------------------------------

enum class HessianMode { None, Exact, GaussNewton };

struct ElboDerivatives {
  ElboBreakdown value;
  Eigen::VectorXd gradient;                    // over the packed β
  std::vector<Eigen::MatrixXd> hess_pair;      // T blocks, p × p
  std::vector<Eigen::MatrixXd> hess_pair_eta;  // T blocks, p × neta
  Eigen::MatrixXd hess_eta;                    // neta × neta
};

namespace detail {

inline PointDerivatives point_exact(const Model& model, const std::vector<double>& xi, const Eigen::VectorXd& eta,
                                    int nt, int nx, const Dataset& data, int k, bool hessian) {
  const int n = static_cast<int>(xi.size()), ne = static_cast<int>(eta.size()), m = n + ne;
  const std::vector<double> e = to_vector(eta);
  if (hessian) {
    const auto sx = ad::seed<ad::Dual2>(xi, 0, m);
    const auto se = ad::seed<ad::Dual2>(e, n, m);
    const auto v = model.joint_logpdf(step_args(sx, se, nt, nx, data, k));
    return {v.v, v.gradient(m), v.hessian(m)};
  }
  const auto sx = ad::seed<ad::Dual>(xi, 0, m);
  const auto se = ad::seed<ad::Dual>(e, n, m);
  const auto v = model.joint_logpdf(step_args(sx, se, nt, nx, data, k));
  return {v.v, v.gradient(m), {}};
}

/// Gauss-Newton curvature for log N(e; 0, Π) with e the model residual: the whitened
/// residual w = L⁻¹e contributes −JᵀJ, log det L contributes its exact Hessian.
inline PointDerivatives point_gauss_newton(const Model& model, const std::vector<double>& xi,
                                           const Eigen::VectorXd& eta, int nt, int nx, const Dataset& data, int k) {
  const int n = static_cast<int>(xi.size()), ne = static_cast<int>(eta.size()), m = n + ne;
  const std::vector<double> e = to_vector(eta);
  const auto sx = ad::seed<ad::Dual>(xi, 0, m);
  const auto se = ad::seed<ad::Dual>(e, n, m);
  const auto args = step_args(sx, se, nt, nx, data, k);
  const auto r = model.residual(args);
  const int nr = static_cast<int>(r.size());
  const auto L = model.noise_chol(args.theta, args.eta);
  const auto w = forward_substitute(L, r, nr);
  Eigen::MatrixXd J(nr, m);
  Eigen::VectorXd wv(nr);
  for (int i = 0; i < nr; ++i) {
    wv[i] = w[i].v;
    J.row(i) = w[i].gradient(m).transpose();
  }
  const auto sx2 = ad::seed<ad::Dual2>(xi, 0, m);
  const auto se2 = ad::seed<ad::Dual2>(e, n, m);
  const auto L2 = model.noise_chol(std::span<const ad::Dual2>(sx2.data(), static_cast<std::size_t>(nt)),
                                   std::span<const ad::Dual2>(se2.data(), se2.size()));
  ad::Dual2 logdet(0.0);
  for (int i = 0; i < nr; ++i) logdet = logdet + log(L2[i * nr + i]);
  PointDerivatives pd;
  pd.value = -0.5 * wv.squaredNorm() - logdet.v - 0.5 * nr * kLog2Pi;
  pd.gradient = -J.transpose() * wv - logdet.gradient(m);
  pd.hessian = -J.transpose() * J - logdet.hessian(m);
  return pd;
}

}  // namespace detail

/// Value, exact gradient and (optionally) per-pair Hessian blocks of L̂ with respect to
/// the packed β. Sigma points are affine in β_k, so each step only needs derivatives of
/// the log-density at the points.
inline ElboDerivatives derivatives(const BetaParams& beta, const Model& model, const Dataset& data,
                                   const SchemeConfig& cfg, HessianMode mode, int threads = 1) {
  detail::check_data(beta, model, data);
  if (beta.T() == 0) throw DomainError("derivatives: need at least one pair");
  if (mode == HessianMode::GaussNewton && !model.has_additive_noise())
    throw ConfigError("gauss-newton Hessian needs a model with additive Gaussian noise");
  const auto L = beta.layout();
  const int T = beta.T(), n = L.n(), p = L.size(), ne = static_cast<int>(beta.eta.size());
  const int nt = beta.ntheta, nx = beta.nx;
  const bool with_h = mode != HessianMode::None;
  const auto rule = unit_rule(n, cfg);

  ElboDerivatives out;
  out.gradient = Eigen::VectorXd::Zero(beta.packed_size());
  if (with_h) {
    out.hess_pair.assign(T, Eigen::MatrixXd());
    out.hess_pair_eta.assign(T, Eigen::MatrixXd());
    out.hess_eta = Eigen::MatrixXd::Zero(ne, ne);
  }

  std::vector<LocalDerivatives> local(T);
  parallel_for(T, threads, [&](int k) {
    const auto& q = beta.pairs[k];
    const Eigen::MatrixXd Lq = q.U.transpose();
    std::vector<PointDerivatives> pts(rule.size());
    std::vector<double> xi(n);
    for (int j = 0; j < rule.size(); ++j) {
      if (rule.weights[j] == 0.0) continue;
      Eigen::Map<Eigen::VectorXd>(xi.data(), n) = q.mean + Lq * rule.points.col(j);
      pts[j] = mode == HessianMode::GaussNewton
                   ? detail::point_gauss_newton(model, xi, beta.eta, nt, nx, data, k)
                   : detail::point_exact(model, xi, beta.eta, nt, nx, data, k, with_h);
      if (!std::isfinite(pts[j].value) || !pts[j].gradient.allFinite())
        throw NumericalError("log-density not differentiable at step " + std::to_string(k + 1) + ", sigma point " +
                             std::to_string(j));
    }
    local[k] = contract_affine(rule, ne, pts, with_h);
  });

  out.value.per_step_i23.assign(T, 0.0);
  for (int k = 0; k < T; ++k) {
    const auto& d = local[k];
    out.value.per_step_i23[k] = d.value;
    out.value.i23 += d.value;
    out.gradient.segment(beta.pair_offset(k), p) += d.gradient.head(p);
    out.gradient.tail(ne) += d.gradient.tail(ne);
    if (with_h) {
      out.hess_pair[k] = d.hessian.topLeftCorner(p, p);
      out.hess_pair_eta[k] = d.hessian.topRightCorner(p, ne);
      out.hess_eta += d.hessian.bottomRightCorner(ne, ne);
    }
  }

  // I1 over the (θ, x_1) marginal of the first pair.
  const auto head = marginal_theta_x(beta.pairs[0], Slot::First);
  const auto d1 = i1_local_derivatives(head, model, cfg);
  const int hd = L.head_dim();
  std::vector<int> map(hd + upper_count(hd));
  for (int i = 0; i < hd; ++i) map[i] = L.mean_index(i);
  for (int a = 0; a < hd; ++a)
    for (int b = a; b < hd; ++b) map[hd + upper_index(hd, a, b)] = L.chol_index(a, b);
  out.value.i1 = d1.value;
  for (std::size_t i = 0; i < map.size(); ++i) {
    out.gradient[map[i]] += d1.gradient[i];
    if (with_h)
      for (std::size_t j = 0; j < map.size(); ++j) out.hess_pair[0](map[i], map[j]) += d1.hessian(i, j);
  }

  out.value.i4 = i4(beta);
  i4_derivatives(beta, out.gradient.head(T * p), with_h ? &out.hess_pair : nullptr, -1.0);
  out.value.total = out.value.i1 + out.value.i23 - out.value.i4;
  return out;
}

/// Assembles the per-pair blocks of ElboDerivatives into one sparse symmetric matrix.
inline Eigen::SparseMatrix<double> assemble_hessian(const ElboDerivatives& d, int T, int p, int ne) {
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(T) * p * (p + 2 * ne) + static_cast<std::size_t>(ne) * ne);
  for (int k = 0; k < T; ++k) {
    const int off = k * p;
    for (int j = 0; j < p; ++j)
      for (int i = 0; i < p; ++i)
        if (d.hess_pair[k](i, j) != 0.0) trip.emplace_back(off + i, off + j, d.hess_pair[k](i, j));
    for (int e = 0; e < ne; ++e)
      for (int i = 0; i < p; ++i) {
        const double v = d.hess_pair_eta[k](i, e);
        if (v == 0.0) continue;
        trip.emplace_back(off + i, T * p + e, v);
        trip.emplace_back(T * p + e, off + i, v);
      }
  }
  for (int e = 0; e < ne; ++e)
    for (int f = 0; f < ne; ++f)
      if (d.hess_eta(e, f) != 0.0) trip.emplace_back(T * p + e, T * p + f, d.hess_eta(e, f));
  Eigen::SparseMatrix<double> H(T * p + ne, T * p + ne);
  H.setFromTriplets(trip.begin(), trip.end());
  return H;
}

}  // namespace vissm
