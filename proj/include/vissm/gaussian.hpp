#pragma once

// Pairwise Gaussian joints q_k(θ, x_k, x_{k+1}) = N(mean, UᵀU), with U the
// upper-triangular factor
//
//        | A B C |   θ
//    U = | 0 D E |   x_k
//        | 0 0 F |   x_{k+1}
//
// and the closed-form pieces of the bound: entropies, the overlap term I4 and
// the prior cross-entropy I1.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "vissm/ad.hpp"
#include "vissm/error.hpp"
#include "vissm/linalg.hpp"
#include "vissm/model.hpp"
#include "vissm/quadrature.hpp"

namespace vissm {

/// Mean and upper Cholesky factor of a Gaussian: cov = UᵀU.
struct GaussianFactor {
  Eigen::VectorXd mean;
  Eigen::MatrixXd U;

  int dim() const { return static_cast<int>(mean.size()); }
  Eigen::MatrixXd covariance() const { return U.transpose() * U; }
};

/// Index arithmetic for the packed parameters of one pair: [mean (n), upper(U) row-major].
struct PairLayout {
  int ntheta = 0;
  int nx = 1;

  int n() const { return ntheta + 2 * nx; }
  int head_dim() const { return ntheta + nx; }
  int size() const { return n() + upper_count(n()); }
  int mean_index(int i) const { return i; }
  int chol_index(int r, int c) const { return n() + upper_index(n(), r, c); }

  int theta_offset() const { return 0; }
  int xk_offset() const { return ntheta; }
  int xk1_offset() const { return ntheta + nx; }
};

/// Free-parameter count of one pair, nθ+2nx + (nθ+2nx)(nθ+2nx+1)/2.
inline int pair_parameter_count(int ntheta, int nx) { return PairLayout{ntheta, nx}.size(); }

struct PairwiseGaussian {
  int ntheta = 0;
  int nx = 1;
  Eigen::VectorXd mean;  // [μ_k, μ̄_k, μ̃_k]
  Eigen::MatrixXd U;     // P^{1/2}

  PairwiseGaussian() = default;
  PairwiseGaussian(int ntheta_, int nx_)
      : ntheta(ntheta_), nx(nx_), mean(Eigen::VectorXd::Zero(ntheta_ + 2 * nx_)),
        U(Eigen::MatrixXd::Identity(ntheta_ + 2 * nx_, ntheta_ + 2 * nx_)) {}
  PairwiseGaussian(int ntheta_, int nx_, Eigen::VectorXd mean_, Eigen::MatrixXd U_)
      : ntheta(ntheta_), nx(nx_), mean(std::move(mean_)), U(std::move(U_)) {
    validate();
  }

  int dim() const { return ntheta + 2 * nx; }
  PairLayout layout() const { return {ntheta, nx}; }

  auto mu_theta() const { return mean.segment(0, ntheta); }
  auto mu_xk() const { return mean.segment(ntheta, nx); }
  auto mu_xk1() const { return mean.segment(ntheta + nx, nx); }
  auto mu_theta() { return mean.segment(0, ntheta); }
  auto mu_xk() { return mean.segment(ntheta, nx); }
  auto mu_xk1() { return mean.segment(ntheta + nx, nx); }

  auto A() const { return U.block(0, 0, ntheta, ntheta); }
  auto B() const { return U.block(0, ntheta, ntheta, nx); }
  auto C() const { return U.block(0, ntheta + nx, ntheta, nx); }
  auto D() const { return U.block(ntheta, ntheta, nx, nx); }
  auto E() const { return U.block(ntheta, ntheta + nx, nx, nx); }
  auto F() const { return U.block(ntheta + nx, ntheta + nx, nx, nx); }
  auto A() { return U.block(0, 0, ntheta, ntheta); }
  auto B() { return U.block(0, ntheta, ntheta, nx); }
  auto C() { return U.block(0, ntheta + nx, ntheta, nx); }
  auto D() { return U.block(ntheta, ntheta, nx, nx); }
  auto E() { return U.block(ntheta, ntheta + nx, nx, nx); }
  auto F() { return U.block(ntheta + nx, ntheta + nx, nx, nx); }

  Eigen::MatrixXd covariance() const { return U.transpose() * U; }

  /// Upper triangular with strictly positive diagonal.
  void validate() const {
    const int n = dim();
    if (mean.size() != n || U.rows() != n || U.cols() != n) throw DomainError("pairwise gaussian: wrong dimensions");
    for (int r = 0; r < n; ++r) {
      if (!(U(r, r) > 0.0)) throw DomainError("pairwise gaussian: non-positive diagonal at " + std::to_string(r));
      for (int c = 0; c < r; ++c)
        if (U(r, c) != 0.0) throw DomainError("pairwise gaussian: factor is not upper triangular");
    }
  }

  void pack(Eigen::Ref<Eigen::VectorXd> out) const {
    const auto L = layout();
    out.head(dim()) = mean;
    for (int r = 0; r < dim(); ++r)
      for (int c = r; c < dim(); ++c) out[L.chol_index(r, c)] = U(r, c);
  }

  static PairwiseGaussian unpack(const PairLayout& L, const Eigen::Ref<const Eigen::VectorXd>& v) {
    PairwiseGaussian p(L.ntheta, L.nx);
    p.mean = v.head(L.n());
    p.U.setZero();
    for (int r = 0; r < L.n(); ++r)
      for (int c = r; c < L.n(); ++c) p.U(r, c) = v[L.chol_index(r, c)];
    return p;
  }
};

/// The decision vector: T pairwise joints plus the point-estimate parameters η.
/// With no measurements (T = 0) the only density left is q(θ, x_1), held in `head`.
struct BetaParams {
  int ntheta = 0;
  int nx = 1;
  std::vector<PairwiseGaussian> pairs;
  Eigen::VectorXd eta;
  std::optional<GaussianFactor> head;

  int T() const { return static_cast<int>(pairs.size()); }
  PairLayout layout() const { return {ntheta, nx}; }
  int packed_size() const { return T() * layout().size() + static_cast<int>(eta.size()); }
  int pair_offset(int k) const { return k * layout().size(); }
  int eta_offset() const { return T() * layout().size(); }

  Eigen::VectorXd pack() const {
    Eigen::VectorXd v(packed_size());
    const int p = layout().size();
    for (int k = 0; k < T(); ++k) pairs[k].pack(v.segment(k * p, p));
    v.tail(eta.size()) = eta;
    return v;
  }

  /// Replaces pairs and η from a packed vector of the same layout (no validation).
  void unpack(const Eigen::Ref<const Eigen::VectorXd>& v) {
    const auto L = layout();
    const int p = L.size();
    for (int k = 0; k < T(); ++k) pairs[k] = PairwiseGaussian::unpack(L, v.segment(k * p, p));
    eta = v.tail(eta.size());
  }

  void validate() const {
    for (const auto& q : pairs) {
      if (q.ntheta != ntheta || q.nx != nx) throw DomainError("beta: pair dimensions disagree");
      q.validate();
    }
  }
};

enum class Slot { First, Second };

/// Marginal over (θ, x_k) (first slot) or (θ, x_{k+1}) (second slot) of a pair.
inline GaussianFactor marginal_theta_x(const PairwiseGaussian& q, Slot which) {
  const int nt = q.ntheta, nx = q.nx, d = nt + nx;
  GaussianFactor g;
  if (which == Slot::First) {
    g.mean = q.mean.head(d);
    g.U = q.U.topLeftCorner(d, d);
    return g;
  }
  g.mean.resize(d);
  g.mean << q.mu_theta(), q.mu_xk1();
  Eigen::MatrixXd P(d, d);
  const Eigen::MatrixXd A = q.A(), Cb = q.C(), E = q.E(), F = q.F();
  P.topLeftCorner(nt, nt) = A.transpose() * A;
  P.topRightCorner(nt, nx) = A.transpose() * Cb;
  P.bottomLeftCorner(nx, nt) = Cb.transpose() * A;
  P.bottomRightCorner(nx, nx) = Cb.transpose() * Cb + E.transpose() * E + F.transpose() * F;
  g.U = upper_cholesky(P, "second-slot marginal covariance");
  return g;
}

/// Differential entropy of a d-dimensional Gaussian with Cholesky factor `chol`.
inline double entropy(int dim, const Eigen::MatrixXd& chol) {
  if (chol.rows() != dim || chol.cols() != dim) throw DomainError("entropy: factor has wrong dimension");
  double s = 0.5 * dim * (1.0 + kLog2Pi);
  for (int i = 0; i < dim; ++i) {
    if (!(chol(i, i) > 0.0)) throw DomainError("entropy: non-positive diagonal at " + std::to_string(i));
    s += std::log(chol(i, i));
  }
  return s;
}

inline double entropy(const GaussianFactor& g) { return entropy(g.dim(), g.U); }

/// Σ_k E[log q_k] − Σ_{k≥2} E[log q_k(θ, x_k)] with the overlap taken from each pair's first slot.
inline double i4(const BetaParams& beta) {
  if (beta.T() == 0) return beta.head ? -entropy(*beta.head) : 0.0;
  double v = 0.0;
  for (int k = 0; k < beta.T(); ++k) {
    const auto& q = beta.pairs[k];
    v -= entropy(q.dim(), q.U);
    if (k > 0) v += entropy(marginal_theta_x(q, Slot::First));
  }
  return v;
}

/// Adds ∂I4/∂β (and the Hessian diagonal) for the pair entries. Only diagonal
/// entries of U appear; the overlap cancels the (θ, x_k) diagonal for k ≥ 2.
inline void i4_derivatives(const BetaParams& beta, Eigen::Ref<Eigen::VectorXd> grad,
                           std::vector<Eigen::MatrixXd>* hess, double scale) {
  const auto L = beta.layout();
  for (int k = 0; k < beta.T(); ++k) {
    const auto& q = beta.pairs[k];
    const int first = k == 0 ? 0 : L.head_dim();
    for (int i = first; i < L.n(); ++i) {
      const int idx = L.chol_index(i, i);
      const double u = q.U(i, i);
      grad[beta.pair_offset(k) + idx] += scale * (-1.0 / u);
      if (hess) (*hess)[k](idx, idx) += scale * (1.0 / (u * u));
    }
  }
}

/// Closed-form E_q[log N(z; m, S)] for q = N(μ, UᵀU).
inline double gaussian_cross_entropy(const GaussianFactor& q, const GaussianMoments& prior) {
  const int d = q.dim();
  if (d == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(prior.cov);
  if (llt.info() != Eigen::Success) throw ConfigError("prior covariance is singular or not positive definite");
  const Eigen::VectorXd r = llt.matrixL().solve(q.mean - prior.mean);
  const Eigen::MatrixXd W = llt.matrixL().solve(q.U.transpose());  // L⁻¹ Uᵀ
  const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * (r.squaredNorm() + W.squaredNorm() + d * kLog2Pi + logdet);
}

/// E_q[log p(x_1, θ)] over the (θ, x_1) marginal of the first pair: closed form for a
/// Gaussian prior, otherwise the sigma-point approximation under `scheme`.
inline double i1(const BetaParams& beta, const Model& model, const SchemeConfig& scheme = {}) {
  GaussianFactor q;
  if (beta.T() > 0) {
    q = marginal_theta_x(beta.pairs[0], Slot::First);
  } else if (beta.head) {
    q = *beta.head;
  } else {
    throw DomainError("i1: beta holds no density over (theta, x1)");
  }
  if (auto g = model.gaussian_prior()) return gaussian_cross_entropy(q, *g);
  const int nt = beta.ntheta;
  const auto set = generate(q.mean, q.U.transpose(), scheme);
  return expect(set, [&](const Eigen::VectorXd& xi) {
    return model.prior_logpdf(PriorArgs<double>{{xi.data(), static_cast<std::size_t>(nt)},
                                                {xi.data() + nt, static_cast<std::size_t>(beta.nx)}});
  });
}

/// I1 and its derivatives with respect to the head entries of the first pair
/// (mean and U restricted to (θ, x_1)), in the local layout of contract_affine.
inline LocalDerivatives i1_local_derivatives(const GaussianFactor& q, const Model& model,
                                             const SchemeConfig& scheme) {
  const int d = q.dim();
  const int nu = upper_count(d);
  LocalDerivatives out;
  if (auto g = model.gaussian_prior()) {
    Eigen::LLT<Eigen::MatrixXd> llt(g->cov);
    if (llt.info() != Eigen::Success) throw ConfigError("prior covariance is singular or not positive definite");
    const Eigen::MatrixXd Sinv = llt.solve(Eigen::MatrixXd::Identity(d, d));
    out.value = gaussian_cross_entropy(q, *g);
    out.gradient = Eigen::VectorXd::Zero(d + nu);
    out.hessian = Eigen::MatrixXd::Zero(d + nu, d + nu);
    out.gradient.head(d) = -Sinv * (q.mean - g->mean);
    out.hessian.topLeftCorner(d, d) = -Sinv;
    const Eigen::MatrixXd US = q.U * Sinv;
    for (int a = 0; a < d; ++a) {
      for (int b = a; b < d; ++b) {
        const int i = d + upper_index(d, a, b);
        out.gradient[i] = -US(a, b);
        for (int c = a; c < d; ++c) out.hessian(i, d + upper_index(d, a, c)) = -Sinv(b, c);
      }
    }
    return out;
  }
  const int nt = static_cast<int>(model.dims().ntheta);
  const int nx = d - nt;
  const auto rule = unit_rule(d, scheme);
  const auto set = generate(q.mean, q.U.transpose(), rule);
  std::vector<PointDerivatives> pts(rule.size());
  for (int j = 0; j < rule.size(); ++j) {
    if (rule.weights[j] == 0.0) continue;
    const auto& xi = set.points[j];
    const auto s = ad::seed<ad::Dual2>({xi.data(), static_cast<std::size_t>(d)}, 0, d);
    const auto v = model.prior_logpdf(
        PriorArgs<ad::Dual2>{{s.data(), static_cast<std::size_t>(nt)}, {s.data() + nt, static_cast<std::size_t>(nx)}});
    if (std::isnan(v.v)) throw NumericalError("i1: NaN at sigma point " + std::to_string(j));
    pts[j] = {v.v, v.gradient(d), v.hessian(d)};
  }
  return contract_affine(rule, 0, pts, true);
}

}  // namespace vissm
