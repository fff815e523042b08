#pragma once

// Maximizes L̂(β) subject to the consistency constraints c(β) = 0.
//
// Decision variables live in unconstrained coordinates z: every Cholesky
// diagonal is β_ii = floor + softplus(z_ii), everything else is β itself.
// The default method is an augmented Lagrangian whose inner problem is solved
// by a Levenberg trust-region Newton iteration on the sparse
// (block tridiagonal plus η arrow) Hessian.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include "vissm/elbo.hpp"
#include "vissm/error.hpp"
#include "vissm/gaussian.hpp"
#include "vissm/linalg.hpp"
#include "vissm/model.hpp"
#include "vissm/quadrature.hpp"

namespace vissm {

enum class SolverMethod { AugmentedLagrangian, Sqp };
enum class SolveStatus { Converged, MaxIter, NumericalFailure };
enum class MultiplierInit { Zero, LeastSquares };
/// Which consistency constraints are substituted away instead of penalized.
/// Full also derives D_{k+1} = chol(E_kᵀE_k + F_kᵀF_k), so every iterate is feasible.
enum class Elimination { None, Linear, Full };

inline std::string to_string(SolverMethod m) { return m == SolverMethod::Sqp ? "sqp" : "augmented-lagrangian"; }
inline std::string to_string(HessianMode h) {
  switch (h) {
    case HessianMode::None: return "none";
    case HessianMode::Exact: return "exact";
    case HessianMode::GaussNewton: return "gauss-newton";
  }
  return "exact";
}
inline std::string to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Converged: return "converged";
    case SolveStatus::MaxIter: return "max-iter";
    case SolveStatus::NumericalFailure: return "numerical-failure";
  }
  return "numerical-failure";
}
inline std::string to_string(MultiplierInit m) { return m == MultiplierInit::Zero ? "zero" : "least-squares"; }
inline std::string to_string(Elimination e) {
  switch (e) {
    case Elimination::None: return "none";
    case Elimination::Linear: return "linear";
    case Elimination::Full: return "full";
  }
  return "none";
}

struct SolverOptions {
  SolverMethod method = SolverMethod::AugmentedLagrangian;
  int max_outer = 50;
  int max_inner = 200;
  double tol_grad = 1e-6;
  double tol_constraint = 1e-8;
  HessianMode hessian = HessianMode::Exact;
  double penalty_init = 10.0;
  double penalty_growth = 10.0;
  double diag_floor = 1e-12;
  MultiplierInit multipliers = MultiplierInit::Zero;
  Elimination elimination = Elimination::None;
  int threads = 1;
  /// 0 silent, 1 one line per outer iteration, 2 also one per inner step (stderr).
  int verbosity = 0;

  void validate() const {
    if (!(tol_grad > 0.0)) throw ConfigError("solver: tol_grad must be positive");
    if (!(tol_constraint > 0.0)) throw ConfigError("solver: tol_constraint must be positive");
    if (!(penalty_growth > 1.0)) throw ConfigError("solver: penalty_growth must exceed 1");
    if (!(penalty_init > 0.0)) throw ConfigError("solver: penalty_init must be positive");
    if (!(diag_floor >= 0.0)) throw ConfigError("solver: diag_floor must be non-negative");
    if (max_outer < 1 || max_inner < 1) throw ConfigError("solver: iteration limits must be at least 1");
    if (hessian == HessianMode::None) throw ConfigError("solver: a Hessian mode (exact or gauss-newton) is required");
    if (threads < 1) throw ConfigError("solver: threads must be at least 1");
  }
};

struct OuterTrace {
  int outer = 0;
  double objective = 0.0;  // L̂
  double residual = 0.0;   // ||c||∞
  double penalty = 0.0;
  int inner = 0;
};

/// Merit before and after one accepted step (the merit is minimized).
struct MeritStep {
  int outer = 0;
  double before = 0.0;
  double after = 0.0;
};

struct SolveReport {
  ElboBreakdown elbo;
  double constraint_residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int outer_iterations = 0;
  double lagrangian_gradient = std::numeric_limits<double>::infinity();
  SolveStatus status = SolveStatus::MaxIter;
  std::string message;
  double penalty = 0.0;
  std::vector<OuterTrace> trace;
  std::vector<MeritStep> merit;
};

struct InitOptions {
  /// Diagonal of the state blocks D and F.
  double state_scale = 1.0;
  /// Multiplies the prior θ factor used for A.
  double theta_scale = 1.0;
  std::optional<Eigen::VectorXd> theta_mean;
  std::optional<Eigen::VectorXd> x1_mean;
  std::optional<Eigen::VectorXd> eta;
};

/// Feasible starting point: prior means rolled out through the noise-free transition,
/// A = prior θ factor, B = C = E = 0, D = F = scale·I, and each pair's (θ, x_k)
/// block rebuilt from the previous pair's (θ, x_{k+1}) marginal.
inline BetaParams initialize(const Model& model, const Dataset& data, const InitOptions& opt = {}) {
  const auto& d = model.dims();
  if (!(opt.state_scale > 0.0)) throw ConfigError("init: state_scale must be positive");
  if (!(opt.theta_scale > 0.0)) throw ConfigError("init: theta_scale must be positive");
  const auto pm = model.prior_moments();
  const int nt = d.ntheta, nx = d.nx, hd = nt + nx;
  BetaParams beta;
  beta.ntheta = nt;
  beta.nx = nx;
  beta.eta = opt.eta ? *opt.eta : model.default_eta();
  if (beta.eta.size() != d.neta) throw ConfigError("init: eta has wrong dimension");
  Eigen::VectorXd theta = opt.theta_mean ? *opt.theta_mean : Eigen::VectorXd(pm.mean.head(nt));
  Eigen::VectorXd x = opt.x1_mean ? *opt.x1_mean : Eigen::VectorXd(pm.mean.segment(nt, nx));
  if (theta.size() != nt || x.size() != nx) throw ConfigError("init: mean override has wrong dimension");
  const Eigen::MatrixXd Atheta =
      nt > 0 ? Eigen::MatrixXd(opt.theta_scale * upper_cholesky(pm.cov.topLeftCorner(nt, nt), "prior theta covariance"))
             : Eigen::MatrixXd(0, 0);

  if (data.T() == 0) {
    GaussianFactor head;
    head.mean.resize(hd);
    head.mean << theta, x;
    head.U = Eigen::MatrixXd::Zero(hd, hd);
    head.U.topLeftCorner(nt, nt) = Atheta;
    head.U.bottomRightCorner(nx, nx) = opt.state_scale * Eigen::MatrixXd::Identity(nx, nx);
    beta.head = head;
    return beta;
  }

  Eigen::MatrixXd first(hd, hd);
  first.setZero();
  first.topLeftCorner(nt, nt) = Atheta;
  first.bottomRightCorner(nx, nx) = opt.state_scale * Eigen::MatrixXd::Identity(nx, nx);
  for (int k = 0; k < data.T(); ++k) {
    PairwiseGaussian q(nt, nx);
    const Eigen::VectorXd xn = model.predict(x, theta, beta.eta, data.u_at(k), k);
    q.mean << theta, x, xn;
    q.U.setZero();
    q.U.topLeftCorner(hd, hd) = first;
    q.F() = opt.state_scale * Eigen::MatrixXd::Identity(nx, nx);
    beta.pairs.push_back(q);
    first = marginal_theta_x(q, Slot::Second).U;
    x = xn;
  }
  return beta;
}

namespace detail {

inline double softplus(double z) { return z > 30.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double softplus_inv(double y) { return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y)); }
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

using SpMat = Eigen::SparseMatrix<double>;

/// Upper Cholesky factor of EᵀE + FᵀF from x = [E row-major, upper(F) row-major].
template <class S>
std::vector<S> overlap_factor(const std::vector<S>& x, int nx) {
  auto E = [&](int r, int c) -> const S& { return x[static_cast<std::size_t>(r * nx + c)]; };
  auto F = [&](int r, int c) -> S {
    if (r > c) return S(0.0);
    return x[static_cast<std::size_t>(nx * nx + upper_index(nx, r, c))];
  };
  std::vector<S> M(static_cast<std::size_t>(nx * nx), S(0.0));
  for (int i = 0; i < nx; ++i)
    for (int j = i; j < nx; ++j) {
      S acc(0.0);
      for (int r = 0; r < nx; ++r) acc += E(r, i) * E(r, j);
      for (int r = 0; r <= std::min(i, j); ++r) acc += F(r, i) * F(r, j);
      M[static_cast<std::size_t>(i * nx + j)] = acc;
    }
  std::vector<S> R(static_cast<std::size_t>(upper_count(nx)), S(0.0));
  auto Rr = [&](int r, int c) -> S& { return R[static_cast<std::size_t>(upper_index(nx, r, c))]; };
  for (int i = 0; i < nx; ++i) {
    S d = M[static_cast<std::size_t>(i * nx + i)];
    for (int k = 0; k < i; ++k) d -= Rr(k, i) * Rr(k, i);
    using std::sqrt;
    using ad::sqrt;
    Rr(i, i) = sqrt(d);
    for (int j = i + 1; j < nx; ++j) {
      S a = M[static_cast<std::size_t>(i * nx + j)];
      for (int k = 0; k < i; ++k) a -= Rr(k, i) * Rr(k, j);
      Rr(i, j) = a / Rr(i, i);
    }
  }
  return R;
}

/// The NLP in reduced coordinates w (z with linear constraints optionally substituted).
class Problem {
 public:
  Problem(const Model& model, const Dataset& data, const SchemeConfig& scheme, const SolverOptions& opt,
          const BetaParams& beta0)
      : model_(model), data_(data), scheme_(scheme), opt_(opt), templ_(beta0) {
    const auto L = beta0.layout();
    N_ = beta0.packed_size();
    is_diag_.assign(N_, false);
    for (int k = 0; k < beta0.T(); ++k)
      for (int i = 0; i < L.n(); ++i) is_diag_[beta0.pair_offset(k) + L.chol_index(i, i)] = true;

    const int mc = constraint_block_size(beta0.ntheta, beta0.nx);
    const int quad_start = mc - upper_count(beta0.nx);
    const int rows = std::max(0, beta0.T() - 1) * mc;
    col_.resize(N_);
    std::iota(col_.begin(), col_.end(), 0);
    if (opt.elimination != Elimination::None) {
      const SpMat J = constraint_jacobian(beta0);
      const SpMat Jr = SpMat(J.transpose());  // columns of Jr are rows of J
      std::vector<int> parent(N_);
      std::iota(parent.begin(), parent.end(), 0);
      auto find = [&](int a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
      };
      for (int r = 0; r < rows; ++r) {
        if (r % mc >= quad_start) continue;
        std::vector<int> idx;
        for (SpMat::InnerIterator it(Jr, r); it; ++it) idx.push_back(static_cast<int>(it.row()));
        if (idx.size() != 2) throw NumericalError("elimination: linear constraint row is not a simple equality");
        const int a = find(idx[0]), b = find(idx[1]);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
      if (opt.elimination == Elimination::Full) setup_derived(beta0);
      std::vector<int> cls(N_, -1);
      int nw = 0;
      for (int i = 0; i < N_; ++i) {
        if (!derived_.empty() && derived_[i]) {
          col_[i] = -1;
          continue;
        }
        const int r = find(i);
        if (cls[r] < 0) cls[r] = nw++;
        col_[i] = cls[r];
      }
      nw_ = nw;
      if (opt.elimination == Elimination::Linear)
        for (int r = 0; r < rows; ++r)
          if (r % mc >= quad_start) rows_.push_back(r);
    } else {
      nw_ = N_;
      rows_.resize(rows);
      std::iota(rows_.begin(), rows_.end(), 0);
    }
    full_rows_ = rows;
    std::vector<Eigen::Triplet<double>> t;
    for (int i = 0; i < N_; ++i)
      if (col_[i] >= 0) t.emplace_back(i, col_[i], 1.0);
    E_.resize(N_, nw_);
    E_.setFromTriplets(t.begin(), t.end());
    std::vector<Eigen::Triplet<double>> s;
    for (int r = 0; r < static_cast<int>(rows_.size()); ++r) s.emplace_back(r, rows_[r], 1.0);
    S_.resize(static_cast<Eigen::Index>(rows_.size()), rows);
    S_.setFromTriplets(s.begin(), s.end());
  }

  int size() const { return nw_; }
  int constraint_count() const { return static_cast<int>(rows_.size()); }

  Eigen::VectorXd to_w(const BetaParams& beta) const {
    const Eigen::VectorXd v = beta.pack();
    Eigen::VectorXd w(nw_);
    std::vector<bool> set(nw_, false);
    for (int i = 0; i < N_; ++i) {
      if (col_[i] < 0 || set[col_[i]]) continue;
      double z = v[i];
      if (is_diag_[i]) {
        const double y = v[i] - opt_.diag_floor;
        if (!(y > 0.0)) throw DomainError("solver: Cholesky diagonal at or below the floor");
        z = softplus_inv(y);
      }
      w[col_[i]] = z;
      set[col_[i]] = true;
    }
    return w;
  }

  BetaParams to_beta(const Eigen::VectorXd& w) const {
    BetaParams b = templ_;
    b.unpack(packed(w));
    return b;
  }

  struct Point {
    BetaParams beta;
    bool finite = false;
    double f = std::numeric_limits<double>::infinity();  // −L̂
    Eigen::VectorXd c;                                    // kept rows
    ElboBreakdown elbo;
  };

  Point evaluate(const Eigen::VectorXd& w) const {
    Point p;
    p.beta = to_beta(w);
    try {
      p.elbo = elbo(p.beta, model_, data_, scheme_, opt_.threads);
      p.c = S_ * constraints(p.beta).stacked();
      p.f = -p.elbo.total;
      p.finite = std::isfinite(p.f) && p.c.allFinite();
    } catch (const NumericalError&) {
      p.finite = false;
    } catch (const DomainError&) {
      p.finite = false;
    }
    return p;
  }

  struct Derivs {
    Eigen::VectorXd g;  // ∇f in w
    SpMat H;            // ∇²f + Σ y_i ∇²c_i in w (y supplied by the caller), plus penalty term if requested
    SpMat J;            // ∂c/∂w, kept rows
    bool ok = false;
    std::string error;
  };

  /// Derivatives at a point. `y` weights the constraint curvature (length = kept rows);
  /// `rho` > 0 adds ρ JᵀJ.
  Derivs derivatives(const Eigen::VectorXd& w, const Point& pt, const Eigen::VectorXd& y, double rho) const {
    Derivs out;
    const auto& b = pt.beta;
    const int T = b.T(), p = b.layout().size(), ne = static_cast<int>(b.eta.size());
    ElboDerivatives d;
    try {
      d = vissm::derivatives(b, model_, data_, scheme_, opt_.hessian, opt_.threads);
    } catch (const NumericalError& e) {
      out.error = e.what();
      return out;
    } catch (const DomainError& e) {
      out.error = e.what();
      return out;
    }
    const Eigen::VectorXd zfull = E_ * w;
    Eigen::VectorXd dz = Eigen::VectorXd::Ones(N_), d2z = Eigen::VectorXd::Zero(N_);
    for (int i = 0; i < N_; ++i) {
      if (!is_diag_[i]) continue;
      const double s = sigmoid(zfull[i]);
      dz[i] = s;
      d2z[i] = s * (1.0 - s);
    }
    Eigen::VectorXd gb = -d.gradient;
    SpMat Hb = assemble_hessian(d, T, p, ne);
    Hb = -Hb;
    const Eigen::VectorXd yfull = S_.transpose() * y;
    const auto cb = constraint_hessian_blocks(b, yfull);
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < T; ++k)
      for (int j = 0; j < p; ++j)
        for (int i = 0; i < p; ++i)
          if (cb[k](i, j) != 0.0) t.emplace_back(k * p + i, k * p + j, cb[k](i, j));
    SpMat Hc(N_, N_);
    Hc.setFromTriplets(t.begin(), t.end());
    const SpMat Jb = S_ * constraint_jacobian(b);
    SpMat H = Hb + Hc;
    if (rho > 0.0) H += rho * SpMat(Jb.transpose() * Jb);
    Eigen::VectorXd gfull = gb + Eigen::VectorXd(Jb.transpose() * y);
    if (!derived_.empty()) {
      chain_derived(pt.beta.pack(), gfull, H);
      gb = gfull;  // no constraint rows are kept
    }
    // Chain rule through the diagonal bijection.
    SpMat Hz = dz.asDiagonal() * H * dz.asDiagonal();
    std::vector<Eigen::Triplet<double>> dt;
    for (int i = 0; i < N_; ++i)
      if (d2z[i] != 0.0) dt.emplace_back(i, i, gfull[i] * d2z[i]);
    SpMat Dg(N_, N_);
    Dg.setFromTriplets(dt.begin(), dt.end());
    Hz += Dg;
    const SpMat Et = E_.transpose();
    out.H = Et * Hz * E_;
    out.J = SpMat(Jb * dz.asDiagonal()) * E_;
    // Plain objective gradient (no multiplier or penalty terms).
    out.g = Et * dz.cwiseProduct(gb);
    out.ok = out.g.allFinite();
    if (!out.ok) out.error = "non-finite gradient";
    return out;
  }

  int full_constraint_rows() const { return full_rows_; }

 private:
  Eigen::VectorXd packed(const Eigen::VectorXd& w) const {
    Eigen::VectorXd v(N_);
    for (int i = 0; i < N_; ++i) {
      if (col_[i] < 0) {
        v[i] = 0.0;
        continue;
      }
      const double z = w[col_[i]];
      v[i] = is_diag_[i] ? opt_.diag_floor + softplus(z) : z;
    }
    for (const auto& d : links_) {
      std::vector<double> x(d.in.size());
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = v[d.in[i]];
      const auto R = overlap_factor(x, templ_.nx);
      for (std::size_t i = 0; i < R.size(); ++i) v[d.out[i]] = R[i];
    }
    return v;
  }

  // D of pair k is a function of (E, F) of pair k − 1.
  struct Link {
    std::vector<int> in;   // packed indices of E, upper(F) of pair k − 1
    std::vector<int> out;  // packed indices of upper(D) of pair k
  };

  void setup_derived(const BetaParams& b) {
    const auto L = b.layout();
    const int nt = b.ntheta, nx = b.nx;
    derived_.assign(N_, false);
    for (int k = 1; k < b.T(); ++k) {
      Link d;
      const int o0 = b.pair_offset(k - 1), o1 = b.pair_offset(k);
      for (int r = 0; r < nx; ++r)
        for (int c = 0; c < nx; ++c) d.in.push_back(o0 + L.chol_index(nt + r, nt + nx + c));
      for (int r = 0; r < nx; ++r)
        for (int c = r; c < nx; ++c) d.in.push_back(o0 + L.chol_index(nt + nx + r, nt + nx + c));
      for (int r = 0; r < nx; ++r)
        for (int c = r; c < nx; ++c) {
          const int i = o1 + L.chol_index(nt + r, nt + c);
          d.out.push_back(i);
          derived_[i] = true;
          is_diag_[i] = false;
        }
      links_.push_back(std::move(d));
    }
  }

  // Replaces g, H (with respect to β) by their values with respect to the free entries.
  void chain_derived(const Eigen::VectorXd& v, Eigen::VectorXd& g, SpMat& H) const {
    const int nx = templ_.nx;
    std::vector<Eigen::Triplet<double>> pt, ht;
    for (int i = 0; i < N_; ++i)
      if (!derived_[i]) pt.emplace_back(i, i, 1.0);
    for (const auto& d : links_) {
      const auto m = static_cast<Eigen::Index>(d.in.size());
      std::vector<ad::Dual2> x(d.in.size());
      for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = ad::Dual2::variable(v[d.in[i]], static_cast<Eigen::Index>(i), m);
      const auto R = overlap_factor(x, nx);
      Eigen::MatrixXd curv = Eigen::MatrixXd::Zero(m, m);
      for (std::size_t o = 0; o < R.size(); ++o) {
        const Eigen::VectorXd gr = R[o].gradient(m);
        for (Eigen::Index i = 0; i < m; ++i)
          if (gr[i] != 0.0) pt.emplace_back(d.out[o], d.in[static_cast<std::size_t>(i)], gr[i]);
        curv += g[d.out[o]] * R[o].hessian(m);
      }
      for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < m; ++i)
          if (curv(i, j) != 0.0)
            ht.emplace_back(d.in[static_cast<std::size_t>(i)], d.in[static_cast<std::size_t>(j)], curv(i, j));
    }
    SpMat P(N_, N_), C(N_, N_);
    P.setFromTriplets(pt.begin(), pt.end());
    C.setFromTriplets(ht.begin(), ht.end());
    const SpMat Pt = P.transpose();
    g = Pt * g;
    H = SpMat(Pt * H * P) + C;
  }

  const Model& model_;
  const Dataset& data_;
  SchemeConfig scheme_;
  SolverOptions opt_;
  BetaParams templ_;
  int N_ = 0, nw_ = 0, full_rows_ = 0;
  std::vector<bool> is_diag_;
  std::vector<int> col_;
  std::vector<int> rows_;
  std::vector<bool> derived_;
  std::vector<Link> links_;
  SpMat E_, S_;
};

inline constexpr double kMaxRadius = 1e3;

inline double inf_norm(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

/// Merit differences this small are below the resolution of the merit itself.
inline double roundoff(double merit) { return 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(merit)); }

/// Levenberg damping is σ times the largest Hessian diagonal on every coordinate.
inline Eigen::VectorXd damping_scale(const SpMat& H) {
  const double m = H.rows() ? H.diagonal().cwiseAbs().maxCoeff() : 1.0;
  return Eigen::VectorXd::Constant(H.rows(), std::max(1e-12, m));
}

inline SpMat add_diag(const SpMat& H, const Eigen::VectorXd& d) {
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index i = 0; i < d.size(); ++i) t.emplace_back(static_cast<int>(i), static_cast<int>(i), d[i]);
  SpMat D(H.rows(), H.cols());
  D.setFromTriplets(t.begin(), t.end());
  return H + D;
}

inline Eigen::VectorXd least_squares_multipliers(const Eigen::VectorXd& g, const SpMat& J) {
  if (J.rows() == 0) return {};
  SpMat JJ = J * SpMat(J.transpose());
  JJ = add_diag(JJ, Eigen::VectorXd::Constant(J.rows(), 1e-12));
  Eigen::SimplicialLDLT<SpMat> ldlt(JJ);
  if (ldlt.info() != Eigen::Success) return Eigen::VectorXd::Zero(J.rows());
  const Eigen::VectorXd rhs = -(J * g);
  Eigen::VectorXd y = ldlt.solve(rhs);
  if (!y.allFinite()) y.setZero();
  return y;
}

}  // namespace detail

struct SolveResult {
  BetaParams beta;
  SolveReport report;
};

namespace detail {

inline SolveResult solve_al(const Problem& prob, Eigen::VectorXd w, const SolverOptions& opt) {
  SolveResult res;
  auto& rep = res.report;
  const int m = prob.constraint_count();
  auto pt = prob.evaluate(w);
  if (!pt.finite) {
    rep.status = SolveStatus::NumericalFailure;
    rep.message = "objective is -inf or undefined at the starting point" +
                  (pt.elbo.diagnostic.empty() ? std::string() : ": " + pt.elbo.diagnostic);
    res.beta = pt.beta;
    rep.elbo = pt.elbo;
    return res;
  }
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(m);
  double rho = opt.penalty_init;
  if (opt.multipliers == MultiplierInit::LeastSquares) {
    const auto d0 = prob.derivatives(w, pt, lambda, 0.0);
    if (d0.ok) lambda = least_squares_multipliers(d0.g, d0.J);
  }
  auto merit = [&](const Problem::Point& p) { return p.f + lambda.dot(p.c) + 0.5 * rho * p.c.squaredNorm(); };
  double omega = std::max(opt.tol_grad, 1e-2);
  double c_prev = std::numeric_limits<double>::infinity();
  double radius = 1.0;
  bool failed = false;

  for (int outer = 1; outer <= opt.max_outer && !failed; ++outer) {
    rep.outer_iterations = outer;
    const double tol_inner = c_prev <= opt.tol_constraint ? opt.tol_grad : omega;
    double sigma = 1e-8;
    int inner = 0;
    double grad_phi = std::numeric_limits<double>::infinity();
    std::optional<Problem::Derivs> cached;
    while (true) {
      auto d = cached ? std::move(*cached) : prob.derivatives(w, pt, lambda + rho * pt.c, rho);
      cached.reset();
      if (!d.ok) {
        failed = true;
        rep.message = "derivatives failed: " + d.error;
        break;
      }
      const Eigen::VectorXd g = d.g + Eigen::VectorXd(d.J.transpose() * (lambda + rho * pt.c));
      grad_phi = inf_norm(g);
      if (opt.verbosity >= 2)
        std::fprintf(stderr, "  inner %4d  merit %.10e  |grad| %.3e  damping %.1e  radius %.1e\n", inner, merit(pt), grad_phi,
                     sigma, radius);
      if (grad_phi <= tol_inner || inner >= opt.max_inner) break;
      ++inner;
      ++rep.iterations;
      const Eigen::VectorXd scale = damping_scale(d.H);
      const double phi0 = merit(pt);
      double phi1 = phi0;
      Eigen::VectorXd wt;
      Problem::Point trial;
      bool accepted = false;
      while (!accepted) {
        Eigen::SimplicialLLT<SpMat> llt(add_diag(d.H, sigma * scale));
        if (llt.info() != Eigen::Success) {
          sigma = std::max(10.0 * sigma, 1e-8);
          if (sigma > 1e30) break;
          continue;
        }
        Eigen::VectorXd s = llt.solve(-g);
        if (!s.allFinite()) {
          sigma = std::max(10.0 * sigma, 1e-8);
          if (sigma > 1e30) break;
          continue;
        }
        // Trust region in the max norm: the damping grows until the step fits.
        const double slen = inf_norm(s);
        if (slen > radius) {
          sigma = std::max(sigma * std::max(2.0, 1.5 * slen / radius), 1e-8);
          if (sigma > 1e30) break;
          continue;
        }
        if (slen < 1e-14) break;
        const double pred = -(g.dot(s) + 0.5 * s.dot(d.H * s));
        wt = w + s;
        trial = prob.evaluate(wt);
        phi1 = trial.finite ? merit(trial) : std::numeric_limits<double>::infinity();
        const double eps = roundoff(phi0);
        if (trial.finite && pred > eps && phi1 <= phi0) {
          const double ratio = (phi0 - phi1) / pred;
          if (ratio > 1e-4) {
            accepted = true;
            if (ratio > 0.75) {
              sigma = std::max(sigma / 10.0, 1e-12);
              if (slen >= 0.5 * radius) radius = std::min(2.0 * radius, kMaxRadius);
            } else if (ratio < 0.25) {
              sigma *= 4.0;
              radius = std::max(0.25 * slen, 1e-14);
            }
          }
        } else if (trial.finite && pred <= eps && phi1 <= phi0 + eps) {
          // Below merit resolution: accept a step that reduces the gradient.
          auto dt = prob.derivatives(wt, trial, lambda + rho * trial.c, rho);
          if (dt.ok) {
            const Eigen::VectorXd gt = dt.g + Eigen::VectorXd(dt.J.transpose() * (lambda + rho * trial.c));
            if (inf_norm(gt) < grad_phi) {
              accepted = true;
              cached = std::move(dt);
            }
          }
        }
        if (!accepted) radius = std::max(0.25 * slen, 1e-14);
        if (accepted) {
          rep.merit.push_back({outer, phi0, phi1});
          w = wt;
          pt = std::move(trial);
        } else {
          sigma = std::max(4.0 * sigma, 1e-8);
          if (sigma > 1e30) break;
        }
      }
      if (!accepted) {
        if (grad_phi <= opt.tol_grad) break;
        failed = true;
        rep.message = "inner solver stalled (step below 1e-14) at outer iteration " + std::to_string(outer);
        break;
      }
    }
    const double cnorm = inf_norm(pt.c);
    lambda += rho * pt.c;
    rep.lagrangian_gradient = grad_phi;
    rep.constraint_residual = cnorm;
    rep.trace.push_back({outer, pt.elbo.total, cnorm, rho, inner});
    if (opt.verbosity >= 1)
      std::fprintf(stderr, "outer %3d  elbo %.10e  |c| %.3e  |grad| %.3e  penalty %.1e  inner %d\n", outer, pt.elbo.total,
                   cnorm, grad_phi, rho, inner);
    if (failed) break;
    if (cnorm <= opt.tol_constraint && grad_phi <= opt.tol_grad) {
      rep.status = SolveStatus::Converged;
      break;
    }
    if (cnorm > 0.1 * c_prev) rho = std::min(rho * opt.penalty_growth, 1e12);
    c_prev = std::min(c_prev, cnorm);
    omega = std::max(opt.tol_grad, 0.1 * omega);
  }
  if (failed) rep.status = SolveStatus::NumericalFailure;
  rep.penalty = rho;
  res.beta = pt.beta;
  rep.elbo = pt.elbo;
  return res;
}

inline SolveResult solve_sqp(const Problem& prob, Eigen::VectorXd w, const SolverOptions& opt) {
  SolveResult res;
  auto& rep = res.report;
  const int m = prob.constraint_count();
  auto pt = prob.evaluate(w);
  if (!pt.finite) {
    rep.status = SolveStatus::NumericalFailure;
    rep.message = "objective is -inf or undefined at the starting point";
    res.beta = pt.beta;
    rep.elbo = pt.elbo;
    return res;
  }
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(m);
  if (opt.multipliers == MultiplierInit::LeastSquares) {
    const auto d0 = prob.derivatives(w, pt, lambda, 0.0);
    if (d0.ok) lambda = least_squares_multipliers(d0.g, d0.J);
  }
  double nu = 1.0;
  const int iters = opt.max_outer * opt.max_inner;
  bool failed = false;
  for (int it = 1; it <= iters; ++it) {
    auto d = prob.derivatives(w, pt, lambda, 0.0);
    if (!d.ok) {
      failed = true;
      rep.message = "derivatives failed: " + d.error;
      break;
    }
    const Eigen::VectorXd gl = d.g + Eigen::VectorXd(d.J.transpose() * lambda);
    rep.lagrangian_gradient = inf_norm(gl);
    rep.constraint_residual = inf_norm(pt.c);
    rep.outer_iterations = it;
    rep.trace.push_back({it, pt.elbo.total, rep.constraint_residual, nu, 1});
    if (rep.lagrangian_gradient <= opt.tol_grad && rep.constraint_residual <= opt.tol_constraint) {
      rep.status = SolveStatus::Converged;
      break;
    }
    ++rep.iterations;
    const int n = prob.size();
    const Eigen::VectorXd scale = damping_scale(d.H);
    double delta = 0.0;
    SpMat Hm = d.H;
    for (int tries = 0;; ++tries) {
      Eigen::SimplicialLLT<SpMat> llt(Hm);
      if (llt.info() == Eigen::Success) break;
      delta = std::max(10.0 * delta, 1e-8);
      Hm = add_diag(d.H, delta * scale);
      if (tries > 40) {
        failed = true;
        break;
      }
    }
    if (failed) {
      rep.message = "could not regularize the Hessian";
      break;
    }
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < Hm.outerSize(); ++k)
      for (SpMat::InnerIterator i(Hm, k); i; ++i) t.emplace_back(static_cast<int>(i.row()), static_cast<int>(i.col()), i.value());
    for (int k = 0; k < d.J.outerSize(); ++k)
      for (SpMat::InnerIterator i(d.J, k); i; ++i) {
        t.emplace_back(n + static_cast<int>(i.row()), static_cast<int>(i.col()), i.value());
        t.emplace_back(static_cast<int>(i.col()), n + static_cast<int>(i.row()), i.value());
      }
    SpMat K(n + m, n + m);
    K.setFromTriplets(t.begin(), t.end());
    Eigen::VectorXd rhs(n + m);
    rhs << -d.g, -pt.c;
    Eigen::SparseLU<SpMat> lu;
    lu.compute(K);
    if (lu.info() != Eigen::Success) {
      failed = true;
      rep.message = "KKT factorization failed";
      break;
    }
    const Eigen::VectorXd sol = lu.solve(rhs);
    if (!sol.allFinite()) {
      failed = true;
      rep.message = "KKT solve produced non-finite values";
      break;
    }
    const Eigen::VectorXd s = sol.head(n);
    const Eigen::VectorXd lnew = sol.tail(m);
    if (inf_norm(s) < 1e-14) {
      lambda = lnew;
      continue;
    }
    nu = std::max(nu, 2.0 * inf_norm(lnew));
    auto merit = [&](const Problem::Point& p) { return p.f + nu * p.c.lpNorm<1>(); };
    const double m0 = merit(pt);
    const double dd = d.g.dot(s) - nu * pt.c.lpNorm<1>();
    double step = 1.0;
    bool accepted = false;
    while (step > 1e-12) {
      const Eigen::VectorXd wt = w + step * s;
      auto trial = prob.evaluate(wt);
      if (trial.finite) {
        const double m1 = merit(trial);
        if (m1 <= m0 + 1e-4 * step * std::min(dd, 0.0) ||
            (std::abs(dd) <= roundoff(m0) && m1 <= m0 + roundoff(m0))) {
          rep.merit.push_back({it, m0, m1});
          w = wt;
          pt = std::move(trial);
          lambda += step * (lnew - lambda);
          accepted = true;
          break;
        }
      }
      step *= 0.5;
    }
    if (!accepted) {
      failed = true;
      rep.message = "line search failed (step below 1e-12)";
      break;
    }
  }
  if (failed) rep.status = SolveStatus::NumericalFailure;
  rep.penalty = nu;
  res.beta = pt.beta;
  rep.elbo = pt.elbo;
  return res;
}

}  // namespace detail

/// Maximizes L̂ over the feasible set, starting at beta0.
inline SolveResult solve(const Model& model, const Dataset& data, const SchemeConfig& scheme,
                         const SolverOptions& opt, const BetaParams& beta0) {
  opt.validate();
  beta0.validate();
  if (beta0.T() != data.T()) throw ConfigError("solve: beta0 does not match the data length");
  if (data.T() == 0) {
    const auto g = model.gaussian_prior();
    if (!g) throw UnsupportedError("solve: T = 0 is only supported for Gaussian priors");
    SolveResult res;
    res.beta = beta0;
    res.beta.head = GaussianFactor{g->mean, upper_cholesky(g->cov, "prior covariance")};
    res.report.elbo = elbo(res.beta, model, data, scheme);
    res.report.status = SolveStatus::Converged;
    res.report.constraint_residual = 0.0;
    res.report.lagrangian_gradient = 0.0;
    return res;
  }
  const detail::Problem prob(model, data, scheme, opt, beta0);
  const Eigen::VectorXd w0 = prob.to_w(beta0);
  auto res = opt.method == SolverMethod::Sqp ? detail::solve_sqp(prob, w0, opt) : detail::solve_al(prob, w0, opt);
  res.report.constraint_residual = constraints(res.beta).max_abs();
  if (res.report.status == SolveStatus::Converged &&
      (res.report.constraint_residual > opt.tol_constraint || res.report.lagrangian_gradient > opt.tol_grad))
    res.report.status = SolveStatus::MaxIter;
  return res;
}

}  // namespace vissm
