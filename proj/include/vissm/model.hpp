#pragma once

// State-space model abstraction.
//
// A model supplies log p(x_{k+1}, y_k | x_k, θ, η, u_k) and log p(θ, x_1) for
// double, Dual and Dual2 scalars. Concrete models derive from ModelBase and
// write each density once as a template; ModelBase produces the virtual
// overloads.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vissm/ad.hpp"
#include "vissm/error.hpp"

namespace vissm {

using Rng = std::mt19937_64;

struct ModelDims {
  int nx = 1;
  int ny = 1;
  int nu = 0;
  int ntheta = 0;
  int neta = 0;

  /// Dimension of one pairwise joint (θ, x_k, x_{k+1}).
  int pair_dim() const { return ntheta + 2 * nx; }
};

template <class S>
struct StepArgs {
  std::span<const S> x_next;
  std::span<const double> y;
  std::span<const S> x;
  std::span<const S> theta;
  std::span<const S> eta;
  std::span<const double> u;
  int k = 0;
};

template <class S>
struct PriorArgs {
  std::span<const S> theta;
  std::span<const S> x1;
};

struct GaussianMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct StepDraw {
  Eigen::VectorXd x_next;
  Eigen::VectorXd y;
};

/// Measurements y_{1:T} with optional inputs u_{1:T}.
struct Dataset {
  std::vector<Eigen::VectorXd> y;
  std::vector<Eigen::VectorXd> u;
  std::optional<std::uint64_t> seed;

  int T() const { return static_cast<int>(y.size()); }

  std::span<const double> y_at(int k) const { return {y[k].data(), static_cast<std::size_t>(y[k].size())}; }
  std::span<const double> u_at(int k) const {
    if (u.empty()) return {};
    return {u[k].data(), static_cast<std::size_t>(u[k].size())};
  }
};

class Model {
 public:
  virtual ~Model() = default;

  virtual std::string name() const = 0;
  const ModelDims& dims() const { return dims_; }

  virtual double joint_logpdf(const StepArgs<double>& a) const = 0;
  virtual ad::Dual joint_logpdf(const StepArgs<ad::Dual>& a) const = 0;
  virtual ad::Dual2 joint_logpdf(const StepArgs<ad::Dual2>& a) const = 0;

  /// log p(x_1, θ).
  virtual double prior_logpdf(const PriorArgs<double>& a) const = 0;
  virtual ad::Dual prior_logpdf(const PriorArgs<ad::Dual>& a) const = 0;
  virtual ad::Dual2 prior_logpdf(const PriorArgs<ad::Dual2>& a) const = 0;

  /// Set when p(θ, x_1) is exactly Gaussian over the stacked (θ, x_1).
  virtual std::optional<GaussianMoments> gaussian_prior() const { return std::nullopt; }

  /// Mean and covariance of (θ, x_1) under the prior, exact or approximate.
  virtual GaussianMoments prior_moments() const = 0;

  /// Starting value of the point-estimated parameters η.
  virtual Eigen::VectorXd default_eta() const { return Eigen::VectorXd::Zero(dims_.neta); }

  /// Deterministic part of the transition: x_{k+1} with the noise set to zero.
  virtual Eigen::VectorXd predict(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, const Eigen::VectorXd& eta,
                                  std::span<const double> u, int k) const = 0;

  // Additive Gaussian noise form: [x_{k+1}; y_k] = g(x_k, θ, η, u_k) + e, e ~ N(0, Π(θ, η)).
  // residual() returns e; noise_chol() the row-major lower Cholesky factor of Π.
  virtual bool has_additive_noise() const { return false; }
  virtual std::vector<double> residual(const StepArgs<double>&) const { throw unsupported("residual"); }
  virtual std::vector<ad::Dual> residual(const StepArgs<ad::Dual>&) const { throw unsupported("residual"); }
  virtual std::vector<double> noise_chol(std::span<const double>, std::span<const double>) const {
    throw unsupported("noise_chol");
  }
  virtual std::vector<ad::Dual> noise_chol(std::span<const ad::Dual>, std::span<const ad::Dual>) const {
    throw unsupported("noise_chol");
  }
  virtual std::vector<ad::Dual2> noise_chol(std::span<const ad::Dual2>, std::span<const ad::Dual2>) const {
    throw unsupported("noise_chol");
  }

  // Ancestral sampling.
  virtual bool can_sample() const { return false; }
  /// Draws x_1 ~ p(x_1 | θ).
  virtual Eigen::VectorXd sample_initial(const Eigen::VectorXd& /*theta*/, const Eigen::VectorXd& /*eta*/,
                                         Rng& /*rng*/) const {
    throw unsupported("sampling");
  }
  /// Draws (x_{k+1}, y_k) ~ p(x_{k+1}, y_k | x_k, θ).
  virtual StepDraw sample_step(const Eigen::VectorXd& /*x*/, const Eigen::VectorXd& /*theta*/,
                               const Eigen::VectorXd& /*eta*/, std::span<const double> /*u*/, int /*k*/,
                               Rng& /*rng*/) const {
    throw unsupported("sampling");
  }

  // Factorization p(x_{k+1}, y_k | x_k) = p(y_k | x_k) p(x_{k+1} | x_k, y_k) used by particle methods.
  virtual bool supports_particle_filter() const { return false; }
  virtual double measurement_logpdf(std::span<const double> /*y*/, const Eigen::VectorXd& /*x*/,
                                    const Eigen::VectorXd& /*theta*/, const Eigen::VectorXd& /*eta*/,
                                    std::span<const double> /*u*/, int /*k*/) const {
    throw unsupported("particle filtering");
  }
  virtual double transition_logpdf(const Eigen::VectorXd& /*x_next*/, const Eigen::VectorXd& /*x*/,
                                   std::span<const double> /*y*/, const Eigen::VectorXd& /*theta*/,
                                   const Eigen::VectorXd& /*eta*/, std::span<const double> /*u*/,
                                   int /*k*/) const {
    throw unsupported("particle filtering");
  }
  virtual Eigen::VectorXd sample_transition(const Eigen::VectorXd& /*x*/, std::span<const double> /*y*/,
                                            const Eigen::VectorXd& /*theta*/, const Eigen::VectorXd& /*eta*/,
                                            std::span<const double> /*u*/, int /*k*/, Rng& /*rng*/) const {
    throw unsupported("particle filtering");
  }
  /// Upper bound of log p(x_{k+1} | x_k, y_k) over all arguments, if one exists.
  virtual std::optional<double> transition_logpdf_bound(const Eigen::VectorXd& /*theta*/,
                                                        const Eigen::VectorXd& /*eta*/) const {
    return std::nullopt;
  }

 protected:
  UnsupportedError unsupported(const std::string& what) const {
    return UnsupportedError("model '" + name() + "' does not support " + what);
  }

  ModelDims dims_;
};

/// Generates the scalar-typed virtual overloads from templated members of Derived:
///   template <class S> S joint(const StepArgs<S>&) const;
///   template <class S> S prior(const PriorArgs<S>&) const;
/// and, for additive-noise models,
///   template <class S> std::vector<S> residual_t(const StepArgs<S>&) const;
///   template <class S> std::vector<S> noise_chol_t(std::span<const S>, std::span<const S>) const;
template <class Derived>
class ModelBase : public Model {
 public:
  double joint_logpdf(const StepArgs<double>& a) const override { return self().joint(a); }
  ad::Dual joint_logpdf(const StepArgs<ad::Dual>& a) const override { return self().joint(a); }
  ad::Dual2 joint_logpdf(const StepArgs<ad::Dual2>& a) const override { return self().joint(a); }

  double prior_logpdf(const PriorArgs<double>& a) const override { return self().prior(a); }
  ad::Dual prior_logpdf(const PriorArgs<ad::Dual>& a) const override { return self().prior(a); }
  ad::Dual2 prior_logpdf(const PriorArgs<ad::Dual2>& a) const override { return self().prior(a); }

  std::vector<double> residual(const StepArgs<double>& a) const override { return residual_impl(a); }
  std::vector<ad::Dual> residual(const StepArgs<ad::Dual>& a) const override { return residual_impl(a); }

  std::vector<double> noise_chol(std::span<const double> t, std::span<const double> e) const override {
    return noise_impl(t, e);
  }
  std::vector<ad::Dual> noise_chol(std::span<const ad::Dual> t, std::span<const ad::Dual> e) const override {
    return noise_impl(t, e);
  }
  std::vector<ad::Dual2> noise_chol(std::span<const ad::Dual2> t, std::span<const ad::Dual2> e) const override {
    return noise_impl(t, e);
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }

  template <class S>
  std::vector<S> residual_impl(const StepArgs<S>& a) const {
    if constexpr (requires { self().template residual_t<S>(a); }) {
      return self().template residual_t<S>(a);
    } else {
      throw unsupported("residual");
    }
  }

  template <class S>
  std::vector<S> noise_impl(std::span<const S> t, std::span<const S> e) const {
    if constexpr (requires { self().template noise_chol_t<S>(t, e); }) {
      return self().template noise_chol_t<S>(t, e);
    } else {
      throw unsupported("noise_chol");
    }
  }
};

}  // namespace vissm
