#pragma once

// Forward-mode automatic differentiation.
//
// Dual carries a value and a gradient; Dual2 additionally carries the Hessian.
// Both use an empty gradient (and Hessian) to denote an exact constant, so
// mixing seeded variables with literals does not allocate.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace vissm::ad {

struct Dual {
  double v = 0.0;
  Eigen::VectorXd g;

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit constants are intended
  Dual(double value, Eigen::VectorXd grad) : v(value), g(std::move(grad)) {}

  static Dual variable(double value, Eigen::Index index, Eigen::Index size) {
    Dual d(value, Eigen::VectorXd::Zero(size));
    d.g[index] = 1.0;
    return d;
  }

  Eigen::VectorXd gradient(Eigen::Index size) const {
    return g.size() == 0 ? Eigen::VectorXd::Zero(size) : g;
  }
};

struct Dual2 {
  double v = 0.0;
  Eigen::VectorXd g;
  Eigen::MatrixXd h;

  Dual2() = default;
  Dual2(double value) : v(value) {}  // NOLINT
  Dual2(double value, Eigen::VectorXd grad, Eigen::MatrixXd hess)
      : v(value), g(std::move(grad)), h(std::move(hess)) {}

  static Dual2 variable(double value, Eigen::Index index, Eigen::Index size) {
    Dual2 d(value, Eigen::VectorXd::Zero(size), Eigen::MatrixXd::Zero(size, size));
    d.g[index] = 1.0;
    return d;
  }

  Eigen::VectorXd gradient(Eigen::Index size) const {
    return g.size() == 0 ? Eigen::VectorXd::Zero(size) : g;
  }
  Eigen::MatrixXd hessian(Eigen::Index size) const {
    return h.size() == 0 ? Eigen::MatrixXd::Zero(size, size) : h;
  }
};

inline double value(double x) { return x; }
inline double value(const Dual& x) { return x.v; }
inline double value(const Dual2& x) { return x.v; }

template <class S>
inline constexpr bool is_ad_v = std::is_same_v<S, Dual> || std::is_same_v<S, Dual2>;

namespace detail {

inline Eigen::VectorXd sum(const Eigen::VectorXd& a, double sa, const Eigen::VectorXd& b, double sb) {
  if (a.size() == 0) return b.size() == 0 ? Eigen::VectorXd() : Eigen::VectorXd(sb * b);
  if (b.size() == 0) return sa * a;
  return sa * a + sb * b;
}

inline Eigen::MatrixXd sum(const Eigen::MatrixXd& a, double sa, const Eigen::MatrixXd& b, double sb) {
  if (a.size() == 0) return b.size() == 0 ? Eigen::MatrixXd() : Eigen::MatrixXd(sb * b);
  if (b.size() == 0) return sa * a;
  return sa * a + sb * b;
}

inline Eigen::VectorXd scaled(const Eigen::VectorXd& a, double s) {
  return a.size() == 0 ? Eigen::VectorXd() : Eigen::VectorXd(s * a);
}

// f(a) given f, f', f''.
inline Dual chain(const Dual& a, double f, double df, double /*d2f*/) { return Dual(f, scaled(a.g, df)); }

inline Dual2 chain(const Dual2& a, double f, double df, double d2f) {
  if (a.g.size() == 0) return Dual2(f);
  Eigen::MatrixXd h = d2f * a.g * a.g.transpose();
  if (a.h.size() != 0) h += df * a.h;
  return Dual2(f, df * a.g, std::move(h));
}

}  // namespace detail

// ---- Dual arithmetic ------------------------------------------------------

inline Dual operator+(const Dual& a, const Dual& b) { return {a.v + b.v, detail::sum(a.g, 1.0, b.g, 1.0)}; }
inline Dual operator-(const Dual& a, const Dual& b) { return {a.v - b.v, detail::sum(a.g, 1.0, b.g, -1.0)}; }
inline Dual operator-(const Dual& a) { return {-a.v, detail::scaled(a.g, -1.0)}; }
inline Dual operator*(const Dual& a, const Dual& b) { return {a.v * b.v, detail::sum(a.g, b.v, b.g, a.v)}; }
inline Dual operator/(const Dual& a, const Dual& b) {
  const double q = a.v / b.v;
  return {q, detail::sum(a.g, 1.0 / b.v, b.g, -q / b.v)};
}
inline Dual operator+(const Dual& a, double b) { return {a.v + b, a.g}; }
inline Dual operator+(double a, const Dual& b) { return {a + b.v, b.g}; }
inline Dual operator-(const Dual& a, double b) { return {a.v - b, a.g}; }
inline Dual operator-(double a, const Dual& b) { return {a - b.v, detail::scaled(b.g, -1.0)}; }
inline Dual operator*(const Dual& a, double b) { return {a.v * b, detail::scaled(a.g, b)}; }
inline Dual operator*(double a, const Dual& b) { return {a * b.v, detail::scaled(b.g, a)}; }
inline Dual operator/(const Dual& a, double b) { return {a.v / b, detail::scaled(a.g, 1.0 / b)}; }
inline Dual operator/(double a, const Dual& b) {
  const double q = a / b.v;
  return {q, detail::scaled(b.g, -q / b.v)};
}

// ---- Dual2 arithmetic -----------------------------------------------------

inline Dual2 operator+(const Dual2& a, const Dual2& b) {
  return {a.v + b.v, detail::sum(a.g, 1.0, b.g, 1.0), detail::sum(a.h, 1.0, b.h, 1.0)};
}
inline Dual2 operator-(const Dual2& a, const Dual2& b) {
  return {a.v - b.v, detail::sum(a.g, 1.0, b.g, -1.0), detail::sum(a.h, 1.0, b.h, -1.0)};
}
inline Dual2 operator-(const Dual2& a) {
  return {-a.v, detail::scaled(a.g, -1.0), a.h.size() == 0 ? Eigen::MatrixXd() : Eigen::MatrixXd(-a.h)};
}
inline Dual2 operator*(const Dual2& a, const Dual2& b) {
  Eigen::MatrixXd h = detail::sum(a.h, b.v, b.h, a.v);
  if (a.g.size() != 0 && b.g.size() != 0) {
    Eigen::MatrixXd outer = a.g * b.g.transpose();
    if (h.size() == 0) h = Eigen::MatrixXd::Zero(a.g.size(), a.g.size());
    h += outer + outer.transpose();
  }
  return {a.v * b.v, detail::sum(a.g, b.v, b.g, a.v), std::move(h)};
}
inline Dual2 operator*(const Dual2& a, double b) {
  return {a.v * b, detail::scaled(a.g, b), a.h.size() == 0 ? Eigen::MatrixXd() : Eigen::MatrixXd(b * a.h)};
}
inline Dual2 operator*(double a, const Dual2& b) { return b * a; }
inline Dual2 operator+(const Dual2& a, double b) { return {a.v + b, a.g, a.h}; }
inline Dual2 operator+(double a, const Dual2& b) { return {a + b.v, b.g, b.h}; }
inline Dual2 operator-(const Dual2& a, double b) { return {a.v - b, a.g, a.h}; }
inline Dual2 operator-(double a, const Dual2& b) { return a + (-b); }
inline Dual2 operator/(const Dual2& a, double b) { return a * (1.0 / b); }
inline Dual2 operator/(double a, const Dual2& b) {
  const double inv = 1.0 / b.v;
  return detail::chain(b, a * inv, -a * inv * inv, 2.0 * a * inv * inv * inv);
}
inline Dual2 operator/(const Dual2& a, const Dual2& b) { return a * (1.0 / b); }

// ---- compound assignment --------------------------------------------------

template <class S, class T>
  requires is_ad_v<S>
inline S& operator+=(S& a, const T& b) { return a = a + b; }
template <class S, class T>
  requires is_ad_v<S>
inline S& operator-=(S& a, const T& b) { return a = a - b; }
template <class S, class T>
  requires is_ad_v<S>
inline S& operator*=(S& a, const T& b) { return a = a * b; }
template <class S, class T>
  requires is_ad_v<S>
inline S& operator/=(S& a, const T& b) { return a = a / b; }

// ---- comparisons act on values ---------------------------------------------

template <class S>
  requires is_ad_v<S>
inline bool operator<(const S& a, double b) { return a.v < b; }
template <class S>
  requires is_ad_v<S>
inline bool operator>(const S& a, double b) { return a.v > b; }
template <class S>
  requires is_ad_v<S>
inline bool operator<=(const S& a, double b) { return a.v <= b; }
template <class S>
  requires is_ad_v<S>
inline bool operator>=(const S& a, double b) { return a.v >= b; }

// ---- elementary functions -------------------------------------------------

template <class S>
  requires is_ad_v<S>
inline S exp(const S& a) {
  const double e = std::exp(a.v);
  return detail::chain(a, e, e, e);
}

template <class S>
  requires is_ad_v<S>
inline S log(const S& a) {
  if (a.v < 0.0) return detail::chain(a, std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0);
  return detail::chain(a, std::log(a.v), 1.0 / a.v, -1.0 / (a.v * a.v));
}

template <class S>
  requires is_ad_v<S>
inline S log1p(const S& a) {
  const double d = 1.0 / (1.0 + a.v);
  return detail::chain(a, std::log1p(a.v), d, -d * d);
}

template <class S>
  requires is_ad_v<S>
inline S sqrt(const S& a) {
  const double r = std::sqrt(a.v);
  return detail::chain(a, r, 0.5 / r, -0.25 / (r * a.v));
}

template <class S>
  requires is_ad_v<S>
inline S sin(const S& a) {
  const double s = std::sin(a.v), c = std::cos(a.v);
  return detail::chain(a, s, c, -s);
}

template <class S>
  requires is_ad_v<S>
inline S cos(const S& a) {
  const double s = std::sin(a.v), c = std::cos(a.v);
  return detail::chain(a, c, -s, -c);
}

template <class S>
  requires is_ad_v<S>
inline S tanh(const S& a) {
  const double t = std::tanh(a.v);
  const double d = 1.0 - t * t;
  return detail::chain(a, t, d, -2.0 * t * d);
}

template <class S>
  requires is_ad_v<S>
inline S pow(const S& a, double p) {
  const double f = std::pow(a.v, p);
  return detail::chain(a, f, p * std::pow(a.v, p - 1.0), p * (p - 1.0) * std::pow(a.v, p - 2.0));
}

template <class S>
inline S square(const S& a) {
  return a * a;
}

template <class S>
  requires is_ad_v<S>
inline bool isfinite(const S& a) {
  return std::isfinite(a.v);
}

/// Seed `values` as independent variables value[i] with gradient e_{offset+i} in R^size.
template <class S>
std::vector<S> seed(std::span<const double> values, Eigen::Index offset, Eigen::Index size) {
  std::vector<S> out;
  out.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out.push_back(S::variable(values[i], offset + static_cast<Eigen::Index>(i), size));
  }
  return out;
}

}  // namespace vissm::ad
