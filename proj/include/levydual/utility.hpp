#pragma once

// Shortfall-type state-dependent utility U(v, w) = L(H) - L((H - v)^+),
// its convex conjugate and the capped generalized inverse of U'.
//
// Everything below is parametrized by the cap value H = H(w) of one state, so
// a path-level call is just a claim evaluation followed by a scalar call.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <utility>

#include "levydual/errors.hpp"
#include "levydual/market.hpp"

namespace levydual {

/// Convex increasing loss L with L(0) = 0.
class Loss {
 public:
  enum class Kind { kLinear, kQuadratic, kPower, kCustom };
  using Fn = std::function<double(double)>;

  static Loss linear() { return Loss(Kind::kLinear, 1.0, "linear"); }
  static Loss quadratic() { return Loss(Kind::kQuadratic, 2.0, "quadratic"); }
  static Loss power(double p) {
    if (!(p >= 1.0) || !std::isfinite(p)) throw ValidationError("loss power(p) needs p >= 1");
    if (p == 1.0) return linear();
    char buf[64];
    std::snprintf(buf, sizeof buf, "power(%.17g)", p);
    return Loss(Kind::kPower, p, buf);
  }
  /// value(x) and left derivative d(x) for x > 0; validated by a sampled secant test.
  static Loss custom(std::string name, Fn value, Fn derivative) {
    Loss l(Kind::kCustom, 0.0, std::move(name));
    l.value_ = std::move(value);
    l.derivative_ = std::move(derivative);
    l.validate();
    return l;
  }

  Kind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  double exponent() const { return p_; }

  double value(double x) const {
    switch (kind_) {
      case Kind::kLinear: return x;
      case Kind::kQuadratic: return x * x;
      case Kind::kPower: return std::pow(x, p_);
      case Kind::kCustom: return value_(x);
    }
    return 0.0;
  }

  /// Left derivative L'(x-) for x > 0 (right derivative at 0).
  double derivative(double x) const {
    switch (kind_) {
      case Kind::kLinear: return 1.0;
      case Kind::kQuadratic: return 2.0 * x;
      case Kind::kPower: return p_ * std::pow(x, p_ - 1.0);
      case Kind::kCustom: return derivative_(x);
    }
    return 0.0;
  }

  /// min(x*(y), cap) with x*(y) = inf{x >= 0 : L'(x) >= y}.
  double threshold(double y, double cap) const {
    if (cap <= 0.0) return 0.0;
    switch (kind_) {
      case Kind::kLinear: return y <= 1.0 ? 0.0 : cap;
      case Kind::kQuadratic: return std::min(0.5 * y, cap);
      case Kind::kPower: return std::min(std::pow(y / p_, 1.0 / (p_ - 1.0)), cap);
      case Kind::kCustom: break;
    }
    return threshold_by_bisection(y, cap);
  }

  /// Bisection route for threshold(); public so tests can cross-check closed forms.
  double threshold_by_bisection(double y, double cap) const {
    if (cap <= 0.0 || derivative(0.0) >= y) return 0.0;
    if (derivative(cap) < y) return cap;
    double lo = 0.0, hi = cap;  // L'(lo) < y <= L'(hi)
    const double tol = 1e-12 * std::max(cap, 1.0);
    while (hi - lo > tol) {
      const double mid = 0.5 * (lo + hi);
      if (derivative(mid) >= y)
        hi = mid;
      else
        lo = mid;
    }
    return hi;
  }

  /// Sampled check on the grid 0, 0.05, ..., 10: L(0) = 0, strictly increasing, midpoint convex.
  void validate() const {
    constexpr int kN = 200;
    constexpr double kStep = 0.05;
    if (std::abs(value(0.0)) > 1e-12) throw ValidationError("loss " + name_ + ": L(0) != 0");
    double prev2 = 0.0, prev = value(0.0);
    for (int k = 1; k <= kN; ++k) {
      const double cur = value(kStep * k);
      if (!std::isfinite(cur)) throw ValidationError("loss " + name_ + ": non-finite value");
      if (!(cur > prev)) throw ValidationError("loss " + name_ + ": not strictly increasing");
      if (k >= 2 && prev > 0.5 * (prev2 + cur) + 1e-12 * std::max(1.0, std::abs(cur)))
        throw ValidationError("loss " + name_ + ": fails convexity secant test");
      prev2 = prev;
      prev = cur;
    }
  }

 private:
  Loss(Kind k, double p, std::string name) : kind_(k), p_(p), name_(std::move(name)) {}

  Kind kind_;
  double p_;
  std::string name_;
  Fn value_;
  Fn derivative_;
};

/// Nonnegative terminal claim H(S_T).
class Claim {
 public:
  enum class Kind { kConstant, kCall, kPut };

  static Claim constant(double c) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw ValidationError("claim constant(c) needs c >= 0");
    return Claim(Kind::kConstant, c);
  }
  static Claim call(double strike) {
    if (!(strike >= 0.0) || !std::isfinite(strike)) throw ValidationError("claim call(K) needs K >= 0");
    return Claim(Kind::kCall, strike);
  }
  static Claim put(double strike) {
    if (!(strike >= 0.0) || !std::isfinite(strike)) throw ValidationError("claim put(K) needs K >= 0");
    return Claim(Kind::kPut, strike);
  }

  Kind kind() const { return kind_; }
  double parameter() const { return k_; }
  bool is_constant() const { return kind_ == Kind::kConstant; }

  double operator()(double terminal_price) const {
    switch (kind_) {
      case Kind::kConstant: return k_;
      case Kind::kCall: return std::max(terminal_price - k_, 0.0);
      case Kind::kPut: return std::max(k_ - terminal_price, 0.0);
    }
    return 0.0;
  }

  std::string name() const {
    char buf[64];
    const char* head = kind_ == Kind::kConstant ? "constant" : kind_ == Kind::kCall ? "call" : "put";
    std::snprintf(buf, sizeof buf, "%s(%.17g)", head, k_);
    return buf;
  }

 private:
  Claim(Kind k, double p) : kind_(k), k_(p) {}
  Kind kind_;
  double k_;
};

/// U(v, w) = L(H(w)) - L((H(w) - v)^+).
class StateUtility {
 public:
  StateUtility(Loss loss, Claim claim) : loss_(std::move(loss)), claim_(claim) {}

  const Loss& loss() const { return loss_; }
  const Claim& claim() const { return claim_; }

  double cap(double terminal_price) const { return claim_(terminal_price); }
  double cap(const PathView& path) const { return claim_(path.terminal_price()); }

  double value(double v, double cap) const {
    if (cap <= 0.0) return 0.0;
    return loss_.value(cap) - loss_.value(std::max(cap - std::max(v, 0.0), 0.0));
  }

  /// U'(v) = L'(H - v) on (0, H), zero beyond the cap.
  double marginal(double v, double cap) const {
    if (v >= cap) return 0.0;
    return loss_.derivative(cap - v);
  }

  /// I(y) ∧ H.
  double inverse_capped(double y, double cap) const {
    if (cap <= 0.0) return 0.0;
    if (y <= 0.0) return cap;
    return cap - loss_.threshold(y, cap);
  }

  /// Ũ(y) = sup_{0<=z<=H} {U(z) - y z} = U(I∧H) - y (I∧H).
  double conjugate(double y, double cap) const {
    if (cap <= 0.0) return 0.0;
    if (y <= 0.0) return loss_.value(cap);
    const double x = loss_.threshold(y, cap);
    return loss_.value(cap) - loss_.value(x) - y * (cap - x);
  }

 private:
  Loss loss_;
  Claim claim_;
};

inline StateUtility make_shortfall_utility(Loss loss, Claim claim) {
  loss.validate();
  return StateUtility(std::move(loss), claim);
}

inline double convex_dual(const StateUtility& u, double y, const PathView& path) {
  if (y < 0.0) throw ValidationError("convex_dual: y must be >= 0");
  return u.conjugate(y, u.cap(path));
}

inline double inverse_marginal(const StateUtility& u, double y, const PathView& path) {
  if (!(y > 0.0)) throw ValidationError("inverse_marginal: y must be > 0");
  return u.inverse_capped(y, u.cap(path));
}

}  // namespace levydual
