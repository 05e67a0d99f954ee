#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace levydual {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An input violates a documented precondition (bad spec, bad config, bad argument).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A time-discretized multiplicative step produced a non-positive factor.
class DiscretizationError : public Error {
 public:
  DiscretizationError(const std::string& what, std::size_t step)
      : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// A trading strategy drove wealth negative.
class InadmissibleError : public Error {
 public:
  InadmissibleError(const std::string& what, std::size_t step, double beta)
      : Error(what), step_(step), beta_(beta) {}
  std::size_t step() const noexcept { return step_; }
  double beta() const noexcept { return beta_; }

 private:
  std::size_t step_;
  double beta_;
};

/// Iterative procedure failed (overflow, no bracket, retries exhausted).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// The market admits no equivalent risk-neutral measure with the requested structure.
class NoEquivalentMeasureError : public Error {
 public:
  using Error::Error;
};

/// Jump structure lacks what an operation requires (e.g. extremes not attained by atoms).
class UnsupportedStructureError : public Error {
 public:
  using Error::Error;
};

/// Tree construction found a node whose returns all lie on one side of 1.
class ArbitrageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// The initial wealth is at or above the super-hedging cost, so the problem is trivial.
class SuperHedgingRegion : public Error {
 public:
  SuperHedgingRegion(const std::string& what, double utility_of_claim)
      : Error(what), utility_of_claim_(utility_of_claim) {}
  /// Sample mean of U(H), which is the value u(z) in this region.
  double utility_of_claim() const noexcept { return utility_of_claim_; }

 private:
  double utility_of_claim_;
};

}  // namespace levydual
