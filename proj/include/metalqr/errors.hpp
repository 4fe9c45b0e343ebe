#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace metalqr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent matrix shapes or non-finite input.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A definiteness or symmetry invariant of a system is violated.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// A gain does not stabilize a system. Carries the offending system and
/// iteration when the caller knows them.
class InstabilityError : public Error {
 public:
  explicit InstabilityError(const std::string& what,
                            std::optional<std::size_t> system = std::nullopt,
                            std::optional<std::size_t> iteration = std::nullopt)
      : Error(what), system_(system), iteration_(iteration) {}

  std::optional<std::size_t> system() const { return system_; }
  std::optional<std::size_t> iteration() const { return iteration_; }

 private:
  std::optional<std::size_t> system_;
  std::optional<std::size_t> iteration_;
};

/// An iterative solver stopped without meeting its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// A simulated state norm exceeded the overflow cap.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Every Monte-Carlo sample feeding an estimate was dropped.
class EstimationError : public Error {
 public:
  explicit EstimationError(const std::string& what,
                           std::optional<std::size_t> system = std::nullopt)
      : Error(what), system_(system) {}
  std::optional<std::size_t> system() const { return system_; }

 private:
  std::optional<std::size_t> system_;
};

/// Finite-difference or other numeric procedure failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// File content does not match its recorded hash.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace metalqr
