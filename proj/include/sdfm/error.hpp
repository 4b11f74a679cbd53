#pragma once

#include <stdexcept>
#include <string>

namespace sdfm {

// Base of every error raised by the library. The CLI maps each subclass to
// an exit code (see tools/commands.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent configuration or mismatched dimensions.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation (b_j = 0, t >= 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Input that carries no usable information (all weights vanish, empty support).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Iterative method failed to reach its tolerance.
class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& what, double residual = 0.0)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

// Optimization diverged or produced non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Operation not defined for the given configuration.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdfm
