#pragma once

#include <stdexcept>
#include <string>

namespace wncs {

// Root of every failure raised by the library. Solver-side failures derive from
// SolverError so the CLI can map them onto a single exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SolverError : public Error {
 public:
  using Error::Error;
};

// Fixed-point iteration exhausted its budget (unstable input or ill-conditioning).
class NonConvergent : public SolverError {
 public:
  using SolverError::SolverError;
};

class NotStabilizing : public SolverError {
 public:
  using SolverError::SolverError;
};

// V + C*Ebar*C^T is not positive definite.
class SingularInnovation : public SolverError {
 public:
  using SolverError::SolverError;
};

class InfeasibleSchedule : public SolverError {
 public:
  using SolverError::SolverError;
};

class TooLarge : public SolverError {
 public:
  using SolverError::SolverError;
};

class InvalidAlpha : public SolverError {
 public:
  using SolverError::SolverError;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column)
      : Error(what + " (line " + std::to_string(line) + ", column " + std::to_string(column) + ")"),
        line_(line),
        column_(column) {}

  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace wncs
