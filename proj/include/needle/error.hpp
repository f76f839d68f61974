#pragma once

#include <stdexcept>
#include <string>

namespace needle {

/// Base class for every error raised by the simulator libraries.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-physical material or geometric property (h <= 0, EI < 0, ...).
class InvalidProperty : public Error {
 public:
  using Error::Error;
};

/// The assembled system has too few essential conditions and no foundation.
class SingularSystem : public Error {
 public:
  using Error::Error;
};

/// Factorization failed or the residual check did not pass.
class SolverError : public Error {
 public:
  SolverError(const std::string& what, double condition_estimate)
      : Error(what), condition_estimate_(condition_estimate) {}

  double condition_estimate() const noexcept { return condition_estimate_; }

 private:
  double condition_estimate_;
};

/// Argument outside the domain of a constitutive function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Query outside the extent of the beam.
class OutOfRange : public Error {
 public:
  using Error::Error;
};

/// Malformed simulation step (over-constrained V-inputs, needle fully inserted, ...).
class StepError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition of a batch operation (empty dataset, degenerate curve).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Scenario or manifest could not be loaded. `field()` names the offending path.
class LoadError : public Error {
 public:
  LoadError(std::string field, const std::string& message)
      : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Ground-truth polyline rejected during ingestion.
class IngestionError : public Error {
 public:
  using Error::Error;
};

}  // namespace needle
