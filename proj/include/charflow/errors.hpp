#pragma once

#include <stdexcept>
#include <string>

namespace charflow {

/// Argument outside the mathematical domain of an operation (e.g. t > 1).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Evaluation at a point where a schedule coefficient diverges or vanishes.
class SingularityError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Caller broke a precondition: dimension mismatch, bad index, wrong ordering.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A spec/config value violates a documented invariant.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite value produced during integration or training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed config or data file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace charflow
