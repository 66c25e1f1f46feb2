#pragma once

#include <stdexcept>
#include <string>

namespace cvae {

/// Invalid configuration or argument values (non-divisible image dims, bad ranges, ...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Tensor shapes that do not line up with the contract of an operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Arguments outside the mathematical domain of an operation (temperature <= 0, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Index-based edits or lookups that fall outside the valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// A loss term evaluated to NaN or infinity. `term` names the offending term.
struct NonFiniteLossError : std::runtime_error {
  NonFiniteLossError(std::string term_name, double value)
      : std::runtime_error("non-finite loss term '" + term_name + "' = " + std::to_string(value)),
        term(std::move(term_name)) {}
  std::string term;
};

/// Density fitting diverged or was handed degenerate data.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File-system or (de)serialization failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cvae
