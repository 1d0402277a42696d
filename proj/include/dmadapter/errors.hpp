#pragma once

#include <stdexcept>
#include <string>

namespace dmadapter {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Validation-class failures map to CLI exit code 1.
struct ValidationError : Error {
  using Error::Error;
};

struct DimensionError : ValidationError {
  using ValidationError::ValidationError;
};
struct ArgumentError : ValidationError {
  using ValidationError::ValidationError;
};
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};
struct DataError : ValidationError {
  using ValidationError::ValidationError;
};

// Runtime-class failures map to CLI exit code 2.
struct DomainError : Error {
  using Error::Error;
};
struct ContractViolation : Error {
  using Error::Error;
};
struct IntegrityError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct NonFiniteError : Error {
  NonFiniteError(std::string op_name, const std::string& what)
      : Error(what), op(std::move(op_name)) {}
  std::string op;
};

}  // namespace dmadapter
