#pragma once

#include <stdexcept>
#include <string>

namespace peft {

/// Root of every error the toolkit raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or out-of-range configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad caller-supplied data (ids out of range, unknown tags, mismatched lengths).
class InputError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in values or gradients.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or version-mismatched files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class MappingError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Correlation requested on a series with zero variance.
class UndefinedCorrelationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace peft
