#pragma once

#include <stdexcept>
#include <string>

namespace pudnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A class label or element index is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or precondition on user-supplied settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// API misuse (e.g. backward on a non-scalar, mutating a taped tensor).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An input file does not exist or cannot be opened.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or a numerically unrepairable problem.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pudnet
