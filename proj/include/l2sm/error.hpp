#pragma once

#include <stdexcept>
#include <string>

namespace l2sm {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input whose norm is too small to normalize (zero feature, zero vector).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A parameter or argument outside its valid domain.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Backward called without a matching forward, or similar ordering mistakes.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable input files.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace l2sm
