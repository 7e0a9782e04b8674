#pragma once

#include <stdexcept>
#include <string>

namespace doprompt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An index (class label, domain, axis) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an API was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration key or value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A loss or parameter became non-finite during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace doprompt
