#pragma once

#include <stdexcept>
#include <string>

namespace icl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A forward pass or optimizer produced NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace icl
