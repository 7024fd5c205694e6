#pragma once

#include <stdexcept>
#include <string>

namespace pball {

// Thrown on malformed arguments: shape mismatches, out-of-range parameters.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shapes that do not fit an operation.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// File and container problems (bad magic, truncation, missing files).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values encountered during optimization or training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pball
