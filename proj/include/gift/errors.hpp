#pragma once

#include <stdexcept>
#include <string>

namespace gift {

// Bad input: malformed config, violated precondition, unknown id.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient, degenerate statistics.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File could not be read or written, or has the wrong schema.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gift
