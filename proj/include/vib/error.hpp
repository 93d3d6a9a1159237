#pragma once

#include <stdexcept>
#include <string>

namespace vib {

// Shapes or dimensions of operands disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad configuration or arguments (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Problems with input data: empty sets, degenerate labels, unreadable files (exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or Inf detected where finite values are required (exit code 4).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrorKind { kBadMagic, kVersionMismatch, kTruncated, kDimMismatch, kIo };

const char* to_string(FormatErrorKind kind);

// Binary file decoding failure. Derives from DataError so callers that do not
// care about the specific kind can treat it as a data problem.
class FormatError : public DataError {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : DataError(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

}  // namespace vib
