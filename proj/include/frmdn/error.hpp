#pragma once

#include <stdexcept>
#include <string>

namespace frmdn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an operation's shape rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument value was violated (bad config, bad flag...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a non-finite value or hit a degenerate input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace frmdn
