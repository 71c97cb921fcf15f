// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mlora {

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

/// An argument is outside the accepted domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Non-finite input or a numeric procedure that failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An object was used in a state that does not allow the call.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or incompatible serialized data.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input that is well-formed but carries no information for the requested
/// analysis, e.g. an all-zero update.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace mlora
