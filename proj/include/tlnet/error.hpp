#pragma once

#include <stdexcept>
#include <string>

namespace tlnet {

/// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed files, unknown config values, bad arguments.
class UserError : public Error {
 public:
  using Error::Error;
};

class FormatError : public UserError {
 public:
  using UserError::UserError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An internal invariant was broken (e.g. a shared lattice shrank).
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace tlnet
