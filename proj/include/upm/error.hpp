#pragma once

#include <stdexcept>
#include <string>

namespace upm {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input is well-formed but too small or otherwise degenerate for the operation.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an operation precondition (bad index, non-scalar root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values showed up where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace upm
