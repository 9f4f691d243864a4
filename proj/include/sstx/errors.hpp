#pragma once

#include <stdexcept>
#include <string>

namespace sstx {

// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity reached a tensor.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Checkpoint file is malformed, truncated, or from another version.
class FormatError : public Error {
 public:
  using Error::Error;
};

class SequenceLengthError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Mixing strategy / backprop mode pair that the procedure does not define.
class UnsupportedCombinationError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace sstx
