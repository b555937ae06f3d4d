#pragma once

#include <stdexcept>
#include <string>

namespace bupo {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied data is out of range (token ids, lengths, probabilities).
class InputError : public Error {
 public:
  using Error::Error;
};

// An operation produced NaN or Inf.
class NumericFault : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward from a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration; the message names the offending key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A quantity is mathematically undefined for the given data.
class UndefinedValueError : public Error {
 public:
  using Error::Error;
};

// Persisted data failed an integrity check.
class CorruptDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace bupo
