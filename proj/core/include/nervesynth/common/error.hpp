#pragma once

#include <stdexcept>
#include <string>

namespace nervesynth {

// Base of every exception the library throws. The CLI maps subclasses onto
// process exit codes (config 2, data 3, numerical 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation's precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// A statistic is mathematically undefined for the given input.
class UndefinedValueError : public Error {
 public:
  using Error::Error;
};

}  // namespace nervesynth
