#pragma once

#include <stdexcept>
#include <string>

namespace fgc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid user-facing configuration (network spec, run config, CLI values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced, or a numerically undefined regime was requested.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (IDX, checkpoint, config text).
class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace fgc
