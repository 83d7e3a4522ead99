#pragma once

#include <stdexcept>
#include <string>

namespace d3pg {

/// Base of every error raised by the library. The CLI maps the concrete
/// type onto a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad layer sizes, bad scenario constants, unreadable
/// config files, incompatible checkpoints.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Vector or matrix dimensions disagree with what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside its admissible range (time step, CW, aggregation length).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied data is invalid (non-finite state, negative throughput).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite intermediate values, singular reconstructions, or a fixed-point
/// iteration that failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace d3pg
