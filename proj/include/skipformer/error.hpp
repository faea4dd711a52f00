#pragma once

#include <stdexcept>
#include <string>

namespace skipformer {

// Root of every exception thrown by the library. The CLI maps subclasses
// onto its exit-code contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user-supplied configuration (missing or mistyped field).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by (or fed into) a kernel.
class NumericError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class PolicyError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class TraceError : public Error {
 public:
  using Error::Error;
};

// Broken internal invariant (e.g. attention over an empty context).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace skipformer
