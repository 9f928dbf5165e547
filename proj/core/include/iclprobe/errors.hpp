#pragma once

#include <stdexcept>
#include <string>

namespace iclprobe {

// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A task parameter or query outside its family's domain.
class ParameterDomainError : public Error {
 public:
  using Error::Error;
};

class TokenizationError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or config-mismatched checkpoint file; also a missing one.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& msg, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

class TrainingFailure : public Error {
 public:
  using Error::Error;
};

// Ill-conditioned or non-positive-definite linear algebra.
class ConditioningError : public Error {
 public:
  explicit ConditioningError(const std::string& msg, double suggested_ridge = 0.0)
      : Error(msg), suggested_ridge_(suggested_ridge) {}
  double suggested_ridge() const noexcept { return suggested_ridge_; }

 private:
  double suggested_ridge_;
};

// Index, layer or position out of bounds for the object it addresses.
class RangeError : public Error {
 public:
  using Error::Error;
};

}  // namespace iclprobe
