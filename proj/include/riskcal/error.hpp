#pragma once

#include <stdexcept>
#include <string>

namespace riskcal {

// Violated precondition on caller-supplied values (ranges, shapes, finiteness).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inconsistent or infeasible configuration (fold too small, split too large, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input file does not follow the expected column layout or value ranges.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite objective during gradient training; retry with a smaller step size.
class TrainingDiverged : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

namespace detail {

// const char* so hot loops don't build a string per passing check.
inline void require(bool condition, const char* message) {
  if (!condition) throw InvalidInput(message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidInput(message);
}

}  // namespace detail
}  // namespace riskcal
