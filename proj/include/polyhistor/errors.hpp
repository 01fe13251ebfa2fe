#pragma once

#include <stdexcept>
#include <string>

namespace polyhistor {

/// Operand shapes do not agree for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operand has the wrong number of dimensions.
class RankError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value violates its contract (backbone, method, run config).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values, divergence, or misuse of the gradient machinery.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Backward was requested in a state where it cannot run.
class GradientError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace polyhistor
