#pragma once

#include <stdexcept>
#include <string>

namespace qmx {

// Invalid hyperparameters, flag combinations or tensor shapes.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Missing or malformed dataset / checkpoint files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or activations during optimization.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qmx
