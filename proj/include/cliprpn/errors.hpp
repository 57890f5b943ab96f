#pragma once

#include <stdexcept>
#include <string>

namespace cliprpn {

// Precondition violations on tensor/image shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration values or mismatched checkpoint/config pairs.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by the real vision-language backend when encoder weights cannot be loaded.
class WeightsUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cliprpn
