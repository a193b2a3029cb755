#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace soiltdm {

// Input dimensions do not match what a model or environment expects.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A computation produced or received a non-finite value.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad run configuration (empty dataset, unknown key, invalid value).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require_finite(double value, const std::string& what) {
  if (!std::isfinite(value)) {
    throw NumericError(what + " is non-finite: " + std::to_string(value));
  }
}

inline void require_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace soiltdm
