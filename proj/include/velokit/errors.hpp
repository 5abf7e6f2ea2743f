#pragma once

#include <stdexcept>
#include <string>

namespace velokit {

// Bad user-facing input: config files, shapes, flags. CLI maps this to exit 2.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failure inside a numerical routine (singular system, no convergence,
// non-finite values). CLI maps this to exit 3.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace velokit
