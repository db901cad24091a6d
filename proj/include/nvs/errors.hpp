#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace nvs {

// Raised when tensor or configuration shapes disagree.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or missing files, bad dataset contents.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf during training, failed gradient checks.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail
}  // namespace nvs
