#pragma once

#include <stdexcept>
#include <string>

namespace pairstn {

// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError -> 2, IoError/ValidationError/DimensionError -> 3, NumericError -> 4.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pairstn
