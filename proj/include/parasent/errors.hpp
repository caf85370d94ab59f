#pragma once

#include <stdexcept>
#include <string>

namespace parasent {

// File could not be opened, read, or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed configuration or dataset contents.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A loss or gradient became non-finite during optimization.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace parasent
