#pragma once

#include <stdexcept>
#include <string>

namespace sagdrive {

// Bad or infeasible configuration; the CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable, truncated, or incompatible data files; CLI exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sagdrive
