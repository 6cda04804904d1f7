#pragma once

#include <stdexcept>
#include <string>

namespace spingas {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SchemaError : IoError {
  using IoError::IoError;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConvergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Process exit codes used by the CLI.
enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_config = 2, exit_io = 3, exit_numerical = 4, exit_nonconverged = 5 };

}  // namespace spingas
