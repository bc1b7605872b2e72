#pragma once

#include <stdexcept>
#include <string>

namespace lumos {

// Error taxonomy mirrored by CLI exit codes: validation/config/shape -> 1,
// numeric -> 2, I/O -> 3.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct shape_error : config_error {
  explicit shape_error(const std::string& msg) : config_error(msg) {}
};

struct consistency_error : config_error {
  explicit consistency_error(const std::string& msg) : config_error(msg) {}
};

struct topology_error : config_error {
  explicit topology_error(const std::string& msg) : config_error(msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitNumeric = 2,
  kExitIo = 3,
};

}  // namespace lumos
