#pragma once

#include <stdexcept>
#include <string>

namespace avd2v {

// Error taxonomy. The CLI maps these onto process exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace avd2v
