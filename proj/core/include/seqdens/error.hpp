#pragma once

#include <stdexcept>
#include <string>

namespace seqdens {

// Error taxonomy. The CLI maps these onto distinct exit codes
// (config -> 2, data -> 3, numerical -> 4).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& msg) : Error("index error: " + msg) {}
};

struct LengthError : Error {
  explicit LengthError(const std::string& msg) : Error("length error: " + msg) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& msg) : Error("numerical error: " + msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

}  // namespace seqdens
