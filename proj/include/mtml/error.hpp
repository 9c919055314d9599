#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mtml {

enum class ErrorCode {
  EmptyInput,
  InvalidGeometry,
  IndexOutOfBounds,
  ShapeError,
  ConfigError,
  BadMagic,
  VersionMismatch,
  CorruptTensorTable,
  PlacementError,
  NumericalDivergence,
  IoError,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries one of the codes above so the
// CLI can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidGeometry: return "InvalidGeometry";
    case ErrorCode::IndexOutOfBounds: return "IndexOutOfBounds";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptTensorTable: return "CorruptTensorTable";
    case ErrorCode::PlacementError: return "PlacementError";
    case ErrorCode::NumericalDivergence: return "NumericalDivergence";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

#define MTML_CHECK(cond, code, msg)                 \
  do {                                              \
    if (!(cond)) throw ::mtml::Error((code), (msg)); \
  } while (0)

}  // namespace mtml
