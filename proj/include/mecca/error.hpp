#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mecca {

enum class ErrorKind {
  kMissingFile,
  kMalformedHeader,
  kPayloadMismatch,
  kValidation,
  kShapeMismatch,
  kIo,
  kInvalidArgument,
  kNotFound,
  kConflict,
};

std::string_view to_string(ErrorKind kind);

/// Library-wide exception. `kind()` distinguishes failure classes so callers
/// (CLI exit path, HTTP status mapping) can react without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace mecca
