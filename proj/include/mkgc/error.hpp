#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mkgc {

enum class ErrorKind {
  kInvalidArgument,
  kNotFound,
  kParse,
  kConfig,
  kUsage,
  kContractViolation,
  kNumeric,
  kIo,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kParse: return "parse-error";
    case ErrorKind::kConfig: return "config-error";
    case ErrorKind::kUsage: return "usage-error";
    case ErrorKind::kContractViolation: return "contract-violation";
    case ErrorKind::kNumeric: return "numeric-error";
    case ErrorKind::kIo: return "io-error";
  }
  return "unknown";
}

/// Single exception type for the library; callers branch on kind().
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

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

/// Parse failure carrying "file:line" location.
inline Error parse_error(std::string_view file, std::size_t line, const std::string& what) {
  return Error(ErrorKind::kParse, std::string(file) + ":" + std::to_string(line) + ": " + what);
}

}  // namespace mkgc
