#pragma once

#include <stdexcept>
#include <string>

namespace cvaet {

enum class ErrorKind {
  invalid_argument,
  io,
  parse,
  validation,
  config,
  numeric,
  version,
  backend,
  precondition,
  internal,
};

const char* error_kind_name(ErrorKind kind) noexcept;

// Every failure surfaced by the library is a cvaet::Error; the C API maps the
// kind onto its status codes.
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

}  // namespace cvaet
