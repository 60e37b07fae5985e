#include "cvaet/error.hpp"

namespace cvaet {

const char* error_kind_name(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::config: return "configuration error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::version: return "version mismatch";
    case ErrorKind::backend: return "backend error";
    case ErrorKind::precondition: return "precondition violated";
    case ErrorKind::internal: return "internal error";
  }
  return "error";
}

}  // namespace cvaet
