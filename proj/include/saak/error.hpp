#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace saak {

enum class ErrorKind {
  format,       // malformed file contents
  io,           // missing, unreadable, unwritable or truncated files
  consistency,  // two inputs that must agree do not
  domain,       // argument outside an operation's domain
  config,       // invalid configuration or stage chain
  numeric,      // solver failed to converge
  training,     // classifier diverged
  unsupported,  // operation not defined for this configuration
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format error";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::consistency: return "consistency error";
    case ErrorKind::domain: return "domain error";
    case ErrorKind::config: return "config error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::training: return "training error";
    case ErrorKind::unsupported: return "unsupported configuration";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind Kind>
class KindError : public Error {
 public:
  explicit KindError(const std::string& message) : Error(Kind, message) {}
};

using FormatError = KindError<ErrorKind::format>;
using IoError = KindError<ErrorKind::io>;
using ConsistencyError = KindError<ErrorKind::consistency>;
using DomainError = KindError<ErrorKind::domain>;
using ConfigError = KindError<ErrorKind::config>;
using NumericError = KindError<ErrorKind::numeric>;
using TrainingError = KindError<ErrorKind::training>;
using UnsupportedError = KindError<ErrorKind::unsupported>;

/// Re-throws `e` with `context` prepended, keeping its kind. Used to name the
/// failing stage or file on the way up.
[[noreturn]] inline void rethrow_with_context(const Error& e, std::string_view context) {
  throw Error(e.kind(), std::string(context) + ": " + e.what());
}

/// Runs `fn`, prefixing any saak::Error with `context`.
template <typename Fn>
decltype(auto) with_context(std::string_view context, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    rethrow_with_context(e, context);
  }
}

}  // namespace saak
