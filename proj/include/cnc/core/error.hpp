#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cnc {

/// Category of a domain failure. The CLI maps every category to exit code 1.
enum class ErrorKind {
  config,
  shape,
  argument,
  vocabulary,
  input,
  inpainting,
  ingestion,
  staging,
  incompatible,
  numeric,
  state,
  load,
  training,
  io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "configuration error";
    case ErrorKind::shape: return "shape error";
    case ErrorKind::argument: return "argument error";
    case ErrorKind::vocabulary: return "vocabulary error";
    case ErrorKind::input: return "input error";
    case ErrorKind::inpainting: return "inpainting error";
    case ErrorKind::ingestion: return "ingestion error";
    case ErrorKind::staging: return "staging error";
    case ErrorKind::incompatible: return "incompatibility error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::state: return "state error";
    case ErrorKind::load: return "load error";
    case ErrorKind::training: return "training failure";
    case ErrorKind::io: return "i/o error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace cnc
