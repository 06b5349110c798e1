#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace prefscope {

enum class ErrorKind {
  validation,
  parse,
  dependency,
  transport,
  provider_contract,
  numeric,
  model_state,
  insufficient_data,
  degenerate,
  separation,
  annotation,
  io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string msg)
      : std::runtime_error(std::move(msg)), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Process exit code contract: 0 ok, 2 validation, 3 dependency,
  // 4 provider/transport, 5 numeric failure.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::validation:
      case ErrorKind::parse:
      case ErrorKind::io:
        return 2;
      case ErrorKind::dependency:
        return 3;
      case ErrorKind::transport:
      case ErrorKind::provider_contract:
      case ErrorKind::annotation:
        return 4;
      default:
        return 5;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace prefscope
