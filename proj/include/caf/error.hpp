#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace caf {

// Every failure surfaced by the library derives from Error so callers can
// catch one type and still branch on the category.
enum class ErrorKind {
  parse,        // malformed input file or payload
  validation,   // well-formed input that violates an invariant
  config,       // run configuration cannot be resolved
  placeholder,  // template rendering problem
  mode,         // scoring called with the wrong question mode
  auth,
  rate_limit,
  network,
  http,         // non-retryable HTTP status
  malformed_response,
  replay_miss,
  dimension,
  not_found,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::parse: return "parse";
    case ErrorKind::validation: return "validation";
    case ErrorKind::config: return "config";
    case ErrorKind::placeholder: return "placeholder";
    case ErrorKind::mode: return "mode";
    case ErrorKind::auth: return "auth";
    case ErrorKind::rate_limit: return "rate_limit";
    case ErrorKind::network: return "network";
    case ErrorKind::http: return "http";
    case ErrorKind::malformed_response: return "malformed_response";
    case ErrorKind::replay_miss: return "replay_miss";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Transport-level failures the retry policy is allowed to repeat.
  bool transient() const noexcept {
    return kind_ == ErrorKind::rate_limit || kind_ == ErrorKind::network;
  }

 private:
  ErrorKind kind_;
};

}  // namespace caf
