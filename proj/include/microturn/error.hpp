#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace microturn {

enum class ErrorCode {
  InvariantViolation,
  MissingEos,
  IllegalControl,
  OutOfOrderEvent,
  PolicyProtocolError,
  MissingAnnotation,
  Timeout,
  MalformedResponse,
  EmptyTurn,
  NoFollowupQuestion,
  MisalignedMarker,
  EmptyTrialSet,
  OutOfRange,
  InvalidConfig,
  BadMessage,
  BindError,
  IoError,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::MissingEos: return "MissingEos";
    case ErrorCode::IllegalControl: return "IllegalControl";
    case ErrorCode::OutOfOrderEvent: return "OutOfOrderEvent";
    case ErrorCode::PolicyProtocolError: return "PolicyProtocolError";
    case ErrorCode::MissingAnnotation: return "MissingAnnotation";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::EmptyTurn: return "EmptyTurn";
    case ErrorCode::NoFollowupQuestion: return "NoFollowupQuestion";
    case ErrorCode::MisalignedMarker: return "MisalignedMarker";
    case ErrorCode::EmptyTrialSet: return "EmptyTrialSet";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::BadMessage: return "BadMessage";
    case ErrorCode::BindError: return "BindError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// All library failures are reported as microturn::Error; code() is stable and
// machine readable, what() carries the human detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace microturn
