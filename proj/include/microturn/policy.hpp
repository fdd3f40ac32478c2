#pragma once

// Decision interface: given the micro-turn history ending in the latest user
// micro-turn, produce the next system micro-turn.

#include <memory>
#include <string>
#include <vector>

#include "microturn/error.hpp"
#include "microturn/protocol.hpp"

namespace microturn {

struct PolicyRequest {
  DialogueHistory history;  // ends with the latest user micro-turn
  int max_system_tokens = 10;
  TimeMs t_ms = 0;              // flush instant of the latest user micro-turn
  bool system_speaking = false;  // engine context, not part of the wire schema

  TimeMs delta_t_ms() const { return history.delta_t_ms; }
  std::string canonical() const { return serialize_history(history); }

  const MicroTurn& latest() const {
    if (history.turns.empty() || history.turns.back().role != Role::User) {
      throw Error(ErrorCode::InvariantViolation, "request must end with a user micro-turn");
    }
    return history.turns.back();
  }
};

struct PolicyResponse {
  MicroTurn micro_turn;
};

inline void check_request(const PolicyRequest& req) {
  if (req.max_system_tokens < 1) {
    throw Error(ErrorCode::InvalidConfig, "max_system_tokens must be >= 1");
  }
  if (auto violations = validate_history(req.history); !violations.empty()) {
    throw Error(ErrorCode::InvariantViolation, violations.front().to_string());
  }
  (void)req.latest();
}

/// Throws PolicyProtocolError unless `response` is a well-formed system turn.
inline void check_response(const PolicyResponse& response) {
  const auto& turn = response.micro_turn;
  if (turn.role != Role::System) {
    throw Error(ErrorCode::PolicyProtocolError, "policy returned a user micro-turn");
  }
  if (auto violations = check_micro_turn(turn); !violations.empty()) {
    throw Error(ErrorCode::PolicyProtocolError, violations.front().to_string());
  }
}

class Policy {
 public:
  virtual ~Policy() = default;
  virtual PolicyResponse decide(const PolicyRequest& req) = 0;
  virtual std::string name() const = 0;
};

inline PolicyResponse fail_safe_response(TimeMs t_ms) {
  return {system_turn(ControlToken::UserIsSpeaking, {}, t_ms)};
}

struct HeuristicConfig {
  std::string terminal_punctuation = ".?!";
  std::size_t interrupt_min_tokens = 3;
  std::string canned_answer = "Sure , let me answer that for you .";
};

namespace detail {

inline bool ends_with_terminal(const std::vector<std::string>& tokens,
                               const std::string& punctuation) {
  if (tokens.empty() || tokens.back().empty()) return false;
  return punctuation.find(tokens.back().back()) != std::string::npos;
}

}  // namespace detail

/// LLM-free baseline built from text-only rules.
inline PolicyResponse heuristic_decide(const PolicyRequest& req,
                                       const HeuristicConfig& cfg = {}) {
  const auto& turns = req.history.turns;
  const MicroTurn& latest = req.latest();
  auto reply = [&](ControlToken control, std::vector<std::string> tokens = {}) {
    return PolicyResponse{system_turn(control, std::move(tokens), latest.t_start)};
  };

  if (req.system_speaking) {
    if (!latest.has_content()) return reply(ControlToken::UserIsThinking);
    return latest.tokens.size() >= cfg.interrupt_min_tokens
               ? reply(ControlToken::UserIsInterrupting)
               : reply(ControlToken::UserBackchannel);
  }
  if (latest.has_content()) return reply(ControlToken::UserIsSpeaking);

  std::ptrdiff_t last_content = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(turns.size()) - 1; i >= 0; --i) {
    if (turns[i].role == Role::User && turns[i].has_content()) {
      last_content = i;
      break;
    }
  }
  bool answered = false;
  for (std::size_t i = last_content < 0 ? 0 : static_cast<std::size_t>(last_content);
       i < turns.size(); ++i) {
    if (turns[i].role == Role::System && turns[i].is(ControlToken::UserFinishSpeaking)) {
      answered = true;
    }
  }
  if (answered) return reply(ControlToken::UserIsThinking);
  if (last_content >= 0 &&
      detail::ends_with_terminal(turns[last_content].tokens, cfg.terminal_punctuation)) {
    auto answer = split_canonical(cfg.canned_answer);
    if (answer.size() > static_cast<std::size_t>(req.max_system_tokens)) {
      answer.resize(req.max_system_tokens);
    }
    return reply(ControlToken::UserFinishSpeaking, std::move(answer));
  }
  return reply(ControlToken::UserIsSpeaking);
}

class HeuristicPolicy : public Policy {
 public:
  explicit HeuristicPolicy(HeuristicConfig cfg = {}) : cfg_(std::move(cfg)) {}
  PolicyResponse decide(const PolicyRequest& req) override { return heuristic_decide(req, cfg_); }
  std::string name() const override { return "heuristic"; }

 private:
  HeuristicConfig cfg_;
};

}  // namespace microturn
