#pragma once

// Shared fixtures for the constructor tests and the acceptance run.

#include <string>
#include <vector>

#include "microturn/constructor.hpp"
#include "microturn/oracle.hpp"
#include "microturn/orchestrator.hpp"
#include "microturn/rng.hpp"

namespace microturn::testing {

inline std::string words(const std::string& prefix, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += prefix + std::to_string(i);
  }
  return out;
}

/// Synthetic corpus with fixed turn lengths; every dialogue ends with a system turn.
inline std::vector<SourceDialogue> synthetic_corpus(std::size_t n, int exchanges, int user_len,
                                                    int system_len, std::uint64_t seed,
                                                    double p_marker = 0.0) {
  Rng rng(seed);
  std::vector<SourceDialogue> out;
  for (std::size_t i = 0; i < n; ++i) {
    SourceDialogue d;
    d.id = "syn" + std::to_string(i);
    for (int e = 0; e < exchanges; ++e) {
      std::string user;
      for (int w = 0; w < user_len; ++w) {
        if (w) user += ' ';
        user += "u" + std::to_string(w);
        if (w + 1 < user_len && bernoulli(rng, p_marker)) user += std::string(kBcMarker);
      }
      d.turns.push_back({Role::User, user});
      d.turns.push_back({Role::System, words("s", system_len)});
    }
    out.push_back(std::move(d));
  }
  return out;
}

/// Per-flush labels that make the oracle reproduce a constructed sequence.
/// User micro-turn k is stamped at (k + 1) * dt.
inline GroundTruth ground_truth_of(const std::vector<MicroTurn>& turns, TimeMs dt) {
  GroundTruth truth;
  TimeMs t = 0;
  for (const auto& turn : turns) {
    if (turn.role == Role::User) {
      t += dt;
      continue;
    }
    IntervalAnnotation ann;
    ann.content = turn.tokens;
    if (!turn.control) {
      ann.label = IntervalLabel::ResponseContinue;
    } else {
      switch (*turn.control) {
        case ControlToken::UserIsSpeaking: ann.label = IntervalLabel::UserSpeaking; break;
        case ControlToken::UserFinishSpeaking: ann.label = IntervalLabel::TurnEnd; break;
        case ControlToken::UserIsInterrupting: ann.label = IntervalLabel::InterruptOnset; break;
        case ControlToken::UserBackchannel: ann.label = IntervalLabel::UserBackchannel; break;
        case ControlToken::UserIsThinking: ann.label = IntervalLabel::PostResponseSilence; break;
        case ControlToken::SystemBackchannel: ann.label = IntervalLabel::BackchannelCue; break;
        default: throw Error(ErrorCode::InvariantViolation, "unexpected control in a system turn");
      }
    }
    truth[t] = std::move(ann);
  }
  return truth;
}

/// Feeds the user micro-turns of `turns` through the orchestrator under a
/// table oracle and returns the system micro-turns it produced, plus the
/// number of fail-safe substitutions.
struct ClosedLoop {
  std::vector<MicroTurn> system_turns;
  std::size_t policy_errors = 0;
};

inline ClosedLoop replay_closed_loop(const std::vector<MicroTurn>& turns, TimeMs dt = 600) {
  TableOraclePolicy policy(ground_truth_of(turns, dt));
  OrchestratorConfig cfg;
  cfg.delta_t_ms = dt;
  auto state = OrchestratorState::initial(cfg);
  ClosedLoop out;
  TimeMs t = 0;
  for (std::size_t i = 0; i + 1 < turns.size(); ++i) {
    if (turns[i].role != Role::User) continue;
    t += dt;
    MicroTurn user = turns[i];
    user.t_start = t;
    auto r = step(state, user, policy, cfg);
    if (r.policy_error) ++out.policy_errors;
    MicroTurn sys = r.system_turn;
    sys.t_start = 0;
    out.system_turns.push_back(sys);
  }
  return out;
}

}  // namespace microturn::testing
