#pragma once

// Ground-truth policy. Each flush interval carries a label; the oracle maps
// it to the control token the training-data construction would supervise
// for the same situation.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "microturn/error.hpp"
#include "microturn/policy.hpp"
#include "microturn/protocol.hpp"
#include "microturn/scenarios.hpp"

namespace microturn {

enum class IntervalLabel {
  UserSpeaking,         // user mid-utterance
  UserPause,            // user mid-utterance pause
  TurnEnd,              // user finished, respond
  ResponseContinue,     // user silent while the system answers
  InterruptOnset,       // user starts talking over the system
  UserBackchannel,      // short acknowledgement during system speech
  BackchannelCue,       // system should acknowledge
  PostResponseSilence,  // user silent with nothing pending
};

constexpr std::string_view interval_label_name(IntervalLabel label) {
  switch (label) {
    case IntervalLabel::UserSpeaking: return "user_speaking";
    case IntervalLabel::UserPause: return "user_pause";
    case IntervalLabel::TurnEnd: return "turn_end";
    case IntervalLabel::ResponseContinue: return "response_continue";
    case IntervalLabel::InterruptOnset: return "interrupt_onset";
    case IntervalLabel::UserBackchannel: return "user_backchannel";
    case IntervalLabel::BackchannelCue: return "backchannel_cue";
    case IntervalLabel::PostResponseSilence: return "post_response_silence";
  }
  return "";
}

struct IntervalAnnotation {
  IntervalLabel label = IntervalLabel::UserSpeaking;
  std::vector<std::string> content;  // response tokens for TurnEnd / continuation
};

/// Flush instant -> label.
using GroundTruth = std::map<TimeMs, IntervalAnnotation>;

inline PolicyResponse oracle_decide(const PolicyRequest& req, const IntervalAnnotation& ann) {
  const TimeMs t = req.latest().t_start;
  auto content = ann.content;
  if (content.size() > static_cast<std::size_t>(req.max_system_tokens)) {
    content.resize(req.max_system_tokens);
  }
  auto reply = [&](std::optional<ControlToken> control, std::vector<std::string> tokens = {}) {
    return PolicyResponse{system_turn(control, std::move(tokens), t)};
  };
  switch (ann.label) {
    case IntervalLabel::UserSpeaking:
    case IntervalLabel::UserPause:
      return reply(ControlToken::UserIsSpeaking);
    case IntervalLabel::TurnEnd:
      if (content.empty()) {
        throw Error(ErrorCode::MissingAnnotation, "turn end without response text");
      }
      return reply(ControlToken::UserFinishSpeaking, std::move(content));
    case IntervalLabel::ResponseContinue:
      if (content.empty()) return reply(ControlToken::UserIsThinking);
      return reply(std::nullopt, std::move(content));
    case IntervalLabel::InterruptOnset:
      return reply(ControlToken::UserIsInterrupting);
    case IntervalLabel::UserBackchannel:
      return reply(ControlToken::UserBackchannel, std::move(content));
    case IntervalLabel::BackchannelCue:
      return reply(ControlToken::SystemBackchannel);
    case IntervalLabel::PostResponseSilence:
      return reply(ControlToken::UserIsThinking);
  }
  throw Error(ErrorCode::MissingAnnotation, "unknown label");
}

inline PolicyResponse oracle_decide(const PolicyRequest& req, const GroundTruth& truth) {
  auto it = truth.find(req.latest().t_start);
  if (it == truth.end()) {
    throw Error(ErrorCode::MissingAnnotation,
                "no label for the interval ending at " + std::to_string(req.latest().t_start));
  }
  return oracle_decide(req, it->second);
}

namespace detail {

struct ResponseProgress {
  std::size_t answers = 0;       // <user finish speaking> turns so far
  std::size_t delivered = 0;     // content tokens of the latest answer
  bool interrupted = false;      // <user is interrupting> after the latest answer
};

inline ResponseProgress response_progress(const std::vector<MicroTurn>& turns) {
  ResponseProgress p;
  for (const auto& turn : turns) {
    if (turn.role != Role::System) continue;
    if (turn.is(ControlToken::UserFinishSpeaking)) {
      ++p.answers;
      p.delivered = turn.tokens.size();
      p.interrupted = false;
    } else if (turn.is(ControlToken::UserIsInterrupting)) {
      p.interrupted = true;
    } else if (p.answers > 0 && !p.interrupted &&
               (!turn.control || turn.is(ControlToken::UserBackchannel))) {
      p.delivered += turn.tokens.size();
    }
  }
  return p;
}

}  // namespace detail

/// Labels the interval [t - dt, t) of a scenario from its truth intervals and
/// the system's own history. Only evidence before `t` is used. Returns
/// nullopt when the script does not cover the interval.
inline std::optional<IntervalAnnotation> annotate_interval(const ScenarioScript& script,
                                                           const PolicyRequest& req) {
  const MicroTurn& latest = req.latest();
  const TimeMs t = latest.t_start;
  const TimeMs dt = req.delta_t_ms();
  const auto* here = script.interval_at(t - 1);
  if (!here) return std::nullopt;

  auto progress = detail::response_progress(req.history.turns);
  auto response_tokens = [&](std::size_t index) {
    return index < script.responses.size() ? split_canonical(script.responses[index])
                                           : std::vector<std::string>{};
  };

  std::size_t turn_ends_seen = 0;
  for (const auto* iv : script.intervals_of(TruthKind::TurnEnd)) {
    if (iv->start_ms <= t) ++turn_ends_seen;
  }
  // The flush right after a question's last word already carries the answer.
  if (progress.answers < turn_ends_seen) {
    auto tokens = response_tokens(progress.answers);
    return IntervalAnnotation{IntervalLabel::TurnEnd, std::move(tokens)};
  }

  if (req.system_speaking) {
    bool onset_seen = false;
    for (const auto* iv : script.intervals_of(TruthKind::InterruptOnset)) {
      if (iv->start_ms < t) onset_seen = true;
    }
    if (onset_seen && latest.has_content() && !progress.interrupted) {
      return IntervalAnnotation{IntervalLabel::InterruptOnset, {}};
    }
    if (latest.has_content()) return IntervalAnnotation{IntervalLabel::UserSpeaking, {}};
    auto tokens = progress.answers > 0 ? response_tokens(progress.answers - 1)
                                       : std::vector<std::string>{};
    if (progress.delivered < tokens.size() && !progress.interrupted) {
      return IntervalAnnotation{
          IntervalLabel::ResponseContinue,
          std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(progress.delivered),
                                   tokens.end())};
    }
    return IntervalAnnotation{IntervalLabel::PostResponseSilence, {}};
  }

  for (const auto* iv : script.intervals_of(TruthKind::BackchannelCue)) {
    if (iv->start_ms >= t - dt && iv->start_ms < t) {
      return IntervalAnnotation{IntervalLabel::BackchannelCue, {}};
    }
  }
  if (latest.has_content()) return IntervalAnnotation{IntervalLabel::UserSpeaking, {}};
  switch (here->kind) {
    case TruthKind::Speaking:
    case TruthKind::InterruptOnset:
      return IntervalAnnotation{IntervalLabel::UserSpeaking, {}};
    case TruthKind::Pause:
    case TruthKind::BackchannelCue:
      return IntervalAnnotation{IntervalLabel::UserPause, {}};
    default:
      return IntervalAnnotation{IntervalLabel::PostResponseSilence, {}};
  }
}

/// Oracle bound to one scenario script.
class OraclePolicy : public Policy {
 public:
  explicit OraclePolicy(ScenarioScript script) : script_(std::move(script)) {}

  PolicyResponse decide(const PolicyRequest& req) override {
    auto ann = annotate_interval(script_, req);
    if (!ann) {
      throw Error(ErrorCode::MissingAnnotation,
                  "script " + script_.id + " has no label at " + std::to_string(req.t_ms));
    }
    return oracle_decide(req, *ann);
  }

  std::string name() const override { return "oracle"; }

 private:
  ScenarioScript script_;
};

/// Oracle over an explicit per-flush label table.
class TableOraclePolicy : public Policy {
 public:
  explicit TableOraclePolicy(GroundTruth truth) : truth_(std::move(truth)) {}
  PolicyResponse decide(const PolicyRequest& req) override { return oracle_decide(req, truth_); }
  std::string name() const override { return "oracle"; }

 private:
  GroundTruth truth_;
};

}  // namespace microturn
