#pragma once

// The duplex state machine. Every flushed user micro-turn goes to the policy
// together with the history; the returned control token is turned into
// playback actions. System speech is a timed token queue paced by
// PlaybackModel in place of a streaming TTS.

#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <ostream>
#include <istream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/ingest.hpp"
#include "microturn/policy.hpp"
#include "microturn/protocol.hpp"
#include "microturn/rng.hpp"

namespace microturn {

struct PlaybackModel {
  double tokens_per_second = 3.0;
  TimeMs policy_latency_ms = 0;

  /// Offset of token `k` (zero based) from the start of its utterance.
  TimeMs offset_of(std::size_t k) const {
    return static_cast<TimeMs>(std::llround(1000.0 * static_cast<double>(k) / tokens_per_second));
  }
};

enum class Phase { Listening, Responding, Idle };

constexpr std::string_view phase_name(Phase phase) {
  switch (phase) {
    case Phase::Listening: return "listening";
    case Phase::Responding: return "responding";
    case Phase::Idle: return "idle";
  }
  return "";
}

struct ScheduledToken {
  std::string token;
  TimeMs t_ms = 0;
  friend bool operator==(const ScheduledToken&, const ScheduledToken&) = default;
};

struct EmitSpeech {
  std::vector<std::string> tokens;
  TimeMs t_ms = 0;
  bool continuation = false;  // extends the utterance already playing
  friend bool operator==(const EmitSpeech&, const EmitSpeech&) = default;
};
struct AbortPlayback {
  TimeMs t_ms = 0;
  friend bool operator==(const AbortPlayback&, const AbortPlayback&) = default;
};
struct PlayBackchannelClip {
  std::string clip_id;
  TimeMs t_ms = 0;
  friend bool operator==(const PlayBackchannelClip&, const PlayBackchannelClip&) = default;
};
struct NoOp {
  TimeMs t_ms = 0;
  friend bool operator==(const NoOp&, const NoOp&) = default;
};

using Action = std::variant<EmitSpeech, AbortPlayback, PlayBackchannelClip, NoOp>;

struct OrchestratorConfig {
  TimeMs delta_t_ms = 600;
  PlaybackModel playback;
  int max_system_tokens = 10;
  int backchannel_clips = 8;
  std::uint64_t seed = 0;

  void check() const {
    if (delta_t_ms <= 0) throw Error(ErrorCode::InvalidConfig, "delta_t_ms must be positive");
    if (!(playback.tokens_per_second > 0.0)) {
      throw Error(ErrorCode::InvalidConfig, "tokens_per_second must be positive");
    }
    if (playback.policy_latency_ms < 0) {
      throw Error(ErrorCode::InvalidConfig, "policy_latency_ms must be nonnegative");
    }
    if (max_system_tokens < 1) throw Error(ErrorCode::InvalidConfig, "max_system_tokens < 1");
    if (backchannel_clips < 1) throw Error(ErrorCode::InvalidConfig, "backchannel_clips < 1");
  }
};

struct OrchestratorState {
  Phase phase = Phase::Listening;
  std::deque<ScheduledToken> playback_queue;
  DialogueHistory history;
  std::uint64_t rng_seed = 0;
  Rng rng;
  TimeMs next_free_ms = 0;   // earliest slot for a continuation token
  TimeMs last_advance_ms = 0;

  static OrchestratorState initial(const OrchestratorConfig& cfg) {
    OrchestratorState state;
    state.history.delta_t_ms = cfg.delta_t_ms;
    state.rng_seed = cfg.seed;
    state.rng.seed(derive_seed(cfg.seed, "backchannel-clips"));
    return state;
  }
};

struct StepResult {
  MicroTurn system_turn;             // as appended to the history
  std::vector<Action> actions;
  std::optional<std::string> policy_error;
};

namespace detail {

inline void schedule(OrchestratorState& state, const PlaybackModel& model,
                     const std::vector<std::string>& tokens, TimeMs base) {
  TimeMs prev = state.playback_queue.empty() ? base - 1 : state.playback_queue.back().t_ms;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    TimeMs t = std::max(base + model.offset_of(k), prev + 1);
    state.playback_queue.push_back({tokens[k], t});
    prev = t;
  }
  state.next_free_ms = std::max(prev + 1, base + model.offset_of(tokens.size()));
}

}  // namespace detail

/// Emits every queued token due at or before `now_ms`.
inline std::vector<ScheduledToken> advance_playback(OrchestratorState& state, TimeMs now_ms) {
  std::vector<ScheduledToken> emitted;
  state.last_advance_ms = std::max(state.last_advance_ms, now_ms);
  while (!state.playback_queue.empty() && state.playback_queue.front().t_ms <= now_ms) {
    emitted.push_back(std::move(state.playback_queue.front()));
    state.playback_queue.pop_front();
  }
  if (state.phase == Phase::Responding && state.playback_queue.empty()) {
    state.phase = Phase::Idle;
  }
  return emitted;
}

/// One policy round for a flushed user micro-turn. A malformed or role-illegal
/// policy reply is replaced by a silent <user is speaking> turn and reported
/// through `policy_error`; phase and queue are left as they were.
inline StepResult step(OrchestratorState& state, const MicroTurn& user_turn, Policy& policy,
                       const OrchestratorConfig& cfg) {
  if (user_turn.role != Role::User) {
    throw Error(ErrorCode::InvariantViolation, "step expects a user micro-turn");
  }
  if (auto violations = check_micro_turn(user_turn); !violations.empty()) {
    throw Error(ErrorCode::InvariantViolation, violations.front().to_string());
  }

  const TimeMs t_act = user_turn.t_start + cfg.playback.policy_latency_ms;
  state.history.turns.push_back(user_turn);
  if (state.phase == Phase::Idle && user_turn.has_content()) state.phase = Phase::Listening;

  PolicyRequest req{state.history, cfg.max_system_tokens, user_turn.t_start,
                    state.phase == Phase::Responding};
  StepResult result;
  auto fail = [&](std::string why) {
    result.policy_error = std::move(why);
    result.system_turn = fail_safe_response(user_turn.t_start).micro_turn;
    result.actions = {NoOp{t_act}};
  };

  std::optional<MicroTurn> reply;
  try {
    PolicyResponse response = policy.decide(req);
    check_response(response);
    reply = std::move(response.micro_turn);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::PolicyProtocolError && e.code() != ErrorCode::MalformedResponse &&
        e.code() != ErrorCode::IllegalControl && e.code() != ErrorCode::MissingEos) {
      state.history.turns.pop_back();
      throw;
    }
    fail(e.what());
  }

  if (reply) {
    reply->t_start = user_turn.t_start;
    const bool speaking = state.phase == Phase::Responding;
    const auto control = reply->control;
    auto start_utterance = [&] {
      if (speaking) {
        state.playback_queue.clear();
        result.actions.push_back(AbortPlayback{t_act});
      }
      detail::schedule(state, cfg.playback, reply->tokens, t_act);
      state.phase = Phase::Responding;
      result.actions.push_back(EmitSpeech{reply->tokens, t_act, false});
    };
    auto extend_utterance = [&] {
      TimeMs base = speaking ? std::max(t_act, state.next_free_ms) : t_act;
      detail::schedule(state, cfg.playback, reply->tokens, base);
      state.phase = Phase::Responding;
      result.actions.push_back(EmitSpeech{reply->tokens, t_act, true});
    };

    if (control == ControlToken::UserFinishSpeaking) {
      start_utterance();
    } else if (control == ControlToken::UserIsInterrupting) {
      if (speaking) {
        state.playback_queue.clear();
        state.phase = Phase::Listening;
        result.actions.push_back(AbortPlayback{t_act});
      } else {
        result.actions.push_back(NoOp{t_act});
      }
    } else if (control == ControlToken::SystemBackchannel) {
      int clip = uniform_int(state.rng, 0, cfg.backchannel_clips - 1);
      result.actions.push_back(PlayBackchannelClip{"c" + std::to_string(clip), t_act});
    } else if (!control || control == ControlToken::UserBackchannel) {
      // Content without a turn-taking token continues the current response.
      if (reply->has_content() && state.phase == Phase::Listening) {
        fail("response content while no utterance is active");
      } else if (reply->has_content()) {
        extend_utterance();
      } else {
        result.actions.push_back(NoOp{t_act});
      }
    } else {
      result.actions.push_back(NoOp{t_act});
    }
    if (!result.policy_error) result.system_turn = std::move(*reply);
  }

  state.history.turns.push_back(result.system_turn);
  return result;
}

// ---------------------------------------------------------------------------
// Transcript

struct TranscriptRecord {
  TimeMs t_ms = 0;
  std::string kind;
  std::optional<Role> role;
  std::optional<ControlToken> control;
  std::optional<std::vector<std::string>> tokens;
  std::optional<std::string> clip_id;
  std::optional<std::string> detail;

  friend bool operator==(const TranscriptRecord&, const TranscriptRecord&) = default;
};

using SessionTranscript = std::vector<TranscriptRecord>;

namespace kind {
inline constexpr std::string_view kUserEvent = "user_event";
inline constexpr std::string_view kFlush = "flush";
inline constexpr std::string_view kPolicy = "policy";
inline constexpr std::string_view kPolicyError = "policy_error";
inline constexpr std::string_view kEmitSpeech = "emit_speech";
inline constexpr std::string_view kExtendSpeech = "extend_speech";
inline constexpr std::string_view kSpeech = "speech";
inline constexpr std::string_view kAbort = "abort";
inline constexpr std::string_view kBackchannelClip = "backchannel_clip";
inline constexpr std::string_view kNoOp = "noop";
}  // namespace kind

inline nlohmann::ordered_json to_json(const TranscriptRecord& r) {
  nlohmann::ordered_json j;
  j["t_ms"] = r.t_ms;
  j["kind"] = r.kind;
  if (r.role) j["role"] = role_name(*r.role);
  if (r.control) j["control"] = surface(*r.control);
  if (r.tokens) j["tokens"] = *r.tokens;
  if (r.clip_id) j["clip_id"] = *r.clip_id;
  if (r.detail) j["detail"] = *r.detail;
  return j;
}

inline TranscriptRecord record_from_json(const nlohmann::json& j) {
  try {
    TranscriptRecord r;
    r.t_ms = j.at("t_ms").get<TimeMs>();
    r.kind = j.at("kind").get<std::string>();
    if (j.contains("role")) {
      auto role = role_from_name(j["role"].get<std::string>());
      if (!role) throw Error(ErrorCode::BadMessage, "unknown role");
      r.role = role;
    }
    if (j.contains("control")) {
      auto control = control_from_surface(j["control"].get<std::string>());
      if (!control) throw Error(ErrorCode::BadMessage, "unknown control token");
      r.control = control;
    }
    if (j.contains("tokens")) r.tokens = j["tokens"].get<std::vector<std::string>>();
    if (j.contains("clip_id")) r.clip_id = j["clip_id"].get<std::string>();
    if (j.contains("detail")) r.detail = j["detail"].get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMessage, std::string("transcript record: ") + e.what());
  }
}

inline void write_transcript(std::ostream& out, const SessionTranscript& transcript) {
  for (const auto& r : transcript) out << to_json(r).dump() << '\n';
}

inline std::vector<TranscriptRecord> records_for(const StepResult& result) {
  std::vector<TranscriptRecord> out;
  if (result.policy_error) {
    out.push_back({result.actions.empty() ? result.system_turn.t_start
                                          : std::visit([](const auto& a) { return a.t_ms; },
                                                       result.actions.front()),
                   std::string(kind::kPolicyError), Role::System, std::nullopt, std::nullopt,
                   std::nullopt, *result.policy_error});
  }
  for (const auto& action : result.actions) {
    TranscriptRecord r;
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          r.t_ms = a.t_ms;
          if constexpr (std::is_same_v<T, EmitSpeech>) {
            r.kind = a.continuation ? kind::kExtendSpeech : kind::kEmitSpeech;
            r.tokens = a.tokens;
          } else if constexpr (std::is_same_v<T, AbortPlayback>) {
            r.kind = kind::kAbort;
          } else if constexpr (std::is_same_v<T, PlayBackchannelClip>) {
            r.kind = kind::kBackchannelClip;
            r.clip_id = a.clip_id;
          } else {
            r.kind = kind::kNoOp;
          }
        },
        action);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Engine: consumes timestamped events in order on one logical loop. Replay
// and live (wall clock) sessions both drive this class, so identical event
// timings give identical transcripts.

class DuplexEngine {
 public:
  using Sink = std::function<void(const TranscriptRecord&)>;

  DuplexEngine(OrchestratorConfig cfg, Policy& policy, Sink sink,
               TokenModel model = TokenModel::whitespace())
      : cfg_((cfg.check(), cfg)),
        policy_(policy),
        sink_(std::move(sink)),
        ingestor_(std::move(model)),
        clock_(cfg_.delta_t_ms),
        state_(OrchestratorState::initial(cfg_)) {}

  /// Processes every flush and playback instant up to and including `now_ms`.
  void advance_to(TimeMs now_ms) {
    while (true) {
      TimeMs t_flush = clock_.next_flush_ms();
      std::optional<TimeMs> t_play;
      if (!state_.playback_queue.empty()) t_play = state_.playback_queue.front().t_ms;
      if (t_play && *t_play <= t_flush && *t_play <= now_ms) {
        emit_playback(*t_play);
        continue;
      }
      if (t_flush > now_ms) break;
      clock_.advance();
      do_flush(t_flush);
    }
    now_ms_ = std::max(now_ms_, now_ms);
  }

  /// An event exactly on a flush instant belongs to the next interval.
  void push_event(const AsrPartialEvent& ev) {
    if (ev.t_ms < now_ms_) {
      throw Error(ErrorCode::OutOfOrderEvent,
                  "event at " + std::to_string(ev.t_ms) + " ms behind engine time " +
                      std::to_string(now_ms_) + " ms");
    }
    advance_to(ev.t_ms);
    ingestor_.ingest_partial(ev);
    TranscriptRecord r;
    r.t_ms = ev.t_ms;
    r.kind = kind::kUserEvent;
    r.role = Role::User;
    r.tokens = split_canonical(ev.text_delta);
    sink_(r);
  }

  TimeMs next_deadline() const {
    TimeMs t = clock_.next_flush_ms();
    if (!state_.playback_queue.empty()) t = std::min(t, state_.playback_queue.front().t_ms);
    return t;
  }

  const OrchestratorState& state() const { return state_; }
  const OrchestratorConfig& config() const { return cfg_; }
  TimeMs now_ms() const { return now_ms_; }

 private:
  void emit_playback(TimeMs until) {
    for (auto& tok : advance_playback(state_, until)) {
      TranscriptRecord r;
      r.t_ms = tok.t_ms;
      r.kind = kind::kSpeech;
      r.role = Role::System;
      r.tokens = std::vector<std::string>{std::move(tok.token)};
      sink_(r);
    }
  }

  void do_flush(TimeMs t) {
    MicroTurn user = ingestor_.flush(t);
    {
      TranscriptRecord r;
      r.t_ms = t;
      r.kind = kind::kFlush;
      r.role = Role::User;
      r.control = user.control;
      r.tokens = user.tokens;
      sink_(r);
    }
    TimeMs t_act = t + cfg_.playback.policy_latency_ms;
    if (t_act > t) emit_playback(t_act);

    StepResult result = step(state_, user, policy_, cfg_);
    TranscriptRecord r;
    r.t_ms = t_act;
    r.kind = kind::kPolicy;
    r.role = Role::System;
    r.control = result.system_turn.control;
    r.tokens = result.system_turn.tokens;
    sink_(r);
    for (const auto& rec : records_for(result)) sink_(rec);
    now_ms_ = std::max(now_ms_, t_act);
  }

  OrchestratorConfig cfg_;
  Policy& policy_;
  Sink sink_;
  Ingestor ingestor_;
  FlushClock clock_;
  OrchestratorState state_;
  TimeMs now_ms_ = 0;
};

struct SessionConfig {
  OrchestratorConfig orchestrator;
  TimeMs horizon_ms = 0;  // last instant processed; 0 means last event time
};

/// Replays `events` through a fresh engine. Deterministic in (events, policy,
/// config, seed).
inline SessionTranscript run_session(std::span<const AsrPartialEvent> events, Policy& policy,
                                     const SessionConfig& config) {
  SessionTranscript transcript;
  DuplexEngine engine(config.orchestrator, policy,
                      [&](const TranscriptRecord& r) { transcript.push_back(r); });
  for (std::size_t i = 0; i < events.size(); ++i) {
    try {
      engine.push_event(events[i]);
    } catch (const Error& e) {
      throw Error(e.code(), "event #" + std::to_string(i) + ": " + e.detail());
    }
  }
  TimeMs horizon = config.horizon_ms;
  if (horizon == 0 && !events.empty()) horizon = events.back().t_ms;
  engine.advance_to(horizon);
  return transcript;
}

}  // namespace microturn
