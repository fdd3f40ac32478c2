#pragma once

// Converts utterance-level text dialogues into duplex micro-turn training
// sequences. Passes run in a fixed order on one per-dialogue RNG stream:
// segmentation, interruptions, user backchannels, pauses, thinking, then
// system backchannel markers.

#include <algorithm>
#include <istream>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/protocol.hpp"
#include "microturn/rng.hpp"

namespace microturn {

inline constexpr std::string_view kBcMarker = "<BC/>";

struct SourceTurn {
  Role role = Role::User;
  std::string text;
};

struct SourceDialogue {
  std::string id;
  std::vector<SourceTurn> turns;
};

struct ConstructionConfig {
  int user_len_min = 1;
  int user_len_max = 7;
  int system_len = 10;
  double p_pause = 0.10;
  int pause_turns_min = 1;
  int pause_turns_max = 5;
  double p_interrupt = 0.30;
  double p_user_backchannel = 0.01;
  int thinking_turns_min = 1;
  int thinking_turns_max = 20;
  bool enable_system_backchannel = false;
  bool pause_in_interrupts = true;
  std::vector<std::string> user_backchannel_lexicon = {"yes", "okay", "uh-huh", "right"};
  std::uint64_t seed = 0;

  void check() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw Error(ErrorCode::InvalidConfig, std::string(name) + " must be in [0,1]");
      }
    };
    auto range = [](int lo, int hi, const char* name) {
      if (lo < 1 || lo > hi) {
        throw Error(ErrorCode::InvalidConfig, std::string(name) + " needs 1 <= min <= max");
      }
    };
    prob(p_pause, "p_pause");
    prob(p_interrupt, "p_interrupt");
    prob(p_user_backchannel, "p_user_backchannel");
    range(user_len_min, user_len_max, "user_len");
    range(system_len, system_len, "system_len");
    range(pause_turns_min, pause_turns_max, "pause_turns");
    range(thinking_turns_min, thinking_turns_max, "thinking_turns");
    if (user_backchannel_lexicon.empty()) {
      throw Error(ErrorCode::InvalidConfig, "user_backchannel_lexicon is empty");
    }
    for (const auto& w : user_backchannel_lexicon) {
      if (w.empty() || detail::has_space(w) || is_reserved_token(w)) {
        throw Error(ErrorCode::InvalidConfig, "lexicon entries must be single plain tokens");
      }
    }
  }
};

/// Where a micro-turn in a constructed sequence came from.
enum class Origin {
  UserChunk,
  UserSilence,    // <no voice> between two chunks of a system response
  UserPause,
  UserThinking,
  UserTrailing,   // <no voice> closing the dialogue
  UserBackchannelWord,
  SystemListen,   // reply to a user chunk
  SystemResponse,
  SystemPause,
  SystemThinking,
};

struct SegTurn {
  MicroTurn turn;
  Origin origin = Origin::UserChunk;
  int exchange = 0;
  bool final_chunk = false;  // last chunk of its user turn
  bool bc_after = false;     // a <BC/> marker follows this user chunk
};

struct ExchangeInfo {
  bool has_response = false;
  bool interrupted = false;   // its response was cut short
  bool interrupter = false;   // its question cut the previous response
};

struct DuplexSequence {
  std::string id;
  std::vector<SegTurn> turns;
  std::vector<ExchangeInfo> exchanges;

  std::vector<MicroTurn> micro_turns() const {
    std::vector<MicroTurn> out;
    out.reserve(turns.size());
    for (const auto& t : turns) out.push_back(t.turn);
    return out;
  }
};

struct InjectionStats {
  std::size_t dialogues = 0;
  std::size_t user_chunks = 0;
  std::size_t user_chunk_draws = 0;        // drawn lengths, before truncation
  double user_chunk_draw_sum = 0;
  std::size_t system_chunks = 0;
  std::size_t pause_eligible = 0;
  std::size_t pause_inserted = 0;
  std::size_t pause_turns = 0;
  std::size_t interrupt_eligible = 0;
  std::size_t interrupt_applied = 0;
  std::size_t interrupt_no_followup = 0;
  std::size_t interrupt_ufs_precedence = 0;
  std::size_t user_bc_eligible = 0;
  std::size_t user_bc_applied = 0;
  std::size_t thinking_inserted = 0;
  std::size_t thinking_turns = 0;
  std::size_t bc_markers = 0;
  std::size_t bc_applied = 0;
  std::size_t bc_dropped = 0;

  InjectionStats& operator+=(const InjectionStats& o) {
    dialogues += o.dialogues;
    user_chunks += o.user_chunks;
    user_chunk_draws += o.user_chunk_draws;
    user_chunk_draw_sum += o.user_chunk_draw_sum;
    system_chunks += o.system_chunks;
    pause_eligible += o.pause_eligible;
    pause_inserted += o.pause_inserted;
    pause_turns += o.pause_turns;
    interrupt_eligible += o.interrupt_eligible;
    interrupt_applied += o.interrupt_applied;
    interrupt_no_followup += o.interrupt_no_followup;
    interrupt_ufs_precedence += o.interrupt_ufs_precedence;
    user_bc_eligible += o.user_bc_eligible;
    user_bc_applied += o.user_bc_applied;
    thinking_inserted += o.thinking_inserted;
    thinking_turns += o.thinking_turns;
    bc_markers += o.bc_markers;
    bc_applied += o.bc_applied;
    bc_dropped += o.bc_dropped;
    return *this;
  }
};

namespace detail {

inline double ratio(std::size_t a, std::size_t b) {
  return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
}

struct MarkedTokens {
  std::vector<std::string> tokens;
  std::set<std::size_t> markers;  // token counts after which a marker sits
};

inline MarkedTokens strip_markers(std::string_view text) {
  MarkedTokens out;
  for (auto word : split_canonical(text)) {
    std::size_t pos = 0;
    while ((pos = word.find(kBcMarker)) != std::string::npos) {
      bool at_start = pos == 0;
      bool at_end = pos + kBcMarker.size() == word.size();
      if (!at_start && !at_end) {
        throw Error(ErrorCode::MisalignedMarker, "<BC/> inside '" + word + "'");
      }
      if (at_start) {
        if (out.tokens.empty()) throw Error(ErrorCode::MisalignedMarker, "<BC/> before any token");
        out.markers.insert(out.tokens.size());
        word.erase(0, kBcMarker.size());
      } else {
        out.tokens.push_back(word.substr(0, pos));
        out.markers.insert(out.tokens.size());
        word.clear();
      }
    }
    if (!word.empty()) out.tokens.push_back(std::move(word));
  }
  return out;
}

inline std::size_t find_turn(const DuplexSequence& seq, std::size_t from, auto&& pred) {
  for (std::size_t i = from; i < seq.turns.size(); ++i) {
    if (pred(seq.turns[i])) return i;
  }
  return seq.turns.size();
}

inline std::vector<std::size_t> response_positions(const DuplexSequence& seq, int exchange) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < seq.turns.size(); ++i) {
    if (seq.turns[i].exchange == exchange && seq.turns[i].origin == Origin::SystemResponse) {
      out.push_back(i);
    }
  }
  return out;
}

inline void check_source(const SourceDialogue& d) {
  if (d.turns.empty()) throw Error(ErrorCode::InvariantViolation, d.id + ": empty dialogue");
  for (std::size_t i = 0; i < d.turns.size(); ++i) {
    Role expected = i % 2 == 0 ? Role::User : Role::System;
    if (d.turns[i].role != expected) {
      throw Error(ErrorCode::InvariantViolation,
                  d.id + ": turn " + std::to_string(i) + " breaks user/system alternation");
    }
  }
}

}  // namespace detail

/// Chunks every turn into micro-turns. User chunks draw their length from
/// [user_len_min, user_len_max] and stop early at a <BC/> marker or at the end
/// of the turn; system chunks are system_len tokens.
inline DuplexSequence segment_dialogue(const SourceDialogue& d, const ConstructionConfig& cfg,
                                       Rng& rng, InjectionStats* stats = nullptr) {
  cfg.check();
  detail::check_source(d);
  InjectionStats local;
  DuplexSequence seq;
  seq.id = d.id;
  const int exchanges = static_cast<int>((d.turns.size() + 1) / 2);
  seq.exchanges.resize(static_cast<std::size_t>(exchanges));

  for (int e = 0; e < exchanges; ++e) {
    const auto& user = d.turns[static_cast<std::size_t>(2 * e)];
    const bool has_reply = static_cast<std::size_t>(2 * e + 1) < d.turns.size();
    auto marked = detail::strip_markers(user.text);
    if (marked.tokens.empty()) {
      throw Error(ErrorCode::EmptyTurn, d.id + ": user turn " + std::to_string(e) + " is empty");
    }
    std::vector<std::string> reply;
    if (has_reply) {
      reply = split_canonical(d.turns[static_cast<std::size_t>(2 * e + 1)].text);
      if (reply.empty()) {
        throw Error(ErrorCode::EmptyTurn, d.id + ": system turn " + std::to_string(e) + " is empty");
      }
      for (const auto& tok : reply) {
        if (is_reserved_token(tok)) {
          throw Error(ErrorCode::InvariantViolation, d.id + ": control token in system text");
        }
      }
    }
    seq.exchanges[static_cast<std::size_t>(e)].has_response = has_reply;

    const auto& tokens = marked.tokens;
    std::size_t pos = 0;
    while (pos < tokens.size()) {
      auto drawn = static_cast<std::size_t>(uniform_int(rng, cfg.user_len_min, cfg.user_len_max));
      std::size_t end = std::min(pos + drawn, tokens.size());
      if (auto m = marked.markers.upper_bound(pos); m != marked.markers.end() && *m < end) end = *m;
      ++local.user_chunk_draws;
      local.user_chunk_draw_sum += static_cast<double>(drawn);
      ++local.user_chunks;
      const bool final_chunk = end == tokens.size();
      SegTurn u{user_turn({tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                           tokens.begin() + static_cast<std::ptrdiff_t>(end)}),
                Origin::UserChunk, e, final_chunk, marked.markers.count(end) > 0};
      if (u.bc_after) ++local.bc_markers;
      seq.turns.push_back(std::move(u));
      pos = end;

      if (final_chunk && has_reply) {
        for (std::size_t r = 0; r < reply.size(); r += static_cast<std::size_t>(cfg.system_len)) {
          std::size_t r_end = std::min(reply.size(), r + static_cast<std::size_t>(cfg.system_len));
          std::vector<std::string> chunk(reply.begin() + static_cast<std::ptrdiff_t>(r),
                                         reply.begin() + static_cast<std::ptrdiff_t>(r_end));
          if (r > 0) seq.turns.push_back({user_silence(), Origin::UserSilence, e});
          std::optional<ControlToken> control;
          if (r == 0) control = ControlToken::UserFinishSpeaking;
          seq.turns.push_back({system_turn(control, std::move(chunk)), Origin::SystemResponse, e});
          ++local.system_chunks;
        }
      } else {
        seq.turns.push_back(
            {system_turn(ControlToken::UserIsSpeaking), Origin::SystemListen, e});
      }
    }
  }
  if (seq.exchanges.back().has_response) {
    seq.turns.push_back({user_silence(), Origin::UserTrailing, exchanges - 1});
  }
  local.dialogues = 1;
  if (stats) *stats += local;
  return seq;
}

/// Cuts the response of `exchange` after its `boundary`-th chunk and lets the
/// next user question start there. The system reply to the first interrupting
/// chunk becomes <user is interrupting>, unless that chunk already ends the
/// question (<user finish speaking> takes precedence).
inline void interrupt_exchange(DuplexSequence& seq, int exchange, std::size_t boundary,
                               InjectionStats* stats = nullptr) {
  const auto e = static_cast<std::size_t>(exchange);
  if (e >= seq.exchanges.size() || !seq.exchanges[e].has_response) {
    throw Error(ErrorCode::InvariantViolation, "exchange has no response to interrupt");
  }
  if (e + 1 >= seq.exchanges.size()) {
    throw Error(ErrorCode::NoFollowupQuestion, seq.id + ": no user turn after exchange " +
                                                   std::to_string(exchange));
  }
  auto chunks = detail::response_positions(seq, exchange);
  if (boundary < 1 || boundary >= chunks.size()) {
    throw Error(ErrorCode::OutOfRange, "boundary must lie strictly inside the response");
  }
  std::size_t cut = chunks[boundary - 1] + 1;
  std::size_t next = detail::find_turn(seq, cut, [&](const SegTurn& t) {
    return t.exchange == exchange + 1;
  });
  seq.turns.erase(seq.turns.begin() + static_cast<std::ptrdiff_t>(cut),
                  seq.turns.begin() + static_cast<std::ptrdiff_t>(next));
  // seq.turns[cut] is now the first interrupting user chunk.
  auto& reply = seq.turns[cut + 1];
  if (reply.turn.is(ControlToken::UserIsSpeaking)) {
    reply.turn.control = ControlToken::UserIsInterrupting;
  } else if (stats) {
    ++stats->interrupt_ufs_precedence;
  }
  seq.exchanges[e].interrupted = true;
  seq.exchanges[e + 1].interrupter = true;
  if (stats) ++stats->interrupt_applied;
}

inline void inject_interruptions(DuplexSequence& seq, const ConstructionConfig& cfg, Rng& rng,
                                 InjectionStats* stats = nullptr) {
  InjectionStats local;
  for (std::size_t e = 0; e < seq.exchanges.size(); ++e) {
    if (!seq.exchanges[e].has_response) continue;
    if (e + 1 >= seq.exchanges.size()) {
      ++local.interrupt_no_followup;
      continue;
    }
    auto chunks = detail::response_positions(seq, static_cast<int>(e));
    if (chunks.size() < 2) continue;
    ++local.interrupt_eligible;
    if (!bernoulli(rng, cfg.p_interrupt)) continue;
    auto boundary = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<int>(chunks.size()) - 1));
    interrupt_exchange(seq, static_cast<int>(e), boundary, &local);
  }
  if (stats) *stats += local;
}

/// A user acknowledgement may replace a <no voice> between two response
/// chunks; the next chunk is then supervised as <user backchannel> and keeps
/// its content.
inline void inject_user_backchannels(DuplexSequence& seq, const ConstructionConfig& cfg, Rng& rng,
                                     InjectionStats* stats = nullptr) {
  InjectionStats local;
  for (std::size_t i = 1; i + 1 < seq.turns.size(); ++i) {
    auto& u = seq.turns[i];
    if (u.origin != Origin::UserSilence) continue;
    if (seq.turns[i - 1].origin != Origin::SystemResponse ||
        seq.turns[i + 1].origin != Origin::SystemResponse) {
      continue;
    }
    ++local.user_bc_eligible;
    if (!bernoulli(rng, cfg.p_user_backchannel)) continue;
    const auto& lexicon = cfg.user_backchannel_lexicon;
    const auto& word = lexicon[static_cast<std::size_t>(
        uniform_int(rng, 0, static_cast<int>(lexicon.size()) - 1))];
    u.turn = user_turn({word});
    u.origin = Origin::UserBackchannelWord;
    seq.turns[i + 1].turn.control = ControlToken::UserBackchannel;
    ++local.user_bc_applied;
  }
  if (stats) *stats += local;
}

/// After a non-final user chunk, with p_pause, k silent pairs
/// (<no voice>, <user is speaking>).
inline void inject_pauses(DuplexSequence& seq, const ConstructionConfig& cfg, Rng& rng,
                          InjectionStats* stats = nullptr) {
  InjectionStats local;
  std::vector<SegTurn> out;
  out.reserve(seq.turns.size());
  for (std::size_t i = 0; i < seq.turns.size(); ++i) {
    out.push_back(seq.turns[i]);
    const auto& t = seq.turns[i];
    if (t.origin != Origin::UserChunk || t.final_chunk) continue;
    if (!cfg.pause_in_interrupts && seq.exchanges[static_cast<std::size_t>(t.exchange)].interrupter) {
      continue;
    }
    // Keep the reply to the chunk in front of the pause.
    out.push_back(seq.turns[++i]);
    ++local.pause_eligible;
    if (!bernoulli(rng, cfg.p_pause)) continue;
    int k = uniform_int(rng, cfg.pause_turns_min, cfg.pause_turns_max);
    ++local.pause_inserted;
    local.pause_turns += static_cast<std::size_t>(k);
    for (int j = 0; j < k; ++j) {
      out.push_back({user_silence(), Origin::UserPause, t.exchange});
      out.push_back({system_turn(ControlToken::UserIsSpeaking), Origin::SystemPause, t.exchange});
    }
  }
  seq.turns = std::move(out);
  if (stats) *stats += local;
}

/// After every completed response, k in [thinking_turns_min, thinking_turns_max]
/// pairs (<no voice>, <user is thinking>).
inline void inject_thinking(DuplexSequence& seq, const ConstructionConfig& cfg, Rng& rng,
                            InjectionStats* stats = nullptr) {
  InjectionStats local;
  for (std::size_t e = 0; e < seq.exchanges.size(); ++e) {
    const auto& info = seq.exchanges[e];
    if (!info.has_response || info.interrupted) continue;
    auto chunks = detail::response_positions(seq, static_cast<int>(e));
    if (chunks.empty()) continue;
    int k = uniform_int(rng, cfg.thinking_turns_min, cfg.thinking_turns_max);
    std::vector<SegTurn> pairs;
    for (int j = 0; j < k; ++j) {
      pairs.push_back({user_silence(), Origin::UserThinking, static_cast<int>(e)});
      pairs.push_back({system_turn(ControlToken::UserIsThinking), Origin::SystemThinking,
                       static_cast<int>(e)});
    }
    seq.turns.insert(seq.turns.begin() + static_cast<std::ptrdiff_t>(chunks.back() + 1),
                     pairs.begin(), pairs.end());
    ++local.thinking_inserted;
    local.thinking_turns += static_cast<std::size_t>(k);
  }
  if (stats) *stats += local;
}

/// Turns the reply after each marked user chunk into <system backchannel>
/// when it would otherwise be <user is speaking>.
inline void apply_bc_markers(DuplexSequence& seq, const ConstructionConfig& cfg,
                             InjectionStats* stats = nullptr) {
  InjectionStats local;
  for (std::size_t i = 0; i + 1 < seq.turns.size(); ++i) {
    const auto& u = seq.turns[i];
    if (u.origin != Origin::UserChunk || !u.bc_after) continue;
    auto& reply = seq.turns[i + 1].turn;
    if (cfg.enable_system_backchannel && reply.is(ControlToken::UserIsSpeaking)) {
      reply.control = ControlToken::SystemBackchannel;
      ++local.bc_applied;
    } else {
      ++local.bc_dropped;
    }
  }
  if (stats) *stats += local;
}

/// Per-dialogue RNG stream, independent of processing order.
inline Rng dialogue_rng(const ConstructionConfig& cfg, std::string_view dialogue_id) {
  return Rng(derive_seed(cfg.seed, dialogue_id));
}

inline DuplexSequence construct_sequence(const SourceDialogue& d, const ConstructionConfig& cfg,
                                         InjectionStats* stats = nullptr) {
  Rng rng = dialogue_rng(cfg, d.id);
  DuplexSequence seq = segment_dialogue(d, cfg, rng, stats);
  inject_interruptions(seq, cfg, rng, stats);
  inject_user_backchannels(seq, cfg, rng, stats);
  inject_pauses(seq, cfg, rng, stats);
  inject_thinking(seq, cfg, rng, stats);
  apply_bc_markers(seq, cfg, stats);
  return seq;
}

// ---------------------------------------------------------------------------
// Training sequences

constexpr double loss_weight(ControlToken token) {
  switch (token) {
    case ControlToken::UserIsSpeaking: return 1.0;
    case ControlToken::UserFinishSpeaking: return 10.0;
    case ControlToken::UserIsInterrupting: return 5.0;
    case ControlToken::UserBackchannel: return 2.0;
    case ControlToken::UserIsThinking: return 1.0;
    case ControlToken::SystemBackchannel: return 3.0;
    default: return 1.0;
  }
}

struct TrainingSequence {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<std::string> tokens;
  std::vector<int> loss_mask;
  std::vector<double> loss_weight;

  friend bool operator==(const TrainingSequence&, const TrainingSequence&) = default;
};

/// Flattens micro-turns; only system micro-turn tokens (including their
/// <EOS>) are supervised.
inline TrainingSequence emit_training_sequence(std::span<const MicroTurn> turns,
                                               std::string id = {}, std::uint64_t seed = 0) {
  TrainingSequence ts;
  ts.id = std::move(id);
  ts.seed = seed;
  for (const auto& turn : turns) {
    const bool supervised = turn.role == Role::System;
    for (auto& tok : render_micro_turn(turn)) {
      double w = 1.0;
      if (supervised) {
        if (auto c = control_from_surface(tok)) w = loss_weight(*c);
      }
      ts.tokens.push_back(std::move(tok));
      ts.loss_mask.push_back(supervised ? 1 : 0);
      ts.loss_weight.push_back(w);
    }
  }
  return ts;
}

inline TrainingSequence emit_training_sequence(const DuplexSequence& seq,
                                               const ConstructionConfig& cfg) {
  auto turns = seq.micro_turns();
  return emit_training_sequence(turns, seq.id, cfg.seed);
}

/// Rebuilds the micro-turns of a flattened sequence: roles alternate from
/// user, split at every <EOS>.
inline std::vector<MicroTurn> micro_turns_of(const TrainingSequence& ts) {
  std::vector<MicroTurn> turns;
  Role role = Role::User;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < ts.tokens.size(); ++i) {
    if (ts.tokens[i] != kEos) continue;
    std::span<const std::string> piece(ts.tokens.data() + begin, i + 1 - begin);
    turns.push_back(parse_micro_turn(piece, role));
    role = role == Role::User ? Role::System : Role::User;
    begin = i + 1;
  }
  if (begin != ts.tokens.size()) throw Error(ErrorCode::MissingEos, ts.id + ": trailing tokens");
  return turns;
}

/// Structural, mask and weight checks for one emitted sequence.
inline std::vector<std::string> validate_training_sequence(const TrainingSequence& ts) {
  std::vector<std::string> problems;
  if (ts.tokens.size() != ts.loss_mask.size() || ts.tokens.size() != ts.loss_weight.size()) {
    problems.push_back("tokens, loss_mask and loss_weight differ in length");
    return problems;
  }
  std::vector<MicroTurn> turns;
  try {
    turns = micro_turns_of(ts);
  } catch (const Error& e) {
    problems.push_back(e.what());
    return problems;
  }
  for (const auto& v : validate_history(turns)) problems.push_back(v.to_string());

  Role role = Role::User;
  for (std::size_t i = 0; i < ts.tokens.size(); ++i) {
    const bool supervised = role == Role::System;
    if (ts.loss_mask[i] != (supervised ? 1 : 0)) {
      problems.push_back("loss_mask wrong at token " + std::to_string(i));
    }
    double expected = 1.0;
    if (supervised) {
      if (auto c = control_from_surface(ts.tokens[i])) expected = loss_weight(*c);
    }
    if (ts.loss_weight[i] != expected) {
      problems.push_back("loss_weight wrong at token " + std::to_string(i));
    }
    if (ts.tokens[i] == kEos) role = role == Role::User ? Role::System : Role::User;
  }
  return problems;
}

// ---------------------------------------------------------------------------
// I/O

inline SourceDialogue dialogue_from_json(const nlohmann::json& j) {
  try {
    SourceDialogue d;
    d.id = j.at("id").get<std::string>();
    for (const auto& t : j.at("turns")) {
      auto role = role_from_name(t.at("role").get<std::string>());
      if (!role) throw Error(ErrorCode::BadMessage, d.id + ": unknown role");
      d.turns.push_back({*role, t.at("text").get<std::string>()});
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMessage, std::string("dialogue record: ") + e.what());
  }
}

inline nlohmann::ordered_json to_json(const SourceDialogue& d) {
  nlohmann::ordered_json j;
  j["id"] = d.id;
  j["turns"] = nlohmann::ordered_json::array();
  for (const auto& t : d.turns) j["turns"].push_back({{"role", role_name(t.role)}, {"text", t.text}});
  return j;
}

inline std::vector<SourceDialogue> read_corpus(std::istream& in) {
  std::vector<SourceDialogue> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(dialogue_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BadMessage, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::ordered_json to_json(const TrainingSequence& ts) {
  nlohmann::ordered_json j;
  j["id"] = ts.id;
  j["seed"] = ts.seed;
  j["tokens"] = ts.tokens;
  j["loss_mask"] = ts.loss_mask;
  auto weights = nlohmann::ordered_json::array();
  for (double w : ts.loss_weight) {
    if (w == static_cast<double>(static_cast<long long>(w))) {
      weights.push_back(static_cast<long long>(w));
    } else {
      weights.push_back(w);
    }
  }
  j["loss_weight"] = std::move(weights);
  return j;
}

inline TrainingSequence training_sequence_from_json(const nlohmann::json& j) {
  try {
    TrainingSequence ts;
    ts.id = j.at("id").get<std::string>();
    ts.seed = j.value("seed", std::uint64_t{0});
    ts.tokens = j.at("tokens").get<std::vector<std::string>>();
    ts.loss_mask = j.at("loss_mask").get<std::vector<int>>();
    ts.loss_weight = j.at("loss_weight").get<std::vector<double>>();
    return ts;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMessage, std::string("training record: ") + e.what());
  }
}

inline nlohmann::ordered_json stats_to_json(const InjectionStats& s, const ConstructionConfig& cfg) {
  using detail::ratio;
  nlohmann::ordered_json j;
  j["dialogues"] = s.dialogues;
  j["user_chunks"] = s.user_chunks;
  j["user_chunk_len_mean"] = s.user_chunk_draws ? s.user_chunk_draw_sum / static_cast<double>(s.user_chunk_draws) : 0.0;
  j["system_chunks"] = s.system_chunks;
  j["pause"] = {{"eligible", s.pause_eligible},
                {"inserted", s.pause_inserted},
                {"rate", ratio(s.pause_inserted, s.pause_eligible)},
                {"configured", cfg.p_pause},
                {"k_mean", ratio(s.pause_turns, s.pause_inserted)}};
  j["interrupt"] = {{"eligible", s.interrupt_eligible},
                    {"applied", s.interrupt_applied},
                    {"rate", ratio(s.interrupt_applied, s.interrupt_eligible)},
                    {"configured", cfg.p_interrupt},
                    {"skipped_no_followup", s.interrupt_no_followup},
                    {"finish_speaking_precedence", s.interrupt_ufs_precedence}};
  j["user_backchannel"] = {{"eligible", s.user_bc_eligible},
                           {"applied", s.user_bc_applied},
                           {"rate", ratio(s.user_bc_applied, s.user_bc_eligible)},
                           {"configured", cfg.p_user_backchannel}};
  j["thinking"] = {{"inserted", s.thinking_inserted},
                   {"k_mean", ratio(s.thinking_turns, s.thinking_inserted)}};
  j["system_backchannel"] = {{"markers", s.bc_markers},
                             {"applied", s.bc_applied},
                             {"dropped", s.bc_dropped}};
  return j;
}

inline ConstructionConfig construction_config_from_json(const nlohmann::json& j,
                                                        ConstructionConfig cfg = {}) {
  try {
    cfg.user_len_min = j.value("user_len_min", cfg.user_len_min);
    cfg.user_len_max = j.value("user_len_max", cfg.user_len_max);
    cfg.system_len = j.value("system_len", cfg.system_len);
    cfg.p_pause = j.value("p_pause", cfg.p_pause);
    cfg.pause_turns_min = j.value("pause_turns_min", cfg.pause_turns_min);
    cfg.pause_turns_max = j.value("pause_turns_max", cfg.pause_turns_max);
    cfg.p_interrupt = j.value("p_interrupt", cfg.p_interrupt);
    cfg.p_user_backchannel = j.value("p_user_backchannel", cfg.p_user_backchannel);
    cfg.thinking_turns_min = j.value("thinking_turns_min", cfg.thinking_turns_min);
    cfg.thinking_turns_max = j.value("thinking_turns_max", cfg.thinking_turns_max);
    cfg.enable_system_backchannel = j.value("enable_system_backchannel", cfg.enable_system_backchannel);
    cfg.pause_in_interrupts = j.value("pause_in_interrupts", cfg.pause_in_interrupts);
    cfg.user_backchannel_lexicon = j.value("user_backchannel_lexicon", cfg.user_backchannel_lexicon);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  cfg.check();
  return cfg;
}

struct ConstructedCorpus {
  std::vector<TrainingSequence> sequences;
  InjectionStats stats;
};

/// Builds all dialogues; output order and content do not depend on `threads`.
inline ConstructedCorpus construct_corpus(const std::vector<SourceDialogue>& dialogues,
                                          const ConstructionConfig& cfg, unsigned threads = 1) {
  cfg.check();
  ConstructedCorpus out;
  out.sequences.resize(dialogues.size());
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(dialogues.size())));
  std::vector<InjectionStats> stats(threads);
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](unsigned w) {
    try {
      for (std::size_t i = w; i < dialogues.size(); i += threads) {
        auto seq = construct_sequence(dialogues[i], cfg, &stats[w]);
        out.sequences[i] = emit_training_sequence(seq, cfg);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (const auto& s : stats) out.stats += s;
  return out;
}

}  // namespace microturn
