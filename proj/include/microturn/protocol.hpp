#pragma once

// Micro-turn data model, control-token vocabulary and the canonical token
// stream form shared by the policy, the data constructor and the wire layer.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "microturn/error.hpp"

namespace microturn {

/// Milliseconds since session start.
using TimeMs = std::int64_t;

enum class ControlToken {
  NoVoice,
  UserIsSpeaking,
  UserFinishSpeaking,
  UserIsInterrupting,
  UserBackchannel,
  UserIsThinking,
  SystemBackchannel,
  Eos,
};

enum class Role { User, System };

inline constexpr std::array<ControlToken, 8> kAllControlTokens = {
    ControlToken::NoVoice,           ControlToken::UserIsSpeaking,
    ControlToken::UserFinishSpeaking, ControlToken::UserIsInterrupting,
    ControlToken::UserBackchannel,   ControlToken::UserIsThinking,
    ControlToken::SystemBackchannel, ControlToken::Eos,
};

/// The six tokens a system micro-turn may open with.
inline constexpr std::array<ControlToken, 6> kSystemControlTokens = {
    ControlToken::UserIsSpeaking,    ControlToken::UserFinishSpeaking,
    ControlToken::UserIsInterrupting, ControlToken::UserBackchannel,
    ControlToken::UserIsThinking,    ControlToken::SystemBackchannel,
};

inline constexpr std::string_view kEos = "<EOS>";

constexpr std::string_view surface(ControlToken token) {
  switch (token) {
    case ControlToken::NoVoice: return "<no voice>";
    case ControlToken::UserIsSpeaking: return "<user is speaking>";
    case ControlToken::UserFinishSpeaking: return "<user finish speaking>";
    case ControlToken::UserIsInterrupting: return "<user is interrupting>";
    case ControlToken::UserBackchannel: return "<user backchannel>";
    case ControlToken::UserIsThinking: return "<user is thinking>";
    case ControlToken::SystemBackchannel: return "<system backchannel>";
    case ControlToken::Eos: return kEos;
  }
  return "";
}

inline std::optional<ControlToken> control_from_surface(std::string_view text) {
  for (ControlToken token : kAllControlTokens) {
    if (surface(token) == text) return token;
  }
  return std::nullopt;
}

/// Short snake_case identifiers used in JSON records.
constexpr std::string_view control_name(ControlToken token) {
  switch (token) {
    case ControlToken::NoVoice: return "no_voice";
    case ControlToken::UserIsSpeaking: return "user_is_speaking";
    case ControlToken::UserFinishSpeaking: return "user_finish_speaking";
    case ControlToken::UserIsInterrupting: return "user_is_interrupting";
    case ControlToken::UserBackchannel: return "user_backchannel";
    case ControlToken::UserIsThinking: return "user_is_thinking";
    case ControlToken::SystemBackchannel: return "system_backchannel";
    case ControlToken::Eos: return "eos";
  }
  return "";
}

inline std::optional<ControlToken> control_from_name(std::string_view name) {
  for (ControlToken token : kAllControlTokens) {
    if (control_name(token) == name) return token;
  }
  return std::nullopt;
}

constexpr std::string_view role_name(Role role) {
  return role == Role::User ? "user" : "system";
}

inline std::optional<Role> role_from_name(std::string_view name) {
  if (name == "user") return Role::User;
  if (name == "system") return Role::System;
  return std::nullopt;
}

/// Whether `token` may open a micro-turn of `role`. <EOS> never opens a turn.
constexpr bool control_legal_for(ControlToken token, Role role) {
  if (token == ControlToken::Eos) return false;
  if (token == ControlToken::NoVoice) return role == Role::User;
  return role == Role::System;
}

/// Controls after which the micro-turn ends immediately with <EOS>.
constexpr bool control_requires_empty(ControlToken token) {
  switch (token) {
    case ControlToken::NoVoice:
    case ControlToken::UserIsSpeaking:
    case ControlToken::UserIsInterrupting:
    case ControlToken::UserIsThinking:
    case ControlToken::SystemBackchannel:
      return true;
    default:
      return false;
  }
}

inline bool is_reserved_token(std::string_view token) {
  return control_from_surface(token).has_value();
}

struct MicroTurn {
  Role role = Role::User;
  std::optional<ControlToken> control;
  std::vector<std::string> tokens;
  TimeMs t_start = 0;

  bool has_content() const { return !tokens.empty(); }
  bool is(ControlToken token) const { return control == token; }

  friend bool operator==(const MicroTurn&, const MicroTurn&) = default;
};

inline MicroTurn user_turn(std::vector<std::string> tokens, TimeMs t = 0) {
  return MicroTurn{Role::User, std::nullopt, std::move(tokens), t};
}

inline MicroTurn user_silence(TimeMs t = 0) {
  return MicroTurn{Role::User, ControlToken::NoVoice, {}, t};
}

inline MicroTurn system_turn(std::optional<ControlToken> control,
                             std::vector<std::string> tokens = {}, TimeMs t = 0) {
  return MicroTurn{Role::System, control, std::move(tokens), t};
}

enum class Rule {
  Alternation,
  FirstTurnUser,
  TimeOrder,
  RoleLegality,
  EosAsControl,
  ControlContent,
  SilentUserTurn,
  EmptySystemTurn,
  ReservedToken,
  MalformedToken,
  NonPositiveDeltaT,
};

constexpr std::string_view rule_name(Rule rule) {
  switch (rule) {
    case Rule::Alternation: return "AlternationViolation";
    case Rule::FirstTurnUser: return "FirstTurnUser";
    case Rule::TimeOrder: return "TimeOrder";
    case Rule::RoleLegality: return "RoleLegality";
    case Rule::EosAsControl: return "EosAsControl";
    case Rule::ControlContent: return "ControlContent";
    case Rule::SilentUserTurn: return "SilentUserTurn";
    case Rule::EmptySystemTurn: return "EmptySystemTurn";
    case Rule::ReservedToken: return "ReservedToken";
    case Rule::MalformedToken: return "MalformedToken";
    case Rule::NonPositiveDeltaT: return "NonPositiveDeltaT";
  }
  return "";
}

struct Violation {
  std::size_t index = 0;
  Rule rule = Rule::Alternation;
  std::string detail;

  std::string to_string() const {
    return std::string(rule_name(rule)) + "@" + std::to_string(index) +
           (detail.empty() ? "" : ": " + detail);
  }
};

namespace detail {

inline bool has_space(std::string_view token) {
  return std::any_of(token.begin(), token.end(), [](unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  });
}

}  // namespace detail

/// Per-turn invariants, reported against `index`.
inline void check_micro_turn(const MicroTurn& turn, std::size_t index,
                             std::vector<Violation>& out) {
  if (turn.control == ControlToken::Eos) {
    out.push_back({index, Rule::EosAsControl, "<EOS> cannot be a control"});
    return;
  }
  if (turn.control && !control_legal_for(*turn.control, turn.role)) {
    out.push_back({index, Rule::RoleLegality,
                   std::string(surface(*turn.control)) + " on a " +
                       std::string(role_name(turn.role)) + " turn"});
    return;
  }
  if (turn.control && control_requires_empty(*turn.control) && turn.has_content()) {
    out.push_back({index, Rule::ControlContent,
                   std::string(surface(*turn.control)) + " must end immediately"});
  }
  if (turn.control == ControlToken::UserFinishSpeaking && !turn.has_content()) {
    out.push_back({index, Rule::ControlContent,
                   "<user finish speaking> needs response content"});
  }
  if (turn.role == Role::User && !turn.has_content() && !turn.control) {
    out.push_back({index, Rule::SilentUserTurn, "empty user turn without <no voice>"});
  }
  if (turn.role == Role::System && !turn.has_content() && !turn.control) {
    out.push_back({index, Rule::EmptySystemTurn, "system turn carries nothing"});
  }
  for (const auto& token : turn.tokens) {
    if (is_reserved_token(token)) {
      out.push_back({index, Rule::ReservedToken, token + " inside content"});
    } else if (token.empty() || detail::has_space(token)) {
      out.push_back({index, Rule::MalformedToken, "'" + token + "'"});
    }
  }
}

inline std::vector<Violation> check_micro_turn(const MicroTurn& turn) {
  std::vector<Violation> out;
  check_micro_turn(turn, 0, out);
  return out;
}

inline bool is_valid(const MicroTurn& turn) { return check_micro_turn(turn).empty(); }

/// [control-surface?] + tokens + [<EOS>]
inline std::vector<std::string> render_micro_turn(const MicroTurn& turn) {
  if (auto violations = check_micro_turn(turn); !violations.empty()) {
    throw Error(ErrorCode::InvariantViolation, violations.front().to_string());
  }
  std::vector<std::string> out;
  out.reserve(turn.tokens.size() + 2);
  if (turn.control) out.emplace_back(surface(*turn.control));
  out.insert(out.end(), turn.tokens.begin(), turn.tokens.end());
  out.emplace_back(kEos);
  return out;
}

enum class ParseMode { Strict, Tolerant };

/// Inverse of render_micro_turn. Tolerant mode truncates at the first <EOS>
/// and accepts a stream that never reaches one.
inline MicroTurn parse_micro_turn(std::span<const std::string> stream, Role role,
                                  ParseMode mode = ParseMode::Strict, TimeMs t_start = 0) {
  if (stream.empty()) throw Error(ErrorCode::MissingEos, "empty token stream");

  auto eos = std::find(stream.begin(), stream.end(), kEos);
  if (eos == stream.end() && mode == ParseMode::Strict) {
    throw Error(ErrorCode::MissingEos, "no <EOS> in stream");
  }
  if (mode == ParseMode::Strict && eos + 1 != stream.end()) {
    throw Error(ErrorCode::InvariantViolation, "tokens after <EOS>");
  }

  MicroTurn turn;
  turn.role = role;
  turn.t_start = t_start;
  auto it = stream.begin();
  if (it != eos) {
    if (auto control = control_from_surface(*it)) {
      if (!control_legal_for(*control, role)) {
        throw Error(ErrorCode::IllegalControl,
                    *it + " cannot open a " + std::string(role_name(role)) + " turn");
      }
      turn.control = control;
      ++it;
    }
  }
  for (; it != eos; ++it) {
    if (is_reserved_token(*it)) {
      throw Error(ErrorCode::InvariantViolation, "control token " + *it + " inside content");
    }
    turn.tokens.push_back(*it);
  }
  if (auto violations = check_micro_turn(turn); !violations.empty()) {
    throw Error(ErrorCode::InvariantViolation, violations.front().to_string());
  }
  return turn;
}

struct DialogueHistory {
  std::vector<MicroTurn> turns;
  TimeMs delta_t_ms = 600;

  friend bool operator==(const DialogueHistory&, const DialogueHistory&) = default;
};

inline std::vector<Violation> validate_history(std::span<const MicroTurn> turns,
                                               TimeMs delta_t_ms = 600) {
  std::vector<Violation> out;
  if (delta_t_ms <= 0) out.push_back({0, Rule::NonPositiveDeltaT, ""});
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const auto& turn = turns[i];
    if (i == 0 && turn.role != Role::User) {
      out.push_back({0, Rule::FirstTurnUser, ""});
    }
    if (i > 0 && turns[i - 1].role == turn.role) {
      out.push_back({i, Rule::Alternation, std::string(role_name(turn.role)) + " twice"});
    }
    if (i > 0 && turn.t_start < turns[i - 1].t_start) {
      out.push_back({i, Rule::TimeOrder, "t_start regresses"});
    }
    check_micro_turn(turn, i, out);
  }
  return out;
}

inline std::vector<Violation> validate_history(const DialogueHistory& history) {
  return validate_history(history.turns, history.delta_t_ms);
}

/// Splits canonical text into tokens. Control surfaces contain spaces, so they
/// are matched atomically before falling back to whitespace splitting.
inline std::vector<std::string> split_canonical(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
  };
  while (i < text.size()) {
    if (is_space(text[i])) {
      ++i;
      continue;
    }
    bool matched = false;
    if (text[i] == '<') {
      for (ControlToken token : kAllControlTokens) {
        auto s = surface(token);
        if (text.substr(i, s.size()) == s) {
          out.emplace_back(s);
          i += s.size();
          matched = true;
          break;
        }
      }
    }
    if (matched) continue;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

inline std::vector<std::string> render_history(std::span<const MicroTurn> turns) {
  std::vector<std::string> out;
  for (const auto& turn : turns) {
    auto rendered = render_micro_turn(turn);
    out.insert(out.end(), rendered.begin(), rendered.end());
  }
  return out;
}

/// Canonical textual form: rendered micro-turns joined by single spaces.
inline std::string serialize_history(std::span<const MicroTurn> turns) {
  auto tokens = render_history(turns);
  return join_tokens(tokens);
}

inline std::string serialize_history(const DialogueHistory& history) {
  return serialize_history(history.turns);
}

/// Reads a canonical stream back into alternating micro-turns starting with
/// `first`. User turn k (and the system reply after it) is stamped (k+1)*dt.
inline DialogueHistory parse_history(std::string_view text, TimeMs delta_t_ms = 600,
                                     Role first = Role::User) {
  DialogueHistory history;
  history.delta_t_ms = delta_t_ms;
  auto tokens = split_canonical(text);
  Role role = first;
  std::size_t begin = 0;
  std::size_t pair = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] != kEos) continue;
    std::span<const std::string> piece(tokens.data() + begin, i + 1 - begin);
    history.turns.push_back(parse_micro_turn(piece, role, ParseMode::Strict,
                                             static_cast<TimeMs>(pair + 1) * delta_t_ms));
    if (role == Role::System) ++pair;
    role = role == Role::User ? Role::System : Role::User;
    begin = i + 1;
  }
  if (begin != tokens.size()) {
    throw Error(ErrorCode::MissingEos, "trailing tokens without <EOS>");
  }
  return history;
}

/// Desk-scale stand-in for an LLM tokenizer. Control surfaces are always
/// atomic tokens.
class TokenModel {
 public:
  static TokenModel whitespace() { return TokenModel{}; }

  /// Greedy longest-match over `vocabulary` inside each whitespace word;
  /// characters not covered by the vocabulary become single-code-point pieces.
  static TokenModel custom(std::vector<std::string> vocabulary) {
    TokenModel model;
    model.custom_ = true;
    for (auto& piece : vocabulary) {
      if (piece.empty()) continue;
      model.max_piece_ = std::max(model.max_piece_, piece.size());
      model.vocabulary_.insert(std::move(piece));
    }
    return model;
  }

  bool is_custom() const { return custom_; }

  std::vector<std::string> tokenize(std::string_view text) const {
    auto words = split_canonical(text);
    if (!custom_) return words;
    std::vector<std::string> out;
    for (const auto& word : words) {
      if (is_reserved_token(word)) {
        out.push_back(word);
        continue;
      }
      std::size_t i = 0;
      while (i < word.size()) {
        std::size_t take = 0;
        for (std::size_t len = std::min(max_piece_, word.size() - i); len > 0; --len) {
          if (vocabulary_.count(word.substr(i, len))) {
            take = len;
            break;
          }
        }
        if (take == 0) take = code_point_length(static_cast<unsigned char>(word[i]));
        take = std::min(take, word.size() - i);
        out.push_back(word.substr(i, take));
        i += take;
      }
    }
    return out;
  }

  std::string detokenize(std::span<const std::string> tokens) const {
    return join_tokens(tokens);
  }

 private:
  static std::size_t code_point_length(unsigned char lead) {
    if (lead >= 0xF0) return 4;
    if (lead >= 0xE0) return 3;
    if (lead >= 0xC0) return 2;
    return 1;
  }

  bool custom_ = false;
  std::unordered_set<std::string> vocabulary_;
  std::size_t max_piece_ = 0;
};

}  // namespace microturn
