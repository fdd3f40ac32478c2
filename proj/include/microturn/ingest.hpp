#pragma once

// ASR-partial ingestion on a fixed flush clock. Each flush turns whatever
// text was stabilized since the previous flush into one user micro-turn, or
// <no voice> when nothing arrived.

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/protocol.hpp"

namespace microturn {

struct AsrPartialEvent {
  TimeMs t_ms = 0;
  std::string text_delta;

  friend bool operator==(const AsrPartialEvent&, const AsrPartialEvent&) = default;
};

/// Flush instants are k * delta_t_ms for k >= 1.
class FlushClock {
 public:
  explicit FlushClock(TimeMs delta_t_ms = 600) : delta_t_ms_(delta_t_ms) {
    if (delta_t_ms <= 0) throw Error(ErrorCode::InvalidConfig, "delta_t_ms must be positive");
    next_flush_ms_ = delta_t_ms;
  }

  TimeMs delta_t_ms() const { return delta_t_ms_; }
  TimeMs next_flush_ms() const { return next_flush_ms_; }

  /// Returns the current flush instant and moves to the next one.
  TimeMs advance() {
    TimeMs t = next_flush_ms_;
    next_flush_ms_ += delta_t_ms_;
    return t;
  }

  static bool is_flush_instant(TimeMs t, TimeMs delta_t_ms) {
    return t > 0 && t % delta_t_ms == 0;
  }

 private:
  TimeMs delta_t_ms_;
  TimeMs next_flush_ms_;
};

class Ingestor {
 public:
  explicit Ingestor(TokenModel model = TokenModel::whitespace()) : model_(std::move(model)) {}

  void ingest_partial(const AsrPartialEvent& ev) {
    if (ev.t_ms < last_event_ms_) {
      throw Error(ErrorCode::OutOfOrderEvent,
                  "event at " + std::to_string(ev.t_ms) + " ms after " +
                      std::to_string(last_event_ms_) + " ms");
    }
    last_event_ms_ = ev.t_ms;
    auto tokens = model_.tokenize(ev.text_delta);
    for (auto& token : tokens) {
      // Control surfaces typed by a user are content, never protocol.
      if (is_reserved_token(token)) continue;
      buffer_.push_back(std::move(token));
    }
  }

  MicroTurn flush(TimeMs t_flush_ms) {
    if (buffer_.empty()) return user_silence(t_flush_ms);
    MicroTurn turn = user_turn(std::move(buffer_), t_flush_ms);
    buffer_.clear();
    return turn;
  }

  const std::vector<std::string>& buffer() const { return buffer_; }
  TimeMs last_event_ms() const { return last_event_ms_; }

 private:
  TokenModel model_;
  std::vector<std::string> buffer_;
  TimeMs last_event_ms_ = 0;
};

inline nlohmann::ordered_json to_json(const AsrPartialEvent& ev) {
  return {{"t_ms", ev.t_ms}, {"text", ev.text_delta}};
}

inline AsrPartialEvent event_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("t_ms") || !j["t_ms"].is_number_integer() ||
      !j.contains("text") || !j["text"].is_string()) {
    throw Error(ErrorCode::BadMessage, "event record needs integer t_ms and string text");
  }
  return {j["t_ms"].get<TimeMs>(), j["text"].get<std::string>()};
}

/// Replay format: one {"t_ms": int, "text": string} object per line.
inline std::vector<AsrPartialEvent> read_event_file(std::istream& in) {
  std::vector<AsrPartialEvent> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      events.push_back(event_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BadMessage, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return events;
}

inline void write_event_file(std::ostream& out, const std::vector<AsrPartialEvent>& events) {
  for (const auto& ev : events) out << to_json(ev).dump() << '\n';
}

}  // namespace microturn
