#pragma once

// Seeded, timed user-behaviour scripts for the four turn-taking dimensions
// (pause handling, backchannel, smooth turn taking, user interruption).
// Truth intervals tile [0, horizon) and share the engine's clock.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/ingest.hpp"
#include "microturn/protocol.hpp"
#include "microturn/rng.hpp"

namespace microturn {

enum class Dimension { PauseHandling, Backchannel, SmoothTurnTaking, UserInterruption };

inline constexpr std::array<Dimension, 4> kAllDimensions = {
    Dimension::PauseHandling, Dimension::Backchannel, Dimension::SmoothTurnTaking,
    Dimension::UserInterruption};

constexpr std::string_view dimension_name(Dimension d) {
  switch (d) {
    case Dimension::PauseHandling: return "pause_handling";
    case Dimension::Backchannel: return "backchannel";
    case Dimension::SmoothTurnTaking: return "smooth_turn_taking";
    case Dimension::UserInterruption: return "user_interruption";
  }
  return "";
}

inline std::optional<Dimension> dimension_from_name(std::string_view name) {
  for (auto d : kAllDimensions) {
    if (dimension_name(d) == name) return d;
  }
  return std::nullopt;
}

/// Lower TOR is better on these dimensions.
constexpr bool lower_is_better(Dimension d) {
  return d == Dimension::PauseHandling || d == Dimension::Backchannel;
}

enum class TruthKind { Silence, Speaking, Pause, TurnEnd, InterruptOnset, BackchannelCue };

constexpr std::string_view truth_kind_name(TruthKind k) {
  switch (k) {
    case TruthKind::Silence: return "silence";
    case TruthKind::Speaking: return "speaking";
    case TruthKind::Pause: return "pause";
    case TruthKind::TurnEnd: return "turn_end";
    case TruthKind::InterruptOnset: return "interrupt_onset";
    case TruthKind::BackchannelCue: return "backchannel_cue";
  }
  return "";
}

inline std::optional<TruthKind> truth_kind_from_name(std::string_view name) {
  for (auto k : {TruthKind::Silence, TruthKind::Speaking, TruthKind::Pause, TruthKind::TurnEnd,
                 TruthKind::InterruptOnset, TruthKind::BackchannelCue}) {
    if (truth_kind_name(k) == name) return k;
  }
  return std::nullopt;
}

/// Half-open [start_ms, end_ms).
struct TruthInterval {
  TruthKind kind = TruthKind::Silence;
  TimeMs start_ms = 0;
  TimeMs end_ms = 0;

  bool contains(TimeMs t) const { return t >= start_ms && t < end_ms; }
  friend bool operator==(const TruthInterval&, const TruthInterval&) = default;
};

struct ScenarioScript {
  std::string id;
  Dimension dimension = Dimension::SmoothTurnTaking;
  std::uint64_t seed = 0;
  TimeMs delta_t_ms = 600;
  TimeMs horizon_ms = 0;
  std::vector<AsrPartialEvent> events;
  std::vector<TruthInterval> truth;
  std::vector<std::string> responses;  // scripted system answer per user question

  const TruthInterval* interval_at(TimeMs t) const {
    for (const auto& iv : truth) {
      if (iv.contains(t)) return &iv;
    }
    return nullptr;
  }

  std::vector<const TruthInterval*> intervals_of(TruthKind kind) const {
    std::vector<const TruthInterval*> out;
    for (const auto& iv : truth) {
      if (iv.kind == kind) out.push_back(&iv);
    }
    return out;
  }

  friend bool operator==(const ScenarioScript&, const ScenarioScript&) = default;
};

/// The instant the user's question is complete: the last word event before a
/// turn-end interval.
inline TimeMs user_end_time(const TruthInterval& turn_end) { return turn_end.start_ms - 1; }

/// Cue instants the take-over window is measured from.
inline std::vector<TimeMs> cue_times(const ScenarioScript& script) {
  std::vector<TimeMs> cues;
  switch (script.dimension) {
    case Dimension::PauseHandling:
      for (auto* iv : script.intervals_of(TruthKind::Pause)) cues.push_back(iv->start_ms);
      break;
    case Dimension::Backchannel:
      for (auto* iv : script.intervals_of(TruthKind::BackchannelCue)) cues.push_back(iv->start_ms);
      break;
    case Dimension::SmoothTurnTaking:
      if (auto ends = script.intervals_of(TruthKind::TurnEnd); !ends.empty()) {
        cues.push_back(user_end_time(*ends.front()));
      }
      break;
    case Dimension::UserInterruption:
      for (auto* iv : script.intervals_of(TruthKind::InterruptOnset)) cues.push_back(iv->start_ms);
      break;
  }
  return cues;
}

/// Checks tiling and that every event lies inside a user-speech interval.
inline std::vector<std::string> check_script(const ScenarioScript& script) {
  std::vector<std::string> problems;
  TimeMs cursor = 0;
  for (const auto& iv : script.truth) {
    if (iv.start_ms != cursor) problems.push_back("gap or overlap at " + std::to_string(cursor));
    if (iv.end_ms <= iv.start_ms) problems.push_back("empty interval at " + std::to_string(iv.start_ms));
    cursor = iv.end_ms;
  }
  if (cursor != script.horizon_ms) problems.push_back("truth does not reach the horizon");
  for (const auto& ev : script.events) {
    const auto* iv = script.interval_at(ev.t_ms);
    if (!iv || (iv->kind != TruthKind::Speaking && iv->kind != TruthKind::InterruptOnset)) {
      problems.push_back("event at " + std::to_string(ev.t_ms) + " outside speech");
    }
  }
  return problems;
}

struct ScenarioConfig {
  TimeMs delta_t_ms = 600;
  double tokens_per_second = 3.0;
  TimeMs takeover_window_ms = 3000;
  TimeMs gap_min_ms = 500;
  TimeMs gap_max_ms = 2000;
  TimeMs word_min_ms = 250;
  TimeMs word_max_ms = 450;
  TimeMs lead_min_ms = 200;
  TimeMs lead_max_ms = 1000;
  TimeMs cue_min_ms = 300;
  TimeMs cue_max_ms = 800;
  TimeMs tail_ms = 4000;
  TimeMs interrupt_margin_min_ms = 300;
  TimeMs interrupt_margin_max_ms = 2500;
  std::optional<TimeMs> forced_gap_ms;  // pins the pause length

  void check() const {
    if (delta_t_ms <= 0) throw Error(ErrorCode::InvalidConfig, "delta_t_ms must be positive");
    if (!(tokens_per_second > 0)) throw Error(ErrorCode::InvalidConfig, "tokens_per_second <= 0");
    auto range = [](TimeMs lo, TimeMs hi, const char* what) {
      if (lo <= 0 || lo > hi) throw Error(ErrorCode::InvalidConfig, std::string("bad range ") + what);
    };
    range(gap_min_ms, gap_max_ms, "gap");
    range(word_min_ms, word_max_ms, "word");
    range(lead_min_ms, lead_max_ms, "lead");
    range(cue_min_ms, cue_max_ms, "cue");
    range(interrupt_margin_min_ms, interrupt_margin_max_ms, "interrupt margin");
    if (takeover_window_ms <= 0) throw Error(ErrorCode::InvalidConfig, "takeover window <= 0");
    if (forced_gap_ms && *forced_gap_ms <= 0) throw Error(ErrorCode::InvalidConfig, "forced gap <= 0");
  }
};

namespace corpus {

inline constexpr std::array<std::string_view, 8> kTopics = {
    "rust", "gardening", "chess", "the piano", "bread baking", "photography", "rock climbing",
    "astronomy"};

inline constexpr std::array<std::string_view, 5> kQuestions = {
    "what is the best way to learn {}?", "can you explain how {} works?",
    "do you know anything about {}?", "how long does it take to get good at {}?",
    "why do people enjoy {} so much?"};

inline constexpr std::array<std::string_view, 4> kPauseOpeners = {
    "so I was thinking about", "could you maybe help me with", "I wanted to ask you about",
    "tell me a little about"};

inline constexpr std::array<std::string_view, 5> kFillers = {
    "because I have been trying it for a while", "and I still do not really get it",
    "since a friend of mine keeps talking about it", "and I would like to start this year",
    "although I only have a few hours every week"};

inline constexpr std::array<std::string_view, 8> kNarration = {
    "yesterday I went to the market with my sister.", "we wanted to buy fresh vegetables.",
    "the weather was nice so we walked there.", "on the way we met an old friend from school.",
    "he told us about his new job in the city.", "after that we stopped for a quick coffee.",
    "the place was crowded and very loud.", "in the end we got home quite late."};

inline constexpr std::array<std::string_view, 4> kInterruptions = {
    "wait what about", "sorry but how", "hold on is", "actually can"};

inline constexpr std::array<std::string_view, 6> kAnswers = {
    "that is a great question and here is a short answer.",
    "the key is to practice a little every single day.",
    "most people start with the basics and build from there.",
    "it depends on how much time you can give it.", "there are many good books and videos on it.",
    "a local group or class can make it much more fun."};

inline std::string fill(std::string_view pattern, std::string_view topic) {
  std::string out(pattern);
  if (auto pos = out.find("{}"); pos != std::string::npos) out.replace(pos, 2, topic);
  return out;
}

template <std::size_t N>
std::string_view pick(Rng& rng, const std::array<std::string_view, N>& items) {
  return items[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(N) - 1))];
}

}  // namespace corpus

namespace detail {

/// Appends one ASR event per word; returns the time of the last word event.
class ScriptBuilder {
 public:
  ScriptBuilder(const ScenarioConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}

  void silence(TruthKind kind, TimeMs duration) {
    push(kind, cursor_, cursor_ + duration);
    cursor_ += duration;
  }

  /// Speaks `words`; the interval ends one millisecond after the final word event.
  TimeMs speak(TruthKind kind, const std::vector<std::string>& words) {
    TimeMs start = cursor_;
    TimeMs t = cursor_;
    for (const auto& w : words) {
      t += uniform_int(rng_, static_cast<int>(cfg_.word_min_ms), static_cast<int>(cfg_.word_max_ms));
      events_.push_back({t, w});
    }
    push(kind, start, t + 1);
    cursor_ = t + 1;
    return t;
  }

  /// Estimated duration of `n` words, upper bound.
  TimeMs max_duration(std::size_t n) const { return static_cast<TimeMs>(n) * cfg_.word_max_ms; }

  TimeMs cursor() const { return cursor_; }
  std::vector<AsrPartialEvent> take_events() { return std::move(events_); }
  std::vector<TruthInterval> take_truth() { return std::move(truth_); }

 private:
  void push(TruthKind kind, TimeMs a, TimeMs b) {
    if (!truth_.empty() && truth_.back().kind == kind && truth_.back().end_ms == a) {
      truth_.back().end_ms = b;
    } else {
      truth_.push_back({kind, a, b});
    }
  }

  const ScenarioConfig& cfg_;
  Rng& rng_;
  TimeMs cursor_ = 0;
  std::vector<AsrPartialEvent> events_;
  std::vector<TruthInterval> truth_;
};

inline std::vector<std::string> words(std::string_view text) { return split_canonical(text); }

/// Extends `base` with filler clauses until it has at least `min_words`
/// words, then closes it with `terminal`.
inline std::vector<std::string> padded(Rng& rng, std::string base, std::size_t min_words,
                                       char terminal) {
  auto out = words(base);
  while (out.size() < min_words) {
    auto more = words(corpus::pick(rng, corpus::kFillers));
    out.insert(out.end(), more.begin(), more.end());
  }
  while (!out.back().empty() && (out.back().back() == '?' || out.back().back() == '.')) {
    out.back().pop_back();
  }
  out.back().push_back(terminal);
  return out;
}

inline std::string answer(Rng& rng, std::size_t min_tokens) {
  std::vector<std::string> tokens;
  while (tokens.size() < min_tokens) {
    auto more = words(corpus::pick(rng, corpus::kAnswers));
    tokens.insert(tokens.end(), more.begin(), more.end());
  }
  return join_tokens(tokens);
}

inline TimeMs draw(Rng& rng, TimeMs lo, TimeMs hi) {
  return uniform_int(rng, static_cast<int>(lo), static_cast<int>(hi));
}

}  // namespace detail

inline ScenarioScript generate_scenario(Dimension dimension, std::uint64_t seed,
                                        const ScenarioConfig& cfg, std::string id = {}) {
  cfg.check();
  Rng rng(seed);
  detail::ScriptBuilder b(cfg, rng);
  ScenarioScript script;
  script.id = id.empty() ? std::string(dimension_name(dimension)) + "-" + std::to_string(seed) : id;
  script.dimension = dimension;
  script.seed = seed;
  script.delta_t_ms = cfg.delta_t_ms;

  // Words needed to keep the user talking for a full take-over window.
  const std::size_t window_words =
      static_cast<std::size_t>(cfg.takeover_window_ms / cfg.word_min_ms) + 1;
  const TimeMs tail = std::max(cfg.tail_ms, 2 * cfg.delta_t_ms + 1);

  b.silence(TruthKind::Silence, detail::draw(rng, cfg.lead_min_ms, cfg.lead_max_ms));
  auto topic = corpus::pick(rng, corpus::kTopics);

  switch (dimension) {
    case Dimension::PauseHandling: {
      auto opener = corpus::fill(corpus::pick(rng, corpus::kPauseOpeners), topic);
      b.speak(TruthKind::Speaking, detail::words(opener));
      TimeMs gap = cfg.forced_gap_ms ? *cfg.forced_gap_ms
                                     : detail::draw(rng, cfg.gap_min_ms, cfg.gap_max_ms);
      b.silence(TruthKind::Pause, gap);
      b.speak(TruthKind::Speaking,
              detail::padded(rng, std::string(topic), window_words, '?'));
      script.responses.push_back(detail::answer(rng, 12));
      break;
    }
    case Dimension::Backchannel: {
      int sentences = uniform_int(rng, 2, 4);
      for (int i = 0; i < sentences; ++i) {
        b.speak(TruthKind::Speaking, detail::words(corpus::pick(rng, corpus::kNarration)));
        b.silence(TruthKind::BackchannelCue, detail::draw(rng, cfg.cue_min_ms, cfg.cue_max_ms));
      }
      // The closing sentence outlasts the window after the last cue.
      b.speak(TruthKind::Speaking,
              detail::padded(rng, std::string(corpus::pick(rng, corpus::kNarration)),
                             window_words, '.'));
      script.responses.push_back(detail::answer(rng, 12));
      break;
    }
    case Dimension::SmoothTurnTaking: {
      auto question = corpus::fill(corpus::pick(rng, corpus::kQuestions), topic);
      b.speak(TruthKind::Speaking, detail::words(question));
      script.responses.push_back(detail::answer(rng, 12));
      break;
    }
    case Dimension::UserInterruption: {
      auto question = corpus::fill(corpus::pick(rng, corpus::kQuestions), topic);
      TimeMs q_end = b.speak(TruthKind::Speaking, detail::words(question));
      // Playback starts at the first flush after q_end, i.e. by q_end + dt.
      TimeMs margin =
          detail::draw(rng, cfg.interrupt_margin_min_ms, cfg.interrupt_margin_max_ms);
      TimeMs onset = q_end + cfg.delta_t_ms + margin;
      b.silence(TruthKind::TurnEnd, onset - b.cursor());

      auto follow = detail::words(corpus::pick(rng, corpus::kInterruptions));
      auto other = std::string(corpus::pick(rng, corpus::kTopics));
      auto more = detail::words(other + "?");
      follow.insert(follow.end(), more.begin(), more.end());
      if (follow.size() > 4) follow.erase(follow.begin() + 2, follow.end() - 2);
      TimeMs speech = b.max_duration(follow.size());

      // The first answer must still be playing when the follow-up ends.
      double playing_ms = static_cast<double>(cfg.delta_t_ms + margin + speech + 2 * cfg.delta_t_ms);
      auto needed = static_cast<std::size_t>(std::ceil(playing_ms * cfg.tokens_per_second / 1000.0));
      script.responses.push_back(detail::answer(rng, std::max<std::size_t>(needed, 20)));
      b.speak(TruthKind::InterruptOnset, follow);
      script.responses.push_back(detail::answer(rng, 10));
      break;
    }
  }
  b.silence(TruthKind::TurnEnd, tail);
  script.horizon_ms = b.cursor();
  script.events = b.take_events();
  script.truth = b.take_truth();
  return script;
}

/// `n` scripts with per-script seeds derived from (seed, dimension, index).
inline std::vector<ScenarioScript> generate_scenarios(Dimension dimension, std::size_t n,
                                                      std::uint64_t seed,
                                                      const ScenarioConfig& cfg = {}) {
  if (n < 1) throw Error(ErrorCode::InvalidConfig, "n must be >= 1");
  std::vector<ScenarioScript> out;
  out.reserve(n);
  std::uint64_t base = derive_seed(seed, dimension_name(dimension));
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(generate_scenario(dimension, derive_seed(base, static_cast<std::uint64_t>(i)),
                                    cfg,
                                    std::string(dimension_name(dimension)) + "-" + std::to_string(i)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json to_json(const TruthInterval& iv) {
  return {{"kind", truth_kind_name(iv.kind)}, {"start_ms", iv.start_ms}, {"end_ms", iv.end_ms}};
}

inline nlohmann::ordered_json to_json(const ScenarioScript& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["dimension"] = dimension_name(s.dimension);
  j["seed"] = s.seed;
  j["delta_t_ms"] = s.delta_t_ms;
  j["horizon_ms"] = s.horizon_ms;
  j["events"] = nlohmann::ordered_json::array();
  for (const auto& ev : s.events) j["events"].push_back(to_json(ev));
  j["truth"] = nlohmann::ordered_json::array();
  for (const auto& iv : s.truth) j["truth"].push_back(to_json(iv));
  j["responses"] = s.responses;
  return j;
}

inline ScenarioScript script_from_json(const nlohmann::json& j) {
  try {
    ScenarioScript s;
    s.id = j.at("id").get<std::string>();
    auto dim = dimension_from_name(j.at("dimension").get<std::string>());
    if (!dim) throw Error(ErrorCode::BadMessage, "unknown dimension");
    s.dimension = *dim;
    s.seed = j.value("seed", std::uint64_t{0});
    s.delta_t_ms = j.value("delta_t_ms", TimeMs{600});
    s.horizon_ms = j.at("horizon_ms").get<TimeMs>();
    for (const auto& ev : j.at("events")) s.events.push_back(event_from_json(ev));
    for (const auto& iv : j.at("truth")) {
      auto kind = truth_kind_from_name(iv.at("kind").get<std::string>());
      if (!kind) throw Error(ErrorCode::BadMessage, "unknown truth kind");
      s.truth.push_back({*kind, iv.at("start_ms").get<TimeMs>(), iv.at("end_ms").get<TimeMs>()});
    }
    if (j.contains("responses")) s.responses = j["responses"].get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMessage, std::string("script: ") + e.what());
  }
}

}  // namespace microturn
