#pragma once

// Replays scenario scripts through the engine and stores the outcome next to
// the ground truth.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/oracle.hpp"
#include "microturn/orchestrator.hpp"
#include "microturn/policy.hpp"
#include "microturn/remote_policy.hpp"
#include "microturn/scenarios.hpp"

namespace microturn {

struct Trial {
  ScenarioScript script;
  SessionTranscript transcript;
  friend bool operator==(const Trial&, const Trial&) = default;
};

struct PolicySpec {
  enum class Kind { Oracle, Heuristic, Remote };
  Kind kind = Kind::Oracle;
  std::string url;

  std::string to_string() const {
    switch (kind) {
      case Kind::Oracle: return "oracle";
      case Kind::Heuristic: return "heuristic";
      case Kind::Remote: return "remote:" + url;
    }
    return "";
  }
};

inline PolicySpec parse_policy_spec(std::string_view text) {
  if (text == "oracle") return {PolicySpec::Kind::Oracle, {}};
  if (text == "heuristic") return {PolicySpec::Kind::Heuristic, {}};
  if (text.starts_with("remote:") && text.size() > 7) {
    return {PolicySpec::Kind::Remote, std::string(text.substr(7))};
  }
  throw Error(ErrorCode::InvalidConfig,
              "policy must be oracle, heuristic or remote:URL, got '" + std::string(text) + "'");
}

/// The oracle needs the script it is judged against.
inline std::unique_ptr<Policy> make_policy(const PolicySpec& spec, const ScenarioScript* script) {
  switch (spec.kind) {
    case PolicySpec::Kind::Oracle:
      if (!script) throw Error(ErrorCode::InvalidConfig, "oracle policy requires a scenario script");
      return std::make_unique<OraclePolicy>(*script);
    case PolicySpec::Kind::Heuristic:
      return std::make_unique<HeuristicPolicy>();
    case PolicySpec::Kind::Remote:
      return std::make_unique<RemotePolicy>(remote_config_from_url(spec.url));
  }
  throw Error(ErrorCode::InvalidConfig, "unknown policy");
}

struct TrialConfig {
  double tokens_per_second = 3.0;
  TimeMs policy_latency_ms = 0;
  int max_system_tokens = 10;
  int backchannel_clips = 8;
  unsigned threads = 1;
};

inline Trial run_trial(const ScenarioScript& script, Policy& policy, const TrialConfig& cfg) {
  SessionConfig session;
  session.orchestrator.delta_t_ms = script.delta_t_ms;
  session.orchestrator.playback.tokens_per_second = cfg.tokens_per_second;
  session.orchestrator.playback.policy_latency_ms = cfg.policy_latency_ms;
  session.orchestrator.max_system_tokens = cfg.max_system_tokens;
  session.orchestrator.backchannel_clips = cfg.backchannel_clips;
  session.orchestrator.seed = script.seed;
  session.horizon_ms = script.horizon_ms;
  try {
    return {script, run_session(script.events, policy, session)};
  } catch (const Error& e) {
    throw Error(e.code(), script.id + ": " + e.detail());
  }
}

/// One session per script. Output order follows `scripts` whatever the
/// thread count.
inline std::vector<Trial> run_trials(const std::vector<ScenarioScript>& scripts,
                                     const PolicySpec& spec, const TrialConfig& cfg = {}) {
  std::vector<Trial> trials(scripts.size());
  if (scripts.empty()) return trials;
  unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(scripts.size())));
  // A remote endpoint may keep per-connection state; keep it serial.
  if (spec.kind == PolicySpec::Kind::Remote) threads = 1;
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](unsigned w) {
    try {
      for (std::size_t i = w; i < scripts.size(); i += threads) {
        auto policy = make_policy(spec, &scripts[i]);
        trials[i] = run_trial(scripts[i], *policy, cfg);
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
  return trials;
}

// ---------------------------------------------------------------------------
// Trial files: one JSON object per line, script fields plus "transcript".

inline nlohmann::ordered_json to_json(const Trial& trial) {
  auto j = to_json(trial.script);
  j["transcript"] = nlohmann::ordered_json::array();
  for (const auto& r : trial.transcript) j["transcript"].push_back(to_json(r));
  return j;
}

inline Trial trial_from_json(const nlohmann::json& j) {
  Trial trial;
  trial.script = script_from_json(j);
  if (!j.contains("transcript") || !j["transcript"].is_array()) {
    throw Error(ErrorCode::BadMessage, trial.script.id + ": missing transcript");
  }
  for (const auto& r : j["transcript"]) trial.transcript.push_back(record_from_json(r));
  return trial;
}

inline void write_trials(std::ostream& out, const std::vector<Trial>& trials) {
  for (const auto& t : trials) out << to_json(t).dump() << '\n';
}

inline std::vector<Trial> read_trials(std::istream& in, const std::string& source = "trials") {
  std::vector<Trial> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(trial_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BadMessage, source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Reads every *.jsonl file in `dir` (sorted by name) or a single file.
inline std::vector<Trial> read_trials_path(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else {
    throw Error(ErrorCode::IoError, "no such trial file or directory: " + path.string());
  }
  std::vector<Trial> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + f.string());
    auto part = read_trials(in, f.string());
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

}  // namespace microturn
