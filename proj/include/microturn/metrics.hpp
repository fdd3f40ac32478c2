#pragma once

// Turn-taking metrics over trials: take-over rate, response latency,
// backchannel frequency and timing divergence, and the averaged accuracy.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/orchestrator.hpp"
#include "microturn/scenarios.hpp"
#include "microturn/trials.hpp"

namespace microturn {

struct MetricsConfig {
  TimeMs takeover_window_ms = 3000;
  int n_bins = 10;

  void check() const {
    if (takeover_window_ms <= 0) throw Error(ErrorCode::InvalidConfig, "takeover window <= 0");
    if (n_bins < 2) throw Error(ErrorCode::InvalidConfig, "n_bins must be >= 2");
  }
};

namespace detail {

inline void require_trials(const std::vector<Trial>& trials) {
  if (trials.empty()) throw Error(ErrorCode::EmptyTrialSet, "no trials");
  for (const auto& t : trials) {
    if (t.script.dimension != trials.front().script.dimension) {
      throw Error(ErrorCode::InvariantViolation, "trials mix dimensions");
    }
  }
}

inline std::vector<TimeMs> times_of(const Trial& trial, std::string_view kind) {
  std::vector<TimeMs> out;
  for (const auto& r : trial.transcript) {
    if (r.kind == kind) out.push_back(r.t_ms);
  }
  return out;
}

inline std::optional<TimeMs> first_at_or_after(const std::vector<TimeMs>& times, TimeMs cue) {
  for (TimeMs t : times) {
    if (t >= cue) return t;
  }
  return std::nullopt;
}

}  // namespace detail

/// True when the system starts an utterance within [cue, cue + window] for
/// any of the trial's cues.
inline bool takes_over(const Trial& trial, TimeMs window_ms) {
  auto starts = detail::times_of(trial, kind::kEmitSpeech);
  for (TimeMs cue : cue_times(trial.script)) {
    for (TimeMs t : starts) {
      if (t >= cue && t <= cue + window_ms) return true;
    }
  }
  return false;
}

inline double compute_tor(const std::vector<Trial>& trials, TimeMs window_ms = 3000) {
  detail::require_trials(trials);
  std::size_t n = 0;
  for (const auto& t : trials) n += takes_over(t, window_ms) ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(trials.size());
}

/// Mean of [1-p_syn, 1-p_candor, 1-bc, smooth, interrupt].
inline double averaged_accuracy(double tor_pause_syn, double tor_pause_candor, double tor_bc,
                                double tor_smooth, double tor_interrupt) {
  for (double v : {tor_pause_syn, tor_pause_candor, tor_bc, tor_smooth, tor_interrupt}) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(ErrorCode::OutOfRange, "TOR " + std::to_string(v) + " outside [0,1]");
    }
  }
  return ((1.0 - tor_pause_syn) + (1.0 - tor_pause_candor) + (1.0 - tor_bc) + tor_smooth +
          tor_interrupt) /
         5.0;
}

struct LatencyStats {
  std::optional<double> mean_ms;
  std::optional<double> median_ms;
  std::size_t measured = 0;
  std::size_t excluded = 0;  // no qualifying action after the cue
};

/// SmoothTurnTaking: first utterance start at or after the user's last word.
/// UserInterruption: first abort at or after the interruption onset.
inline LatencyStats compute_latency(const std::vector<Trial>& trials) {
  detail::require_trials(trials);
  const Dimension dim = trials.front().script.dimension;
  if (dim != Dimension::SmoothTurnTaking && dim != Dimension::UserInterruption) {
    throw Error(ErrorCode::InvariantViolation,
                "latency is defined for smooth turn-taking and interruption trials");
  }
  const auto action = dim == Dimension::SmoothTurnTaking ? kind::kEmitSpeech : kind::kAbort;
  LatencyStats stats;
  std::vector<double> values;
  for (const auto& trial : trials) {
    auto cues = cue_times(trial.script);
    std::optional<TimeMs> hit;
    if (!cues.empty()) hit = detail::first_at_or_after(detail::times_of(trial, action), cues.front());
    if (!hit) {
      ++stats.excluded;
      continue;
    }
    values.push_back(static_cast<double>(*hit - cues.front()));
  }
  stats.measured = values.size();
  if (!values.empty()) {
    double sum = 0;
    for (double v : values) sum += v;
    stats.mean_ms = sum / static_cast<double>(values.size());
    std::sort(values.begin(), values.end());
    std::size_t mid = values.size() / 2;
    stats.median_ms = values.size() % 2 ? values[mid] : (values[mid - 1] + values[mid]) / 2.0;
  }
  return stats;
}

/// Base-2 Jensen-Shannon divergence of two distributions over the same bins.
/// Inputs are normalized; an all-zero input is treated as uniform.
inline double jensen_shannon(std::vector<double> p, std::vector<double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw Error(ErrorCode::InvariantViolation, "histograms differ in size");
  }
  auto normalize = [](std::vector<double>& h) {
    double total = 0;
    for (double v : h) {
      if (v < 0) throw Error(ErrorCode::OutOfRange, "negative histogram mass");
      total += v;
    }
    for (double& v : h) v = total > 0 ? v / total : 1.0 / static_cast<double>(h.size());
  };
  normalize(p);
  normalize(q);
  double d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) d += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0) d += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(d, 0.0, 1.0);
}

struct BackchannelStats {
  double bc_freq = 0;      // system backchannels per minute of user speech
  double bc_jsd = 0;
  std::size_t emitted = 0;
  std::size_t cues = 0;
  double user_speech_ms = 0;
  bool uniform_fallback = false;  // nothing emitted, uniform histogram used
};

inline std::size_t horizon_bin(TimeMs t, TimeMs horizon, int n_bins) {
  if (horizon <= 0) return 0;
  double frac = static_cast<double>(t) / static_cast<double>(horizon);
  auto bin = static_cast<std::ptrdiff_t>(std::floor(frac * n_bins));
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(bin, 0, n_bins - 1));
}

inline BackchannelStats compute_bc_stats(const std::vector<Trial>& trials, int n_bins = 10) {
  detail::require_trials(trials);
  if (n_bins < 2) throw Error(ErrorCode::InvalidConfig, "n_bins must be >= 2");
  BackchannelStats stats;
  std::vector<double> emitted(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> truth(static_cast<std::size_t>(n_bins), 0.0);
  for (const auto& trial : trials) {
    const TimeMs horizon = trial.script.horizon_ms;
    for (const auto& iv : trial.script.truth) {
      if (iv.kind == TruthKind::Speaking || iv.kind == TruthKind::InterruptOnset) {
        stats.user_speech_ms += static_cast<double>(iv.end_ms - iv.start_ms);
      }
    }
    for (TimeMs t : detail::times_of(trial, kind::kBackchannelClip)) {
      emitted[horizon_bin(t, horizon, n_bins)] += 1.0;
      ++stats.emitted;
    }
    for (const auto* iv : trial.script.intervals_of(TruthKind::BackchannelCue)) {
      truth[horizon_bin(iv->start_ms, horizon, n_bins)] += 1.0;
      ++stats.cues;
    }
  }
  stats.uniform_fallback = stats.emitted == 0;
  stats.bc_freq = stats.user_speech_ms > 0
                      ? static_cast<double>(stats.emitted) / (stats.user_speech_ms / 60000.0)
                      : 0.0;
  stats.bc_jsd = jensen_shannon(emitted, truth);
  return stats;
}

// ---------------------------------------------------------------------------
// Report

struct DimensionReport {
  Dimension dimension = Dimension::SmoothTurnTaking;
  std::size_t n_trials = 0;
  double tor = 0;
  std::optional<LatencyStats> latency;
  std::optional<BackchannelStats> backchannel;
};

struct MetricsReport {
  MetricsConfig config;
  std::vector<DimensionReport> dimensions;  // in canonical dimension order
  std::optional<double> averaged_turn_taking_accuracy;

  const DimensionReport* find(Dimension d) const {
    for (const auto& r : dimensions) {
      if (r.dimension == d) return &r;
    }
    return nullptr;
  }
};

inline DimensionReport evaluate_dimension(const std::vector<Trial>& trials,
                                          const MetricsConfig& cfg = {}) {
  DimensionReport r;
  r.tor = compute_tor(trials, cfg.takeover_window_ms);
  r.dimension = trials.front().script.dimension;
  r.n_trials = trials.size();
  if (r.dimension == Dimension::SmoothTurnTaking || r.dimension == Dimension::UserInterruption) {
    r.latency = compute_latency(trials);
  }
  if (r.dimension == Dimension::Backchannel) r.backchannel = compute_bc_stats(trials, cfg.n_bins);
  return r;
}

/// Groups trials by dimension. The aggregate needs all four dimensions; the
/// single pause set stands in for both pause columns.
inline MetricsReport evaluate_trials(const std::vector<Trial>& trials, const MetricsConfig& cfg = {}) {
  cfg.check();
  if (trials.empty()) throw Error(ErrorCode::EmptyTrialSet, "no trials");
  MetricsReport report;
  report.config = cfg;
  for (Dimension d : kAllDimensions) {
    std::vector<Trial> subset;
    for (const auto& t : trials) {
      if (t.script.dimension == d) subset.push_back(t);
    }
    if (!subset.empty()) report.dimensions.push_back(evaluate_dimension(subset, cfg));
  }
  const auto* pause = report.find(Dimension::PauseHandling);
  const auto* bc = report.find(Dimension::Backchannel);
  const auto* smooth = report.find(Dimension::SmoothTurnTaking);
  const auto* interrupt = report.find(Dimension::UserInterruption);
  if (pause && bc && smooth && interrupt) {
    report.averaged_turn_taking_accuracy =
        averaged_accuracy(pause->tor, pause->tor, bc->tor, smooth->tor, interrupt->tor);
  }
  return report;
}

namespace detail {

inline nlohmann::ordered_json opt(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["takeover_window_ms"] = report.config.takeover_window_ms;
  j["n_bins"] = report.config.n_bins;
  j["conventions"] = {
      {"bc_jsd", "base-2 Jensen-Shannon; no emitted backchannels -> uniform histogram"},
      {"bc_freq", "system backchannel clips per minute of user speech"},
      {"pause", "one pause set fills both pause columns of the aggregate"}};
  auto dims = nlohmann::ordered_json::object();
  for (const auto& r : report.dimensions) {
    nlohmann::ordered_json d;
    d["n_trials"] = r.n_trials;
    d["tor"] = r.tor;
    d["lower_is_better"] = lower_is_better(r.dimension);
    if (r.latency) {
      d["latency_ms"] = detail::opt(r.latency->mean_ms);
      d["latency_median_ms"] = detail::opt(r.latency->median_ms);
      d["latency_measured"] = r.latency->measured;
      d["latency_excluded"] = r.latency->excluded;
    }
    if (r.backchannel) {
      d["bc_freq"] = r.backchannel->bc_freq;
      d["bc_jsd"] = r.backchannel->bc_jsd;
      d["bc_emitted"] = r.backchannel->emitted;
      d["bc_cues"] = r.backchannel->cues;
      d["bc_uniform_fallback"] = r.backchannel->uniform_fallback;
    }
    dims[std::string(dimension_name(r.dimension))] = std::move(d);
  }
  j["dimensions"] = std::move(dims);
  j["averaged_turn_taking_accuracy"] = detail::opt(report.averaged_turn_taking_accuracy);
  return j;
}

inline std::string to_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "dimension,n_trials,tor,latency_mean_ms,latency_median_ms,latency_excluded,bc_freq,bc_jsd\n";
  auto num = [&](const std::optional<double>& v) {
    if (v) out << nlohmann::json(*v).dump();
  };
  for (const auto& r : report.dimensions) {
    out << dimension_name(r.dimension) << ',' << r.n_trials << ',' << nlohmann::json(r.tor).dump() << ',';
    if (r.latency) num(r.latency->mean_ms);
    out << ',';
    if (r.latency) num(r.latency->median_ms);
    out << ',';
    if (r.latency) out << r.latency->excluded;
    out << ',';
    if (r.backchannel) num(r.backchannel->bc_freq);
    out << ',';
    if (r.backchannel) num(r.backchannel->bc_jsd);
    out << '\n';
  }
  out << "aggregate,,";
  num(report.averaged_turn_taking_accuracy);
  out << ",,,,,\n";
  return out.str();
}

}  // namespace microturn
