#pragma once

// Micro-turn length analysis: the full scenario suite evaluated at each
// flush interval of a grid.

#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/metrics.hpp"
#include "microturn/rng.hpp"
#include "microturn/scenarios.hpp"
#include "microturn/trials.hpp"

namespace microturn {

inline const std::vector<TimeMs> kDefaultSweepGrid = {300, 600, 900, 1200, 1500, 1800};

struct SuiteConfig {
  ScenarioConfig scenarios;
  TrialConfig trials;
  MetricsConfig metrics;
};

struct SuiteResult {
  std::vector<Trial> trials;
  MetricsReport report;
};

/// n scripts per dimension from `seed`, replayed under `policy`, evaluated.
inline SuiteResult run_suite(const PolicySpec& policy, std::size_t n, std::uint64_t seed,
                             const SuiteConfig& cfg = {}) {
  std::vector<ScenarioScript> scripts;
  for (Dimension d : kAllDimensions) {
    auto part = generate_scenarios(d, n, seed, cfg.scenarios);
    scripts.insert(scripts.end(), std::make_move_iterator(part.begin()),
                   std::make_move_iterator(part.end()));
  }
  SuiteResult out;
  out.trials = run_trials(scripts, policy, cfg.trials);
  out.report = evaluate_trials(out.trials, cfg.metrics);
  return out;
}

struct SweepRow {
  TimeMs delta_t_ms = 0;
  double averaged_accuracy = 0;
  std::optional<double> smooth_latency_ms;
  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepResult {
  std::vector<SweepRow> rows;
};

/// Scenario seed for one grid point.
inline std::uint64_t sweep_seed(std::uint64_t seed, TimeMs delta_t_ms) {
  return derive_seed(seed, static_cast<std::uint64_t>(delta_t_ms));
}

inline SweepRow sweep_row(TimeMs delta_t_ms, const MetricsReport& report) {
  SweepRow row;
  row.delta_t_ms = delta_t_ms;
  row.averaged_accuracy = report.averaged_turn_taking_accuracy.value_or(0.0);
  if (const auto* smooth = report.find(Dimension::SmoothTurnTaking); smooth && smooth->latency) {
    row.smooth_latency_ms = smooth->latency->mean_ms;
  }
  return row;
}

inline SweepResult run_sweep(std::vector<TimeMs> grid, const PolicySpec& policy, std::size_t n,
                             std::uint64_t seed, const SuiteConfig& cfg = {}) {
  if (grid.empty()) throw Error(ErrorCode::InvalidConfig, "sweep grid is empty");
  std::sort(grid.begin(), grid.end());
  if (std::adjacent_find(grid.begin(), grid.end()) != grid.end()) {
    throw Error(ErrorCode::InvalidConfig, "sweep grid has duplicate values");
  }
  SweepResult result;
  for (TimeMs dt : grid) {
    if (dt <= 0) throw Error(ErrorCode::InvalidConfig, "sweep grid values must be positive");
    SuiteConfig point = cfg;
    point.scenarios.delta_t_ms = dt;
    try {
      auto suite = run_suite(policy, n, sweep_seed(seed, dt), point);
      result.rows.push_back(sweep_row(dt, suite.report));
    } catch (const Error& e) {
      throw Error(e.code(), "delta_t_ms=" + std::to_string(dt) + ": " + e.detail());
    }
  }
  return result;
}

inline std::string to_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "delta_t_ms,averaged_accuracy,smooth_latency_ms\n";
  for (const auto& r : result.rows) {
    out << r.delta_t_ms << ',' << nlohmann::json(r.averaged_accuracy).dump() << ',';
    if (r.smooth_latency_ms) out << nlohmann::json(*r.smooth_latency_ms).dump();
    out << '\n';
  }
  return out.str();
}

inline nlohmann::ordered_json to_json(const SweepResult& result) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : result.rows) {
    rows.push_back({{"delta_t_ms", r.delta_t_ms},
                    {"averaged_accuracy", r.averaged_accuracy},
                    {"smooth_latency_ms", detail::opt(r.smooth_latency_ms)}});
  }
  return {{"rows", std::move(rows)}};
}

}  // namespace microturn
