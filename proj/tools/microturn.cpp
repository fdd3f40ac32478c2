// microturn: construct training data, simulate and score scenario suites,
// sweep the flush interval, validate outputs, and serve live sessions.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "microturn/microturn.hpp"

namespace fs = std::filesystem;
using namespace microturn;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadMessage, path + ": " + e.what());
  }
}

/// Writes to `path`, or stdout for "-".
void write_output(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << text;
}

std::vector<TimeMs> parse_grid(const std::string& text) {
  std::vector<TimeMs> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      long long v = std::stoll(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      grid.push_back(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidConfig, "bad grid value '" + item + "'");
    }
  }
  return grid;
}

std::pair<std::string, int> parse_bind(const std::string& bind) {
  auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::InvalidConfig, "bind must be host:port");
  try {
    return {bind.substr(0, colon), std::stoi(bind.substr(colon + 1))};
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidConfig, "bad port in '" + bind + "'");
  }
}

std::vector<Dimension> parse_dimensions(const std::string& name) {
  if (name.empty() || name == "all") return {kAllDimensions.begin(), kAllDimensions.end()};
  auto d = dimension_from_name(name);
  if (!d) throw Error(ErrorCode::InvalidConfig, "unknown dimension '" + name + "'");
  return {*d};
}

// --- construct ---------------------------------------------------------------

struct ConstructArgs {
  std::string in;
  std::string out = "-";
  std::string stats;
  std::string config;
  std::uint64_t seed = 0;
  unsigned threads = default_threads();
  std::optional<double> p_pause, p_interrupt, p_user_backchannel;
  bool system_backchannel = false;
};

int run_construct(const ConstructArgs& a) {
  ConstructionConfig cfg;
  if (!a.config.empty()) cfg = construction_config_from_json(read_json_file(a.config));
  cfg.seed = a.seed;
  if (a.p_pause) cfg.p_pause = *a.p_pause;
  if (a.p_interrupt) cfg.p_interrupt = *a.p_interrupt;
  if (a.p_user_backchannel) cfg.p_user_backchannel = *a.p_user_backchannel;
  if (a.system_backchannel) cfg.enable_system_backchannel = true;
  cfg.check();

  std::ifstream in(a.in);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + a.in);
  auto corpus = construct_corpus(read_corpus(in), cfg, a.threads);
  std::string text;
  for (const auto& ts : corpus.sequences) text += to_json(ts).dump() + "\n";
  write_output(a.out, text);
  auto stats = stats_to_json(corpus.stats, cfg).dump(2) + "\n";
  if (!a.stats.empty()) {
    write_output(a.stats, stats);
  } else if (a.out != "-") {
    std::cerr << stats;
  }
  return 0;
}

// --- simulate ----------------------------------------------------------------

struct SimulateArgs {
  std::string dimension = "all";
  std::size_t n = 200;
  std::uint64_t seed = 0;
  std::string policy = "oracle";
  std::string out = "trials";
  TimeMs delta_t_ms = 600;
  double tps = 3.0;
  TimeMs window_ms = 3000;
  unsigned threads = default_threads();
};

int run_simulate(const SimulateArgs& a) {
  auto spec = parse_policy_spec(a.policy);
  ScenarioConfig scfg;
  scfg.delta_t_ms = a.delta_t_ms;
  scfg.tokens_per_second = a.tps;
  scfg.takeover_window_ms = a.window_ms;
  TrialConfig tcfg;
  tcfg.tokens_per_second = a.tps;
  tcfg.threads = a.threads;
  fs::create_directories(a.out);
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  for (Dimension d : parse_dimensions(a.dimension)) {
    auto trials = run_trials(generate_scenarios(d, a.n, a.seed, scfg), spec, tcfg);
    std::ostringstream text;
    write_trials(text, trials);
    auto path = (fs::path(a.out) / (std::string(dimension_name(d)) + ".jsonl")).string();
    write_output(path, text.str());
    summary[std::string(dimension_name(d))] = {{"trials", trials.size()}, {"file", path}};
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  std::string trials;
  std::string out = "-";
  std::string csv;
  TimeMs window_ms = 3000;
  int bins = 10;
};

int run_evaluate(const EvaluateArgs& a) {
  MetricsConfig cfg{a.window_ms, a.bins};
  auto report = evaluate_trials(read_trials_path(a.trials), cfg);
  write_output(a.out, to_json(report).dump(2) + "\n");
  if (!a.csv.empty()) write_output(a.csv, to_csv(report));
  return 0;
}

// --- sweep -------------------------------------------------------------------

struct SweepArgs {
  std::string grid = "300,600,900,1200,1500,1800";
  std::string policy = "oracle";
  std::size_t n = 200;
  std::uint64_t seed = 0;
  std::string out = "-";
  std::string json;
  double tps = 3.0;
  TimeMs window_ms = 3000;
  unsigned threads = default_threads();
};

int run_sweep_cmd(const SweepArgs& a) {
  SuiteConfig cfg;
  cfg.scenarios.tokens_per_second = a.tps;
  cfg.scenarios.takeover_window_ms = a.window_ms;
  cfg.trials.tokens_per_second = a.tps;
  cfg.trials.threads = a.threads;
  cfg.metrics.takeover_window_ms = a.window_ms;
  auto result = run_sweep(parse_grid(a.grid), parse_policy_spec(a.policy), a.n, a.seed, cfg);
  write_output(a.out, to_csv(result));
  if (!a.json.empty()) write_output(a.json, to_json(result).dump(2) + "\n");
  return 0;
}

// --- validate ----------------------------------------------------------------

struct ValidateArgs {
  std::string in;
};

/// Accepts training sequences (tokens/loss_mask/loss_weight) or canonical
/// histories ({"history": "...", "delta_t_ms": ...}).
int run_validate(const ValidateArgs& a) {
  std::ifstream in(a.in);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + a.in);
  std::size_t records = 0;
  nlohmann::ordered_json violations = nlohmann::ordered_json::array();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++records;
    std::vector<std::string> problems;
    std::string id;
    try {
      auto j = nlohmann::json::parse(line);
      id = j.value("id", "");
      if (j.contains("history")) {
        auto history = parse_history(j["history"].get<std::string>(), j.value("delta_t_ms", TimeMs{600}));
        for (const auto& v : validate_history(history)) problems.push_back(v.to_string());
      } else {
        problems = validate_training_sequence(training_sequence_from_json(j));
      }
    } catch (const nlohmann::json::exception& e) {
      problems.push_back(std::string("bad JSON: ") + e.what());
    } catch (const Error& e) {
      problems.push_back(e.what());
    }
    for (const auto& p : problems) {
      violations.push_back({{"line", line_no}, {"id", id}, {"violation", p}});
    }
  }
  nlohmann::ordered_json summary{{"records", records}, {"violations", violations.size()}};
  std::cout << summary.dump() << '\n';
  if (!violations.empty()) {
    throw Error(ErrorCode::InvariantViolation, violations.dump());
  }
  return 0;
}

// --- serve -------------------------------------------------------------------

struct ServeArgs {
  std::string bind = "127.0.0.1:8765";
  TimeMs delta_t_ms = 600;
  std::string policy = "heuristic";
  std::uint64_t seed = 0;
  double tps = 3.0;
  TimeMs window_ms = 3000;
  std::string script;
  std::string record;
};

int run_serve(const ServeArgs& a) {
  ServiceConfig cfg;
  std::tie(cfg.host, cfg.port) = parse_bind(a.bind);
  cfg.orchestrator.delta_t_ms = a.delta_t_ms;
  cfg.orchestrator.seed = a.seed;
  cfg.orchestrator.playback.tokens_per_second = a.tps;
  cfg.takeover_window_ms = a.window_ms;
  cfg.policy = parse_policy_spec(a.policy);
  if (!a.script.empty()) cfg.script = script_from_json(read_json_file(a.script));
  if (!a.record.empty()) cfg.record_path = a.record;
  Server server(cfg);
  server.start();
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << nlohmann::json{{"listening", cfg.host + ":" + std::to_string(server.port())}}.dump() << '\n';
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Micro-turn duplex dialogue engine, data constructor and benchmark"};
  app.require_subcommand(1);

  ConstructArgs ca;
  auto* construct = app.add_subcommand("construct", "Build duplex training sequences from text dialogues");
  construct->add_option("--in", ca.in, "Dialogue corpus (NDJSON)")->required();
  construct->add_option("--out", ca.out, "Training sequences (NDJSON), - for stdout");
  construct->add_option("--stats", ca.stats, "Injection statistics (JSON)");
  construct->add_option("--config", ca.config, "Construction config (JSON)");
  construct->add_option("--seed", ca.seed);
  construct->add_option("--threads", ca.threads);
  construct->add_option("--p-pause", ca.p_pause);
  construct->add_option("--p-interrupt", ca.p_interrupt);
  construct->add_option("--p-user-backchannel", ca.p_user_backchannel);
  construct->add_flag("--system-backchannel", ca.system_backchannel, "Honor <BC/> markers");

  SimulateArgs sa;
  auto* simulate = app.add_subcommand("simulate", "Replay seeded scenarios through a policy");
  simulate->add_option("--dimension", sa.dimension,
                       "pause_handling, backchannel, smooth_turn_taking, user_interruption or all");
  simulate->add_option("--n", sa.n, "Trials per dimension")->check(CLI::PositiveNumber);
  simulate->add_option("--seed", sa.seed);
  simulate->add_option("--policy", sa.policy, "oracle, heuristic or remote:URL");
  simulate->add_option("--out", sa.out, "Trial directory");
  simulate->add_option("--delta-t", sa.delta_t_ms, "Flush interval in ms");
  simulate->add_option("--tps", sa.tps, "Playback tokens per second");
  simulate->add_option("--window", sa.window_ms, "Take-over window in ms");
  simulate->add_option("--threads", sa.threads);

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Score trials");
  evaluate->add_option("--trials", ea.trials, "Trial directory or file")->required();
  evaluate->add_option("--out", ea.out, "Report (JSON), - for stdout");
  evaluate->add_option("--csv", ea.csv, "Flat CSV export");
  evaluate->add_option("--window", ea.window_ms, "Take-over window in ms");
  evaluate->add_option("--bins", ea.bins, "Histogram bins for backchannel timing");

  SweepArgs wa;
  auto* sweep = app.add_subcommand("sweep", "Evaluate the suite across flush intervals");
  sweep->add_option("--grid", wa.grid, "Comma-separated flush intervals in ms");
  sweep->add_option("--policy", wa.policy, "oracle, heuristic or remote:URL");
  sweep->add_option("--n", wa.n, "Trials per dimension")->check(CLI::PositiveNumber);
  sweep->add_option("--seed", wa.seed);
  sweep->add_option("--out", wa.out, "CSV, - for stdout");
  sweep->add_option("--json", wa.json, "JSON copy of the result");
  sweep->add_option("--tps", wa.tps, "Playback tokens per second");
  sweep->add_option("--window", wa.window_ms, "Take-over window in ms");
  sweep->add_option("--threads", wa.threads);

  ServeArgs va;
  auto* serve = app.add_subcommand("serve", "Run the live session server");
  serve->add_option("--bind", va.bind, "host:port")->envname("MICROTURN_BIND");
  serve->add_option("--delta-t", va.delta_t_ms, "Flush interval in ms")->envname("MICROTURN_DELTA_T_MS");
  serve->add_option("--policy", va.policy, "heuristic, remote:URL, or oracle with --script")
      ->envname("MICROTURN_POLICY");
  serve->add_option("--seed", va.seed)->envname("MICROTURN_SEED");
  serve->add_option("--tps", va.tps, "Playback tokens per second")->envname("MICROTURN_TPS");
  serve->add_option("--window", va.window_ms, "Take-over window in ms");
  serve->add_option("--script", va.script, "Scenario script (JSON) for the oracle policy");
  serve->add_option("--record", va.record, "Append all frames to this NDJSON file")
      ->envname("MICROTURN_RECORD");

  ValidateArgs la;
  auto* validate = app.add_subcommand("validate", "Check training sequences or histories");
  validate->add_option("--in", la.in, "NDJSON file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    if (code != 0) {
      std::cerr << nlohmann::ordered_json{{"error", "Usage"}, {"detail", e.what()}}.dump() << '\n';
    }
    return code;
  }

  try {
    if (*construct) return run_construct(ca);
    if (*simulate) return run_simulate(sa);
    if (*evaluate) return run_evaluate(ea);
    if (*sweep) return run_sweep_cmd(wa);
    if (*validate) return run_validate(la);
    if (*serve) return run_serve(va);
  } catch (const Error& e) {
    std::cerr << nlohmann::ordered_json{{"error", error_code_name(e.code())}, {"detail", e.detail()}}.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::ordered_json{{"error", "IoError"}, {"detail", e.what()}}.dump() << '\n';
    return 2;
  }
  return 1;
}
