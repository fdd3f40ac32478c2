// End-to-end acceptance run: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "microturn/microturn.hpp"
#include "support.hpp"

using namespace microturn;

namespace {

int failures = 0;

void report(const char* name, const std::function<std::string(bool&)>& body) {
  auto start = std::chrono::steady_clock::now();
  bool ok = true;
  std::string detail;
  try {
    detail = body(ok);
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
  std::printf("%s %s (%lld ms) %s\n", ok ? "PASS" : "FAIL", name, static_cast<long long>(ms), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Mean of a binomial rate, checked against p within 3 sigma.
bool within_binomial(std::size_t hits, std::size_t n, double p, std::ostringstream& log, const char* label) {
  double rate = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
  double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
  bool ok = n > 0 && std::abs(rate - p) <= 3 * sigma;
  log << label << '=' << fmt(rate) << "/" << p << "(n=" << n << ") ";
  return ok;
}

// Mean of n draws from uniform{lo..hi}, checked within 3 sigma.
bool within_uniform(double sum, std::size_t n, int lo, int hi, std::ostringstream& log, const char* label) {
  double mean = n ? sum / static_cast<double>(n) : 0.0;
  double width = hi - lo + 1;
  double sigma = std::sqrt((width * width - 1) / 12.0 / static_cast<double>(n));
  double expected = (lo + hi) / 2.0;
  bool ok = n > 0 && std::abs(mean - expected) <= 3 * sigma;
  log << label << '=' << fmt(mean) << "/" << expected << "(n=" << n << ") ";
  return ok;
}

std::string corpus_text(const ConstructedCorpus& c, const ConstructionConfig& cfg) {
  std::string out;
  for (const auto& ts : c.sequences) out += to_json(ts).dump() + "\n";
  return out + stats_to_json(c.stats, cfg).dump();
}

std::string simulate_text(std::uint64_t seed, unsigned threads) {
  TrialConfig tcfg;
  tcfg.threads = threads;
  std::string out;
  for (Dimension d : kAllDimensions) {
    std::ostringstream text;
    write_trials(text, run_trials(generate_scenarios(d, 50, seed, {}), PolicySpec{}, tcfg));
    out += text.str();
  }
  return out;
}

std::string sweep_text(std::uint64_t seed, unsigned threads) {
  SuiteConfig cfg;
  cfg.trials.threads = threads;
  auto r = run_sweep(kDefaultSweepGrid, PolicySpec{}, 50, seed, cfg);
  return to_csv(r) + to_json(r).dump();
}

}  // namespace

int main() {
  report("table1_aggregation", [](bool& ok) {
    struct Row {
      const char* system;
      double tor[5];
      double expected;
    };
    const Row rows[] = {{"DuplexCascade", {0.058, 0.222, 0.218, 0.832, 0.955}, 0.858},
                        {"Moshi", {0.985, 0.980, 1.000, 0.941, 1.000}, 0.395},
                        {"Freeze-Omni", {0.642, 0.481, 0.636, 0.336, 0.867}, 0.489}};
    std::ostringstream log;
    for (const auto& r : rows) {
      double got = averaged_accuracy(r.tor[0], r.tor[1], r.tor[2], r.tor[3], r.tor[4]);
      ok = ok && std::abs(got - r.expected) <= 0.001;
      log << r.system << '=' << fmt(got) << ' ';
    }
    return log.str();
  });

  report("closed_loop_oracle_suite", [](bool& ok) {
    auto suite = run_suite(PolicySpec{}, 200, 1).report;
    std::ostringstream log;
    const std::map<Dimension, double> expected = {{Dimension::PauseHandling, 0.0},
                                                   {Dimension::Backchannel, 0.0},
                                                   {Dimension::SmoothTurnTaking, 1.0},
                                                   {Dimension::UserInterruption, 1.0}};
    for (auto [d, tor] : expected) {
      const auto* r = suite.find(d);
      ok = ok && r && r->n_trials == 200 && r->tor == tor;
      log << dimension_name(d) << '=' << (r ? fmt(r->tor) : "missing") << ' ';
    }
    ok = ok && suite.averaged_turn_taking_accuracy == 1.0;
    log << "accuracy=" << fmt(suite.averaged_turn_taking_accuracy.value_or(-1));
    return log.str();
  });

  report("constructor_calibration", [](bool& ok) {
    ConstructionConfig cfg;
    cfg.seed = 7;
    auto corpus = testing::synthetic_corpus(2400, 6, 200, 150, 3);
    auto built = construct_corpus(corpus, cfg, 4);
    const auto& s = built.stats;
    std::ostringstream log;
    ok = within_uniform(s.user_chunk_draw_sum, s.user_chunk_draws, cfg.user_len_min, cfg.user_len_max, log, "chunk") && ok;
    ok = within_binomial(s.pause_inserted, s.pause_eligible, cfg.p_pause, log, "pause") && ok;
    ok = within_uniform(static_cast<double>(s.pause_turns), s.pause_inserted, cfg.pause_turns_min, cfg.pause_turns_max,
                        log, "pause_k") && ok;
    ok = within_binomial(s.interrupt_applied, s.interrupt_eligible, cfg.p_interrupt, log, "interrupt") && ok;
    ok = within_binomial(s.user_bc_applied, s.user_bc_eligible, cfg.p_user_backchannel, log, "user_bc") && ok;
    ok = within_uniform(static_cast<double>(s.thinking_turns), s.thinking_inserted, cfg.thinking_turns_min,
                        cfg.thinking_turns_max, log, "thinking_k") && ok;
    std::size_t injections = s.pause_inserted + s.interrupt_applied + s.user_bc_applied + s.thinking_inserted;
    ok = ok && injections >= 10000;
    log << "injections=" << injections;
    return log.str();
  });

  report("loss_weights", [](bool& ok) {
    ConstructionConfig cfg;
    cfg.enable_system_backchannel = true;
    cfg.p_user_backchannel = 0.2;
    auto built = construct_corpus(testing::synthetic_corpus(1000, 3, 25, 30, 4, 0.05), cfg, 4);
    const std::map<ControlToken, double> expected = {
        {ControlToken::UserIsSpeaking, 1},  {ControlToken::UserFinishSpeaking, 10},
        {ControlToken::UserIsInterrupting, 5}, {ControlToken::UserBackchannel, 2},
        {ControlToken::UserIsThinking, 1},  {ControlToken::SystemBackchannel, 3}};
    std::map<ControlToken, std::size_t> seen;
    std::size_t bad = 0;
    for (const auto& ts : built.sequences) {
      Role role = Role::User;
      for (std::size_t i = 0; i < ts.tokens.size(); ++i) {
        double want = 1.0;
        if (auto c = control_from_surface(ts.tokens[i]); c && role == Role::System && *c != ControlToken::Eos) {
          want = expected.at(*c);
          ++seen[*c];
        }
        int mask = role == Role::System ? 1 : 0;
        if (ts.loss_mask[i] != mask || ts.loss_weight[i] != want) ++bad;
        if (ts.tokens[i] == kEos) role = role == Role::User ? Role::System : Role::User;
      }
    }
    ok = bad == 0 && seen.size() == expected.size() && built.sequences.size() == 1000;
    return "sequences=" + std::to_string(built.sequences.size()) + " mismatches=" + std::to_string(bad) +
           " controls_seen=" + std::to_string(seen.size());
  });

  report("sweep_monotonicity", [](bool& ok) {
    auto result = run_sweep(kDefaultSweepGrid, PolicySpec{}, 200, 1);
    std::ostringstream log;
    double prev = -1;
    for (const auto& r : result.rows) {
      ok = ok && r.smooth_latency_ms && *r.smooth_latency_ms > prev;
      prev = r.smooth_latency_ms.value_or(prev);
      log << r.delta_t_ms << ':' << fmt(r.smooth_latency_ms.value_or(-1)) << ' ';
    }
    ok = ok && result.rows.size() == kDefaultSweepGrid.size();
    return log.str();
  });

  report("protocol_round_trip", [](bool& ok) {
    Rng rng(99);
    const std::vector<std::string> vocab = {"hi", "there", "Sure,", "42", "naïve", "?", "ok.", "a_b", "x"};
    std::size_t broken = 0;
    for (int i = 0; i < 10000; ++i) {
      MicroTurn t;
      t.role = bernoulli(rng, 0.5) ? Role::User : Role::System;
      t.t_start = uniform_int(rng, 0, 1000000);
      std::vector<std::optional<ControlToken>> options = {std::nullopt};
      for (ControlToken c : kAllControlTokens) {
        if (control_legal_for(c, t.role)) options.push_back(c);
      }
      t.control = options[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(options.size()) - 1))];
      int n = t.control && control_requires_empty(*t.control) ? 0 : uniform_int(rng, 1, 12);
      for (int k = 0; k < n; ++k) {
        t.tokens.push_back(vocab[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(vocab.size()) - 1))]);
      }
      if (!is_valid(t) || parse_micro_turn(render_micro_turn(t), t.role, ParseMode::Strict, t.t_start) != t) ++broken;
    }
    ConstructionConfig cfg;
    cfg.enable_system_backchannel = true;
    auto built = construct_corpus(testing::synthetic_corpus(500, 4, 40, 60, 8, 0.05), cfg, 4);
    std::size_t violations = 0;
    for (const auto& ts : built.sequences) {
      violations += validate_training_sequence(training_sequence_from_json(nlohmann::json::parse(to_json(ts).dump()))).size();
    }
    ok = broken == 0 && violations == 0;
    return "round_trip_failures=" + std::to_string(broken) + "/10000 validate_violations=" + std::to_string(violations);
  });

  report("determinism", [](bool& ok) {
    ConstructionConfig cfg;
    cfg.seed = 21;
    cfg.enable_system_backchannel = true;
    auto corpus = testing::synthetic_corpus(400, 4, 30, 40, 5, 0.05);
    auto c1 = corpus_text(construct_corpus(corpus, cfg, 1), cfg);
    auto c2 = corpus_text(construct_corpus(corpus, cfg, 1), cfg);
    auto c8 = corpus_text(construct_corpus(corpus, cfg, 8), cfg);
    bool construct_ok = c1 == c2 && c1 == c8;
    bool simulate_ok = simulate_text(3, 1) == simulate_text(3, 1) && simulate_text(3, 1) == simulate_text(3, 8);
    bool sweep_ok = sweep_text(3, 1) == sweep_text(3, 1) && sweep_text(3, 1) == sweep_text(3, 8);
    ok = construct_ok && simulate_ok && sweep_ok;
    return std::string("construct=") + (construct_ok ? "same" : "differs") + " simulate=" +
           (simulate_ok ? "same" : "differs") + " sweep=" + (sweep_ok ? "same" : "differs");
  });

  return failures == 0 ? 0 : 1;
}
