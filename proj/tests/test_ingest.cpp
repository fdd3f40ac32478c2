#include <gtest/gtest.h>

#include <sstream>

#include "microturn/ingest.hpp"
#include "microturn/orchestrator.hpp"
#include "microturn/policy.hpp"
#include "microturn/rng.hpp"

using namespace microturn;

namespace {

std::vector<std::string> toks(std::initializer_list<const char*> list) {
  return {list.begin(), list.end()};
}

class SilentPolicy : public Policy {
 public:
  PolicyResponse decide(const PolicyRequest& req) override {
    return {system_turn(ControlToken::UserIsSpeaking, {}, req.latest().t_start)};
  }
  std::string name() const override { return "silent"; }
};

std::vector<MicroTurn> flushed_turns(const SessionTranscript& transcript) {
  std::vector<MicroTurn> out;
  for (const auto& r : transcript) {
    if (r.kind != kind::kFlush) continue;
    MicroTurn t;
    t.role = Role::User;
    t.control = r.control;
    t.tokens = r.tokens.value_or(std::vector<std::string>{});
    t.t_start = r.t_ms;
    out.push_back(t);
  }
  return out;
}

}  // namespace

TEST(Ingestor, PartialsAccumulate) {
  Ingestor in;
  in.ingest_partial({200, "how are"});
  EXPECT_EQ(in.buffer(), toks({"how", "are"}));
  in.ingest_partial({450, "you"});
  EXPECT_EQ(in.buffer(), toks({"how", "are", "you"}));
  in.ingest_partial({500, ""});
  EXPECT_EQ(in.buffer(), toks({"how", "are", "you"}));
}

TEST(Ingestor, FlushEmitsContentOrSilence) {
  Ingestor in;
  in.ingest_partial({200, "how are"});
  EXPECT_EQ(in.flush(600), user_turn(toks({"how", "are"}), 600));
  EXPECT_TRUE(in.buffer().empty());
  EXPECT_EQ(in.flush(1200), user_silence(1200));
}

TEST(Ingestor, OutOfOrderEventsRejected) {
  Ingestor in;
  in.ingest_partial({500, "a"});
  try {
    in.ingest_partial({499, "b"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OutOfOrderEvent);
  }
  in.ingest_partial({500, "c"});
}

TEST(Ingestor, TypedControlSurfacesAreDropped) {
  Ingestor in;
  in.ingest_partial({10, "hi <user is speaking> there <EOS>"});
  EXPECT_EQ(in.buffer(), toks({"hi", "there"}));
}

TEST(FlushClock, Schedule) {
  FlushClock clock(600);
  EXPECT_EQ(clock.advance(), 600);
  EXPECT_EQ(clock.advance(), 1200);
  EXPECT_EQ(clock.advance(), 1800);
  EXPECT_TRUE(FlushClock::is_flush_instant(1800, 600));
  EXPECT_FALSE(FlushClock::is_flush_instant(0, 600));
  EXPECT_FALSE(FlushClock::is_flush_instant(1799, 600));
  EXPECT_THROW(FlushClock(0), Error);
}

TEST(FlushBoundary, EventOnFlushInstantBelongsToNextInterval) {
  SilentPolicy policy;
  SessionConfig cfg;
  cfg.horizon_ms = 1200;
  std::vector<AsrPartialEvent> events = {{599, "early"}, {600, "late"}};
  auto turns = flushed_turns(run_session(events, policy, cfg));
  ASSERT_EQ(turns.size(), 2u);
  EXPECT_EQ(turns[0], user_turn(toks({"early"}), 600));
  EXPECT_EQ(turns[1], user_turn(toks({"late"}), 1200));
}

TEST(FlushProperties, OneTurnPerFlushAndNoTokenLost) {
  Rng rng(5);
  SilentPolicy policy;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<AsrPartialEvent> events;
    std::vector<std::string> all;
    TimeMs t = 0;
    int n = uniform_int(rng, 0, 30);
    for (int i = 0; i < n; ++i) {
      t += uniform_int(rng, 0, 700);
      std::string text;
      int words = uniform_int(rng, 0, 3);
      for (int w = 0; w < words; ++w) {
        std::string word = "w" + std::to_string(i) + "_" + std::to_string(w);
        all.push_back(word);
        text += (w ? " " : "") + word;
      }
      events.push_back({t, text});
    }
    SessionConfig cfg;
    cfg.orchestrator.delta_t_ms = uniform_int(rng, 100, 1000);
    cfg.horizon_ms = t + cfg.orchestrator.delta_t_ms;
    auto turns = flushed_turns(run_session(events, policy, cfg));
    ASSERT_EQ(static_cast<TimeMs>(turns.size()), cfg.horizon_ms / cfg.orchestrator.delta_t_ms);
    std::vector<std::string> got;
    for (std::size_t k = 0; k < turns.size(); ++k) {
      EXPECT_EQ(turns[k].t_start, static_cast<TimeMs>(k + 1) * cfg.orchestrator.delta_t_ms);
      EXPECT_TRUE(is_valid(turns[k]));
      got.insert(got.end(), turns[k].tokens.begin(), turns[k].tokens.end());
    }
    EXPECT_EQ(got, all);
  }
}

TEST(FlushProperties, NoEventsMeansAllSilence) {
  SilentPolicy policy;
  SessionConfig cfg;
  cfg.horizon_ms = 6000;
  auto turns = flushed_turns(run_session({}, policy, cfg));
  ASSERT_EQ(turns.size(), 10u);
  for (const auto& t : turns) EXPECT_TRUE(t.is(ControlToken::NoVoice));
}

TEST(EventFile, RoundTrip) {
  std::vector<AsrPartialEvent> events = {{0, "hello"}, {350, "there friend"}, {900, ""}};
  std::stringstream ss;
  write_event_file(ss, events);
  EXPECT_EQ(ss.str().substr(0, 27), "{\"t_ms\":0,\"text\":\"hello\"}\n{");
  EXPECT_EQ(read_event_file(ss), events);

  std::stringstream bad("{\"t_ms\": \"x\", \"text\": \"a\"}\n");
  EXPECT_THROW(read_event_file(bad), Error);
  std::stringstream garbage("not json\n");
  EXPECT_THROW(read_event_file(garbage), Error);
}
