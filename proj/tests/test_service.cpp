#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "microturn/service.hpp"

using namespace microturn;
using nlohmann::json;

namespace {

class Collector {
 public:
  std::vector<json> messages;
  WireSession::Send send() {
    return [this](const nlohmann::ordered_json& m) { messages.push_back(json::parse(m.dump())); };
  }
  std::vector<json> of_type(std::string_view type) const {
    std::vector<json> out;
    for (const auto& m : messages) {
      if (m["type"] == type) out.push_back(m);
    }
    return out;
  }
};

// Line or frame client over a plain TCP socket.
int dial(int port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw std::runtime_error("connect failed");
  }
  return fd;
}

class Client {
 public:
  explicit Client(int port) : fd_(dial(port)), reader_(fd_) {}
  ~Client() { ::close(fd_); }

  void send_raw(std::string_view data) { net::send_all(fd_, data); }
  void send_line(const json& j) { send_raw(j.dump() + "\n"); }

  /// Next NDJSON message, or nullopt after `timeout_ms`.
  std::optional<json> read_line(TimeMs timeout_ms) {
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    while (true) {
      if (auto nl = reader_.buf.find('\n'); nl != std::string::npos) {
        auto line = reader_.buf.substr(0, nl);
        reader_.buf.erase(0, nl + 1);
        return json::parse(line);
      }
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()).count();
      if (left <= 0 || reader_.fill(left) <= 0) return std::nullopt;
    }
  }

  /// Reads until `pred` matches or the timeout passes; keeps everything seen.
  std::optional<json> read_until(TimeMs timeout_ms, const std::function<bool(const json&)>& pred) {
    auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    while (true) {
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()).count();
      if (left <= 0) return std::nullopt;
      auto m = read_line(left);
      if (!m) return std::nullopt;
      seen.push_back(*m);
      if (pred(*m)) return m;
    }
  }

  std::string read_http_head(TimeMs timeout_ms) {
    while (reader_.buf.find("\r\n\r\n") == std::string::npos) {
      if (reader_.fill(timeout_ms) <= 0) return {};
    }
    auto end = reader_.buf.find("\r\n\r\n");
    auto head = reader_.buf.substr(0, end);
    reader_.buf.erase(0, end + 4);
    return head;
  }

  void send_ws_text(std::string_view payload, bool fragment = false) {
    const unsigned char mask[4] = {0x12, 0x34, 0x56, 0x78};
    auto frame = [&](unsigned char first, std::string_view part) {
      std::string f;
      f += static_cast<char>(first);
      f += static_cast<char>(0x80 | part.size());
      f.append(reinterpret_cast<const char*>(mask), 4);
      for (std::size_t i = 0; i < part.size(); ++i) f += static_cast<char>(part[i] ^ mask[i % 4]);
      return f;
    };
    if (fragment) {
      auto half = payload.size() / 2;
      send_raw(frame(0x01, payload.substr(0, half)));
      send_raw(frame(0x80, payload.substr(half)));
    } else {
      send_raw(frame(0x81, payload));
    }
  }

  /// One unmasked server frame: (opcode, payload).
  std::optional<std::pair<int, std::string>> read_ws(TimeMs timeout_ms) {
    while (true) {
      auto& b = reader_.buf;
      if (b.size() >= 2) {
        std::size_t len = static_cast<unsigned char>(b[1]) & 0x7F;
        std::size_t pos = 2;
        if (len == 126 && b.size() >= 4) {
          len = (static_cast<std::size_t>(static_cast<unsigned char>(b[2])) << 8) | static_cast<unsigned char>(b[3]);
          pos = 4;
        }
        if ((len < 126 || pos == 4) && b.size() >= pos + len) {
          int opcode = static_cast<unsigned char>(b[0]) & 0x0F;
          auto payload = b.substr(pos, len);
          b.erase(0, pos + len);
          return std::make_pair(opcode, payload);
        }
      }
      if (reader_.fill(timeout_ms) <= 0) return std::nullopt;
    }
  }

  std::vector<json> seen;

 private:
  int fd_ = -1;
  net::Reader reader_;
};

std::unique_ptr<Client> connect(int port) { return std::make_unique<Client>(port); }

ServiceConfig local_config() {
  ServiceConfig cfg;
  cfg.port = 0;
  return cfg;
}

}  // namespace

TEST(Wire, ErrorCodes) {
  EXPECT_EQ(wire_code(ErrorCode::BadMessage), "bad_message");
  EXPECT_EQ(wire_code(ErrorCode::InvalidConfig), "invalid_config");
  EXPECT_EQ(wire_code(ErrorCode::PolicyProtocolError), "policy_protocol_error");
}

TEST(Wire, MessageMapping) {
  TranscriptRecord policy{600, std::string(kind::kPolicy), Role::System, ControlToken::UserFinishSpeaking,
                          std::vector<std::string>{"Hi"}, std::nullopt, std::nullopt};
  EXPECT_EQ(wire_message(policy, 100)->dump(),
            R"({"type":"system_micro_turn","t_ms":700,"control":"<user finish speaking>","tokens":["Hi"]})");
  TranscriptRecord cont = policy;
  cont.control.reset();
  EXPECT_TRUE((*wire_message(cont))["control"].is_null());
  TranscriptRecord speech{900, std::string(kind::kSpeech), Role::System, std::nullopt,
                          std::vector<std::string>{"Hi"}, std::nullopt, std::nullopt};
  EXPECT_EQ(wire_message(speech)->dump(), R"({"type":"speech","t_ms":900,"token":"Hi"})");
  TranscriptRecord clip{1200, std::string(kind::kBackchannelClip), Role::System, std::nullopt, std::nullopt,
                        std::string("c3"), std::nullopt};
  EXPECT_EQ(wire_message(clip)->dump(), R"({"type":"backchannel_clip","t_ms":1200,"clip_id":"c3"})");
  TranscriptRecord abort{1300, std::string(kind::kAbort), Role::System, std::nullopt, std::nullopt, std::nullopt, std::nullopt};
  EXPECT_EQ(wire_message(abort)->dump(), R"({"type":"abort","t_ms":1300})");
  TranscriptRecord flush{600, std::string(kind::kFlush), Role::System, std::nullopt, std::nullopt, std::nullopt, std::nullopt};
  EXPECT_FALSE(wire_message(flush));
}

TEST(WireSession, MatchesOfflineReplay) {
  auto script = generate_scenario(Dimension::UserInterruption, 3, {});
  ServiceConfig cfg = local_config();
  cfg.policy = PolicySpec{PolicySpec::Kind::Oracle, {}};
  cfg.script = script;
  Collector out;
  WireSession session(cfg, out.send());
  for (const auto& ev : script.events) {
    session.tick(ev.t_ms);
    EXPECT_TRUE(session.on_frame(json{{"type", "user_text"}, {"text", ev.text_delta}}.dump(), ev.t_ms));
  }
  session.tick(script.horizon_ms);

  OraclePolicy policy(script);
  SessionConfig offline;
  offline.horizon_ms = script.horizon_ms;
  EXPECT_EQ(session.transcript(), run_session(script.events, policy, offline));
  EXPECT_EQ(session.events(), script.events);
  EXPECT_FALSE(out.of_type("abort").empty());
  EXPECT_FALSE(out.of_type("speech").empty());
  EXPECT_TRUE(out.of_type("error").empty());
}

TEST(WireSession, BadMessagesKeepTheSessionOpen) {
  Collector out;
  WireSession session(local_config(), out.send());
  EXPECT_TRUE(session.on_frame("not json", 10));
  EXPECT_TRUE(session.on_frame(R"({"text":"x"})", 20));
  EXPECT_TRUE(session.on_frame(R"({"type":"dance"})", 30));
  EXPECT_TRUE(session.on_frame(R"({"type":"user_text"})", 40));
  EXPECT_TRUE(session.on_frame(R"({"type":"user_text","text":"hi","t_ms":"soon"})", 50));
  auto errors = out.of_type("error");
  ASSERT_EQ(errors.size(), 5u);
  for (const auto& e : errors) EXPECT_EQ(e["code"], "bad_message");
  EXPECT_TRUE(session.on_frame(R"({"type":"user_text","text":"hi"})", 60));
  EXPECT_FALSE(session.on_frame(R"({"type":"end_session"})", 70));
}

TEST(WireSession, ConfigBeforeFirstText) {
  Collector out;
  WireSession session(local_config(), out.send());
  session.tick(700);
  ASSERT_EQ(out.of_type("system_micro_turn").size(), 1u);
  EXPECT_TRUE(session.on_frame(R"({"type":"set_config","delta_t_ms":300,"seed":4})", 1000));
  EXPECT_EQ(session.config().orchestrator.delta_t_ms, 300);
  EXPECT_EQ(session.offset(), 1000);
  EXPECT_TRUE(session.transcript().empty());
  session.tick(1650);
  auto turns = out.of_type("system_micro_turn");
  ASSERT_EQ(turns.size(), 3u);
  EXPECT_EQ(turns[1]["t_ms"], 1300);
  EXPECT_EQ(turns[2]["t_ms"], 1600);

  session.on_frame(R"({"type":"set_config","colour":"red"})", 1700);
  session.on_frame(R"({"type":"set_config","delta_t_ms":-5})", 1700);
  session.on_frame(R"({"type":"set_config","policy":"oracle"})", 1700);
  auto errors = out.of_type("error");
  ASSERT_EQ(errors.size(), 3u);
  for (const auto& e : errors) EXPECT_EQ(e["code"], "invalid_config");
  EXPECT_EQ(session.config().orchestrator.delta_t_ms, 300);

  session.on_frame(R"({"type":"user_text","text":"hello"})", 1800);
  session.on_frame(R"({"type":"set_config","delta_t_ms":600})", 1900);
  ASSERT_EQ(out.of_type("error").size(), 4u);
  EXPECT_EQ(out.of_type("error").back()["code"], "config_locked");
}

TEST(Server, SilenceProducesSystemTurns) {
  Server server(local_config());
  server.start();
  auto c = connect(server.port());
  c->send_line({{"type", "set_config"}, {"delta_t_ms", 600}});
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(3300);
  int turns = 0;
  while (std::chrono::steady_clock::now() < deadline) {
    auto m = c->read_line(200);
    if (m && (*m)["type"] == "system_micro_turn") ++turns;
  }
  EXPECT_GE(turns, 4);
  server.stop();
}

TEST(Server, InterruptionAbortsPlayback) {
  Server server(local_config());
  server.start();
  auto c = connect(server.port());
  c->send_line({{"type", "user_text"}, {"text", "what is the weather ?"}});
  auto first = c->read_until(3000, [](const json& m) { return m["type"] == "speech"; });
  ASSERT_TRUE(first) << "no speech";
  c->send_line({{"type", "user_text"}, {"text", "wait stop that now"}});
  auto abort = c->read_until(3000, [](const json& m) { return m["type"] == "abort"; });
  ASSERT_TRUE(abort) << "no abort";
  // Nothing plays after the abort.
  auto more = c->read_until(1500, [](const json& m) { return m["type"] == "speech"; });
  EXPECT_FALSE(more);
  bool ufs = false;
  for (const auto& m : c->seen) {
    if (m["type"] == "system_micro_turn" && m["control"] == "<user finish speaking>") ufs = true;
  }
  EXPECT_TRUE(ufs);
  server.stop();
}

TEST(Server, BadFrameGetsErrorAndSessionContinues) {
  Server server(local_config());
  server.start();
  auto c = connect(server.port());
  c->send_raw("{oops\n");
  auto err = c->read_until(2000, [](const json& m) { return m["type"] == "error"; });
  ASSERT_TRUE(err);
  EXPECT_EQ((*err)["code"], "bad_message");
  auto next = c->read_until(2000, [](const json& m) { return m["type"] == "system_micro_turn"; });
  EXPECT_TRUE(next);
  server.stop();
}

TEST(Server, WebSocketTransport) {
  Server server(local_config());
  server.start();
  auto c = connect(server.port());
  c->send_raw(
      "GET /session HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
      "Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n");
  auto head = c->read_http_head(2000);
  EXPECT_NE(head.find("101 Switching Protocols"), std::string::npos);
  EXPECT_NE(head.find("Sec-WebSocket-Accept: s3pPLMBiTxaQ9kYGzzhZRbK+xOo="), std::string::npos);

  c->send_ws_text(R"({"type":"bogus"})", true);
  bool got_error = false;
  bool got_turn = false;
  for (int i = 0; i < 20 && !(got_error && got_turn); ++i) {
    auto f = c->read_ws(1000);
    ASSERT_TRUE(f);
    EXPECT_EQ(f->first, 1);
    auto m = json::parse(f->second);
    if (m["type"] == "error") got_error = m["code"] == "bad_message";
    if (m["type"] == "system_micro_turn") got_turn = true;
  }
  EXPECT_TRUE(got_error);
  EXPECT_TRUE(got_turn);

  std::string close = {static_cast<char>(0x88), static_cast<char>(0x80), 0, 0, 0, 0};
  c->send_raw(close);
  std::optional<std::pair<int, std::string>> f;
  do {
    f = c->read_ws(1000);
  } while (f && f->first != 8);
  ASSERT_TRUE(f);
  server.stop();
}

TEST(Server, RecordsFrames) {
  auto path = std::filesystem::temp_directory_path() / ("microturn_record_" + std::to_string(::getpid()) + ".jsonl");
  std::filesystem::remove(path);
  auto cfg = local_config();
  cfg.record_path = path.string();
  {
    Server server(cfg);
    server.start();
    auto c = connect(server.port());
    c->send_line({{"type", "user_text"}, {"text", "hello"}});
    c->read_until(1500, [](const json& m) { return m["type"] == "system_micro_turn"; });
    c->send_line({{"type", "end_session"}});
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  }
  std::ifstream in(path);
  std::string line;
  bool in_frame = false, out_frame = false;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    EXPECT_TRUE(j.contains("session"));
    EXPECT_TRUE(j.contains("t_ms"));
    if (j["dir"] == "in" && j["frame"]["type"] == "user_text") in_frame = true;
    if (j["dir"] == "out" && j["frame"]["type"] == "system_micro_turn") out_frame = true;
  }
  EXPECT_TRUE(in_frame);
  EXPECT_TRUE(out_frame);
  std::filesystem::remove(path);
}

TEST(Server, BindErrors) {
  Server first(local_config());
  first.start();
  auto cfg = local_config();
  cfg.port = first.port();
  Server second(cfg);
  try {
    second.start();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BindError);
  }
  cfg.host = "not-an-address";
  cfg.port = 0;
  Server third(cfg);
  EXPECT_THROW(third.start(), Error);
  ServiceConfig oracle = local_config();
  oracle.policy = PolicySpec{PolicySpec::Kind::Oracle, {}};
  EXPECT_THROW(Server{oracle}, Error);
}
