#pragma once

// Duplex session server. Each connection owns one engine clocked by the
// server; frames are newline-delimited JSON, or WebSocket text frames when the
// connection opens with an HTTP upgrade request.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <openssl/evp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/orchestrator.hpp"
#include "microturn/trials.hpp"

namespace microturn {

/// Milliseconds since the session started.
using SessionClock = std::function<TimeMs()>;

inline SessionClock wall_clock() {
  auto start = std::chrono::steady_clock::now();
  return [start] {
    return static_cast<TimeMs>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                   std::chrono::steady_clock::now() - start)
                                   .count());
  };
}

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8765;  // 0 picks a free port
  OrchestratorConfig orchestrator;
  PolicySpec policy{PolicySpec::Kind::Heuristic, {}};
  std::optional<ScenarioScript> script;  // required by the oracle policy
  TimeMs takeover_window_ms = 3000;
  std::optional<std::string> record_path;
  std::function<SessionClock()> clock_factory = wall_clock;

  void check() const {
    orchestrator.check();
    if (policy.kind == PolicySpec::Kind::Oracle && !script) {
      throw Error(ErrorCode::InvalidConfig, "oracle policy requires a scenario script");
    }
    if (takeover_window_ms <= 0) throw Error(ErrorCode::InvalidConfig, "takeover window <= 0");
  }
};

/// "BadMessage" -> "bad_message".
inline std::string wire_code(ErrorCode code) {
  std::string out;
  for (char c : error_code_name(code)) {
    if (std::isupper(static_cast<unsigned char>(c))) {
      if (!out.empty()) out += '_';
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else {
      out += c;
    }
  }
  return out;
}

inline nlohmann::ordered_json wire_error(std::string code, std::string detail) {
  return {{"type", "error"}, {"code", std::move(code)}, {"detail", std::move(detail)}};
}

/// Server message for a transcript record; nullopt for bookkeeping records
/// that have no wire form.
inline std::optional<nlohmann::ordered_json> wire_message(const TranscriptRecord& r, TimeMs offset = 0) {
  const TimeMs t = r.t_ms + offset;
  if (r.kind == kind::kPolicy) {
    nlohmann::ordered_json j{{"type", "system_micro_turn"}, {"t_ms", t}};
    j["control"] = r.control ? nlohmann::ordered_json(surface(*r.control)) : nlohmann::ordered_json(nullptr);
    j["tokens"] = r.tokens.value_or(std::vector<std::string>{});
    return j;
  }
  if (r.kind == kind::kSpeech && r.tokens && !r.tokens->empty()) {
    return nlohmann::ordered_json{{"type", "speech"}, {"t_ms", t}, {"token", r.tokens->front()}};
  }
  if (r.kind == kind::kAbort) return nlohmann::ordered_json{{"type", "abort"}, {"t_ms", t}};
  if (r.kind == kind::kBackchannelClip) {
    return nlohmann::ordered_json{{"type", "backchannel_clip"}, {"t_ms", t}, {"clip_id", r.clip_id.value_or("")}};
  }
  if (r.kind == kind::kPolicyError) return wire_error("policy_error", r.detail.value_or(""));
  return std::nullopt;
}

/// Protocol logic of one session, independent of transport and clock.
class WireSession {
 public:
  using Send = std::function<void(const nlohmann::ordered_json&)>;

  WireSession(ServiceConfig cfg, Send send) : cfg_(std::move(cfg)), send_(std::move(send)) {
    cfg_.check();
    rebuild(0);
  }

  /// Runs every flush and playback instant up to `now`.
  void tick(TimeMs now) { engine_->advance_to(std::max<TimeMs>(0, now - offset_)); }

  /// Absolute session time of the next thing the engine has to do.
  TimeMs next_deadline() const { return engine_->next_deadline() + offset_; }

  /// Handles one client frame; returns false once the client ended the session.
  bool on_frame(std::string_view text, TimeMs now) {
    tick(now);
    nlohmann::json msg;
    try {
      msg = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      send_(wire_error("bad_message", e.what()));
      return true;
    }
    if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) {
      send_(wire_error("bad_message", "frame needs a string \"type\""));
      return true;
    }
    const auto type = msg["type"].get<std::string>();
    try {
      if (type == "user_text") {
        if (!msg.contains("text") || !msg["text"].is_string()) {
          send_(wire_error("bad_message", "user_text needs a string \"text\""));
          return true;
        }
        if (msg.contains("t_ms") && !msg["t_ms"].is_number()) {
          send_(wire_error("bad_message", "t_ms must be a number"));
          return true;
        }
        // The server clock, not the client's, places the event.
        AsrPartialEvent ev{std::max<TimeMs>(0, now - offset_), msg["text"].get<std::string>()};
        engine_->push_event(ev);
        events_.push_back(ev);
        got_text_ = true;
      } else if (type == "set_config") {
        if (got_text_) {
          send_(wire_error("config_locked", "configuration is fixed after the first user_text"));
          return true;
        }
        apply_config(msg, now);
      } else if (type == "end_session") {
        return false;
      } else {
        send_(wire_error("bad_message", "unknown message type '" + type + "'"));
      }
    } catch (const Error& e) {
      send_(wire_error(wire_code(e.code()), e.detail()));
    }
    return true;
  }

  const SessionTranscript& transcript() const { return transcript_; }
  const std::vector<AsrPartialEvent>& events() const { return events_; }
  const ServiceConfig& config() const { return cfg_; }
  TimeMs offset() const { return offset_; }

 private:
  void rebuild(TimeMs now) {
    offset_ = now;
    policy_ = make_policy(cfg_.policy, cfg_.script ? &*cfg_.script : nullptr);
    transcript_.clear();
    engine_ = std::make_unique<DuplexEngine>(cfg_.orchestrator, *policy_, [this](const TranscriptRecord& r) {
      transcript_.push_back(r);
      if (auto msg = wire_message(r, offset_)) send_(*msg);
    });
  }

  void apply_config(const nlohmann::json& msg, TimeMs now) {
    ServiceConfig next = cfg_;
    try {
      for (const auto& [key, value] : msg.items()) {
        if (key == "type") continue;
        if (key == "delta_t_ms") {
          next.orchestrator.delta_t_ms = value.get<TimeMs>();
        } else if (key == "tokens_per_second") {
          next.orchestrator.playback.tokens_per_second = value.get<double>();
        } else if (key == "seed") {
          next.orchestrator.seed = value.get<std::uint64_t>();
        } else if (key == "max_system_tokens") {
          next.orchestrator.max_system_tokens = value.get<int>();
        } else if (key == "takeover_window_ms") {
          next.takeover_window_ms = value.get<TimeMs>();
        } else if (key == "policy") {
          next.policy = parse_policy_spec(value.get<std::string>());
        } else {
          throw Error(ErrorCode::InvalidConfig, "unknown setting '" + key + "'");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidConfig, e.what());
    }
    next.check();
    cfg_ = std::move(next);
    rebuild(now);
  }

  ServiceConfig cfg_;
  Send send_;
  std::unique_ptr<Policy> policy_;
  std::unique_ptr<DuplexEngine> engine_;
  SessionTranscript transcript_;
  std::vector<AsrPartialEvent> events_;
  TimeMs offset_ = 0;
  bool got_text_ = false;
};

// ---------------------------------------------------------------------------
// Transport

namespace net {

enum class ReadStatus { Message, Timeout, Closed };

inline std::string base64(const unsigned char* data, std::size_t n) {
  std::string out(4 * ((n + 2) / 3), '\0');
  int len = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data, static_cast<int>(n));
  out.resize(static_cast<std::size_t>(len));
  return out;
}

inline std::string websocket_accept(std::string_view key) {
  std::string input = std::string(key) + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(input.data(), input.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error(ErrorCode::IoError, "SHA-1 failed");
  }
  return base64(digest, len);
}

inline void send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      throw Error(ErrorCode::IoError, "send failed");
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

/// Buffered reads with a timeout.
class Reader {
 public:
  explicit Reader(int fd) : fd_(fd) {}

  /// 1: data appended, 0: timeout, -1: peer closed.
  int fill(TimeMs timeout_ms) {
    pollfd p{fd_, POLLIN, 0};
    int r = ::poll(&p, 1, static_cast<int>(std::max<TimeMs>(0, timeout_ms)));
    if (r == 0) return 0;
    if (r < 0) return errno == EINTR ? 0 : -1;
    char chunk[4096];
    ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n <= 0) return -1;
    buf.append(chunk, static_cast<std::size_t>(n));
    return 1;
  }

  std::string buf;

 private:
  int fd_;
};

class Channel {
 public:
  virtual ~Channel() = default;
  virtual ReadStatus read(std::string& out, TimeMs timeout_ms) = 0;
  virtual void write(std::string_view text) = 0;
};

class NdjsonChannel : public Channel {
 public:
  NdjsonChannel(int fd, Reader& reader) : fd_(fd), reader_(reader) {}

  ReadStatus read(std::string& out, TimeMs timeout_ms) override {
    while (true) {
      if (auto nl = reader_.buf.find('\n'); nl != std::string::npos) {
        out = reader_.buf.substr(0, nl);
        if (!out.empty() && out.back() == '\r') out.pop_back();
        reader_.buf.erase(0, nl + 1);
        if (out.find_first_not_of(" \t") == std::string::npos) continue;
        return ReadStatus::Message;
      }
      int r = reader_.fill(timeout_ms);
      if (r == 0) return ReadStatus::Timeout;
      if (r < 0) return ReadStatus::Closed;
    }
  }

  void write(std::string_view text) override {
    std::string frame(text);
    frame += '\n';
    send_all(fd_, frame);
  }

 private:
  int fd_;
  Reader& reader_;
};

class WebSocketChannel : public Channel {
 public:
  WebSocketChannel(int fd, Reader& reader) : fd_(fd), reader_(reader) {}

  ReadStatus read(std::string& out, TimeMs timeout_ms) override {
    while (true) {
      if (auto status = parse_frame(out)) return *status;
      int r = reader_.fill(timeout_ms);
      if (r == 0) return ReadStatus::Timeout;
      if (r < 0) return ReadStatus::Closed;
    }
  }

  void write(std::string_view text) override { send_frame(0x1, text); }

 private:
  void send_frame(unsigned char opcode, std::string_view payload) {
    std::string frame;
    frame += static_cast<char>(0x80 | opcode);
    if (payload.size() < 126) {
      frame += static_cast<char>(payload.size());
    } else if (payload.size() <= 0xFFFF) {
      frame += static_cast<char>(126);
      frame += static_cast<char>((payload.size() >> 8) & 0xFF);
      frame += static_cast<char>(payload.size() & 0xFF);
    } else {
      frame += static_cast<char>(127);
      for (int i = 7; i >= 0; --i) frame += static_cast<char>((payload.size() >> (8 * i)) & 0xFF);
    }
    frame.append(payload);
    send_all(fd_, frame);
  }

  /// Consumes complete frames from the buffer; nullopt when more bytes are needed.
  std::optional<ReadStatus> parse_frame(std::string& out) {
    auto& b = reader_.buf;
    while (true) {
      if (b.size() < 2) return std::nullopt;
      auto byte = [&](std::size_t i) { return static_cast<unsigned char>(b[i]); };
      const bool fin = byte(0) & 0x80;
      const unsigned opcode = byte(0) & 0x0F;
      const bool masked = byte(1) & 0x80;
      std::uint64_t len = byte(1) & 0x7F;
      std::size_t pos = 2;
      if (len == 126) {
        if (b.size() < 4) return std::nullopt;
        len = (std::uint64_t{byte(2)} << 8) | byte(3);
        pos = 4;
      } else if (len == 127) {
        if (b.size() < 10) return std::nullopt;
        len = 0;
        for (int i = 0; i < 8; ++i) len = (len << 8) | byte(2 + static_cast<std::size_t>(i));
        pos = 10;
      }
      unsigned char mask[4] = {0, 0, 0, 0};
      if (masked) {
        if (b.size() < pos + 4) return std::nullopt;
        for (int i = 0; i < 4; ++i) mask[i] = byte(pos + static_cast<std::size_t>(i));
        pos += 4;
      }
      if (b.size() < pos + len) return std::nullopt;
      std::string payload = b.substr(pos, static_cast<std::size_t>(len));
      b.erase(0, pos + static_cast<std::size_t>(len));
      if (masked) {
        for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<char>(payload[i] ^ mask[i % 4]);
      }
      switch (opcode) {
        case 0x0:
        case 0x1:
        case 0x2:
          partial_ += payload;
          if (fin) {
            out = std::move(partial_);
            partial_.clear();
            return ReadStatus::Message;
          }
          break;
        case 0x8:
          send_frame(0x8, payload.substr(0, std::min<std::size_t>(payload.size(), 2)));
          return ReadStatus::Closed;
        case 0x9:
          send_frame(0xA, payload);
          break;
        default:
          break;
      }
    }
  }

  int fd_;
  Reader& reader_;
  std::string partial_;
};

/// Completes the HTTP upgrade in `reader.buf`; false if the request is not a
/// WebSocket handshake.
inline bool accept_websocket(int fd, Reader& reader, TimeMs timeout_ms) {
  std::size_t end;
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while ((end = reader.buf.find("\r\n\r\n")) == std::string::npos) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()).count();
    if (left <= 0 || reader.fill(left) < 0) return false;
  }
  std::string head = reader.buf.substr(0, end);
  reader.buf.erase(0, end + 4);
  std::string key;
  std::size_t pos = 0;
  while (pos < head.size()) {
    auto eol = head.find("\r\n", pos);
    if (eol == std::string::npos) eol = head.size();
    std::string line = head.substr(pos, eol - pos);
    pos = eol + 2;
    auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string name = line.substr(0, colon);
    for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (name == "sec-websocket-key") {
      key = line.substr(colon + 1);
      key.erase(0, key.find_first_not_of(" \t"));
      key.erase(key.find_last_not_of(" \t") + 1);
    }
  }
  if (key.empty()) {
    send_all(fd, "HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
    return false;
  }
  send_all(fd, "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
               "Sec-WebSocket-Accept: " + websocket_accept(key) + "\r\n\r\n");
  return true;
}

}  // namespace net

/// Appends every frame of every session to one NDJSON file.
class FrameRecorder {
 public:
  explicit FrameRecorder(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw Error(ErrorCode::IoError, "cannot open record file " + path);
  }

  void record(std::uint64_t session, std::string_view dir, TimeMs t_ms, const nlohmann::ordered_json& frame) {
    nlohmann::ordered_json j{{"session", session}, {"dir", dir}, {"t_ms", t_ms}, {"frame", frame}};
    std::lock_guard lock(mutex_);
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::mutex mutex_;
};

class Server {
 public:
  explicit Server(ServiceConfig cfg) : cfg_(std::move(cfg)) { cfg_.check(); }
  ~Server() { stop(); }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts accepting; throws BindError.
  void start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(ErrorCode::BindError, "socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(cfg_.port));
    if (::inet_pton(AF_INET, cfg_.host.c_str(), &addr.sin_addr) != 1) {
      close_listener();
      throw Error(ErrorCode::BindError, "bad bind address " + cfg_.host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(listen_fd_, 64) != 0) {
      std::string why = std::strerror(errno);
      close_listener();
      throw Error(ErrorCode::BindError, cfg_.host + ":" + std::to_string(cfg_.port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    if (cfg_.record_path) recorder_ = std::make_unique<FrameRecorder>(*cfg_.record_path);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  int port() const { return port_; }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    close_listener();
    if (acceptor_.joinable()) acceptor_.join();
    std::list<Connection> sessions;
    {
      std::lock_guard lock(mutex_);
      for (auto& c : sessions_) {
        if (c.fd >= 0) ::shutdown(c.fd, SHUT_RDWR);
      }
      sessions.swap(sessions_);
    }
    for (auto& c : sessions) {
      if (c.thread.joinable()) c.thread.join();
    }
  }

  /// Blocks until stop() is called from another thread.
  void wait() {
    while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }

 private:
  struct Connection {
    int fd = -1;
    std::thread thread;
  };

  void close_listener() {
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
  }

  void accept_loop() {
    while (running_) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (!running_) break;
        if (errno == EINTR || errno == ECONNABORTED) continue;
        break;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mutex_);
      auto& c = sessions_.emplace_back();
      c.fd = fd;
      c.thread = std::thread([this, &c, fd, id = next_session_++] {
        run_connection(fd, id);
        std::lock_guard done(mutex_);
        c.fd = -1;
        ::close(fd);
      });
    }
  }

  void run_connection(int fd, std::uint64_t id) {
    SessionClock clock = cfg_.clock_factory();
    net::Reader reader(fd);
    std::unique_ptr<net::Channel> channel;
    try {
      // A browser opens with its upgrade request right away; a line client
      // may stay silent, so do not wait long.
      if (reader.fill(250) < 0) return;
      if (reader.buf.starts_with("GET ")) {
        if (!net::accept_websocket(fd, reader, 5000)) return;
        channel = std::make_unique<net::WebSocketChannel>(fd, reader);
      } else {
        channel = std::make_unique<net::NdjsonChannel>(fd, reader);
      }
      auto send = [&](const nlohmann::ordered_json& msg) {
        if (recorder_) recorder_->record(id, "out", clock(), msg);
        channel->write(msg.dump());
      };
      WireSession session(cfg_, send);
      std::string frame;
      while (running_) {
        session.tick(clock());
        TimeMs wait = std::clamp<TimeMs>(session.next_deadline() - clock(), 0, 200);
        auto status = channel->read(frame, wait);
        if (status == net::ReadStatus::Closed) break;
        if (status == net::ReadStatus::Timeout) continue;
        TimeMs now = clock();
        if (recorder_) {
          auto parsed = nlohmann::ordered_json::parse(frame, nullptr, false);
          recorder_->record(id, "in", now, parsed.is_discarded() ? nlohmann::ordered_json(frame) : parsed);
        }
        if (!session.on_frame(frame, now)) break;
      }
    } catch (const std::exception& e) {
      std::clog << "session " << id << ": " << e.what() << '\n';
    }
  }

  ServiceConfig cfg_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::list<Connection> sessions_;
  std::uint64_t next_session_ = 0;
  std::unique_ptr<FrameRecorder> recorder_;
};

}  // namespace microturn
