#pragma once

// Policy backed by an HTTP endpoint, e.g. an LLM server wrapped in a tiny
// adapter. POST {history, delta_t_ms, max_system_tokens} -> {micro_turn}.

#include <iostream>
#include <mutex>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "microturn/error.hpp"
#include "microturn/policy.hpp"
#include "microturn/protocol.hpp"

namespace microturn {

struct RemotePolicyConfig {
  std::string base_url;             // scheme://host:port
  std::string path = "/decide";
  TimeMs timeout_ms = 0;            // 0: twice the request's delta_t
};

inline nlohmann::ordered_json remote_request_json(const PolicyRequest& req) {
  nlohmann::ordered_json j;
  j["history"] = req.canonical();
  j["delta_t_ms"] = req.delta_t_ms();
  j["max_system_tokens"] = req.max_system_tokens;
  return j;
}

/// Parses a remote reply body. Tolerant about a missing <EOS> and trailing
/// text; content beyond max_system_tokens is dropped.
inline PolicyResponse parse_remote_response(std::string_view body, const PolicyRequest& req) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::PolicyProtocolError, std::string("reply is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("micro_turn") || !j["micro_turn"].is_string()) {
    throw Error(ErrorCode::PolicyProtocolError, "reply lacks a string micro_turn");
  }
  auto tokens = split_canonical(j["micro_turn"].get<std::string>());
  const TimeMs t = req.latest().t_start;
  try {
    if (tokens.empty()) throw Error(ErrorCode::MissingEos, "empty micro_turn");
    MicroTurn turn = parse_micro_turn(tokens, Role::System, ParseMode::Tolerant, t);
    if (turn.tokens.size() > static_cast<std::size_t>(req.max_system_tokens)) {
      turn.tokens.resize(static_cast<std::size_t>(req.max_system_tokens));
    }
    return {std::move(turn)};
  } catch (const Error& e) {
    throw Error(ErrorCode::PolicyProtocolError, e.detail());
  }
}

class RemotePolicy : public Policy {
 public:
  explicit RemotePolicy(RemotePolicyConfig cfg) : cfg_(std::move(cfg)), client_(cfg_.base_url) {
    if (!client_.is_valid()) throw Error(ErrorCode::InvalidConfig, "bad remote URL " + cfg_.base_url);
  }

  /// Timeouts and transport failures fall back to <user is speaking>; a reply
  /// that arrives but is malformed raises PolicyProtocolError.
  PolicyResponse decide(const PolicyRequest& req) override {
    const TimeMs timeout = cfg_.timeout_ms > 0 ? cfg_.timeout_ms : 2 * req.delta_t_ms();
    std::lock_guard lock(mutex_);
    client_.set_connection_timeout(std::chrono::milliseconds(timeout));
    client_.set_read_timeout(std::chrono::milliseconds(timeout));
    client_.set_write_timeout(std::chrono::milliseconds(timeout));
    auto res = client_.Post(cfg_.path, remote_request_json(req).dump(), "application/json");
    if (!res) {
      std::clog << "remote policy: " << httplib::to_string(res.error()) << " at t="
                << req.latest().t_start << ", staying silent\n";
      return fail_safe_response(req.latest().t_start);
    }
    if (res->status != 200) {
      throw Error(ErrorCode::PolicyProtocolError, "HTTP status " + std::to_string(res->status));
    }
    return parse_remote_response(res->body, req);
  }

  std::string name() const override { return "remote:" + cfg_.base_url; }

 private:
  RemotePolicyConfig cfg_;
  httplib::Client client_;
  std::mutex mutex_;
};

/// Splits "http://host:port/path" into base URL and path.
inline RemotePolicyConfig remote_config_from_url(std::string_view url) {
  RemotePolicyConfig cfg;
  auto scheme = url.find("://");
  if (scheme == std::string_view::npos) {
    throw Error(ErrorCode::InvalidConfig, "remote URL needs a scheme: " + std::string(url));
  }
  auto slash = url.find('/', scheme + 3);
  if (slash == std::string_view::npos) {
    cfg.base_url = std::string(url);
  } else {
    cfg.base_url = std::string(url.substr(0, slash));
    if (slash + 1 < url.size()) cfg.path = std::string(url.substr(slash));
  }
  return cfg;
}

}  // namespace microturn
