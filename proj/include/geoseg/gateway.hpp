// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "geoseg/error.hpp"

namespace geoseg {

using json = nlohmann::json;

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) == 1,
          ErrorCode::kInvalidArgument, "sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

struct ImagePayload {
  std::string media_type = "image/png";
  std::string base64;
};

struct ChatMessage {
  std::string role = "user";
  std::string text;
  std::vector<ImagePayload> images;
};

struct ChatRequest {
  std::string model_name;
  std::vector<ChatMessage> messages;
  double temperature = 0.2;
  int max_tokens = 512;
  std::string request_id;
  // Which prompt template produced the request. Used for transcripts and mock
  // routing; not part of the content hash.
  std::string prompt_name;
};

struct RetryPolicy {
  int max_attempts = 3;
  int base_backoff_ms = 500;
  double multiplier = 2.0;
};

struct GatewayConfig {
  std::string endpoint_url;
  std::string api_key_source = "VLM_API_KEY";
  int max_in_flight = 4;
  RetryPolicy retry;
  int timeout_ms = 60000;
  bool mock_mode = false;
  std::string transcript_dir;
  std::string transcript_name = "transcript.jsonl";

  void validate() const {
    require(max_in_flight >= 1, ErrorCode::kInvalidArgument, "gateway: max_in_flight must be >= 1");
    require(retry.max_attempts >= 1, ErrorCode::kInvalidArgument, "gateway: max_attempts must be >= 1");
    require(mock_mode || !endpoint_url.empty(), ErrorCode::kInvalidArgument,
            "gateway: endpoint_url is required outside mock mode");
  }

  // Endpoint from VLM_GATEWAY_URL when not set explicitly.
  static GatewayConfig from_env(GatewayConfig base) {
    if (base.endpoint_url.empty()) {
      if (const char* url = std::getenv("VLM_GATEWAY_URL")) base.endpoint_url = url;
    }
    return base;
  }
  static GatewayConfig from_env() { return from_env(GatewayConfig{}); }
};

inline json to_wire_json(const ChatRequest& req) {
  json messages = json::array();
  for (const auto& m : req.messages) {
    json content = json::array();
    content.push_back({{"type", "text"}, {"text", m.text}});
    for (const auto& img : m.images)
      content.push_back(
          {{"type", "image_url"}, {"image_url", {{"url", "data:" + img.media_type + ";base64," + img.base64}}}});
    messages.push_back({{"role", m.role}, {"content", std::move(content)}});
  }
  return {{"model", req.model_name},
          {"messages", std::move(messages)},
          {"temperature", req.temperature},
          {"max_tokens", req.max_tokens}};
}

// Stable key over (model, messages, temperature).
inline std::string content_hash(const ChatRequest& req) {
  json key = to_wire_json(req);
  key.erase("max_tokens");
  return sha256_hex(key.dump());
}

struct HttpResponse {
  int status = 0;  // 0: connection failure or timeout
  std::string body;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post(const std::string& url, const std::string& body,
                            const std::vector<std::pair<std::string, std::string>>& headers,
                            int timeout_ms) = 0;
};

class HttplibTransport final : public HttpTransport {
 public:
  HttpResponse post(const std::string& url, const std::string& body,
                    const std::vector<std::pair<std::string, std::string>>& headers,
                    int timeout_ms) override {
    const auto scheme_end = url.find("://");
    require(scheme_end != std::string::npos, ErrorCode::kInvalidArgument, "gateway: bad endpoint URL " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

    // httplib clients are not thread-safe; one per call.
    httplib::Client client(origin);
    const auto timeout = std::chrono::milliseconds(timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = client.Post(path, h, body, "application/json");
    if (!res) return {0, httplib::to_string(res.error())};
    return {res->status, res->body};
  }
};

// A mock routing rule; unset fields match anything.
struct MockRule {
  std::optional<std::string> prompt_name;
  std::optional<std::string> model;
  std::optional<std::string> contains;
  std::string response;

  bool matches(const ChatRequest& req) const {
    if (prompt_name && *prompt_name != req.prompt_name) return false;
    if (model && *model != req.model_name) return false;
    if (contains) {
      bool found = false;
      for (const auto& m : req.messages) found = found || m.text.find(*contains) != std::string::npos;
      if (!found) return false;
    }
    return true;
  }
};

// Offline responses. Exact content-hash fixtures win; in non-strict mode the
// rules and then the fallback text answer anything else.
struct MockFixtures {
  std::map<std::string, std::string> by_hash;
  std::vector<MockRule> rules;
  std::optional<std::string> fallback;
  bool strict = false;

  static MockFixtures from_json(const json& j) {
    MockFixtures f;
    f.strict = j.value("strict", false);
    if (j.contains("fallback") && !j["fallback"].is_null()) f.fallback = j["fallback"].get<std::string>();
    if (j.contains("fixtures"))
      for (const auto& [k, v] : j["fixtures"].items()) f.by_hash[k] = v.get<std::string>();
    if (j.contains("rules")) {
      for (const auto& r : j["rules"]) {
        MockRule rule;
        if (r.contains("prompt")) rule.prompt_name = r["prompt"].get<std::string>();
        if (r.contains("model")) rule.model = r["model"].get<std::string>();
        if (r.contains("contains")) rule.contains = r["contains"].get<std::string>();
        rule.response = r.at("response").get<std::string>();
        f.rules.push_back(std::move(rule));
      }
    }
    return f;
  }

  static MockFixtures load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::kIo, "cannot open mock fixtures " + path);
    try {
      return from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, "mock fixtures " + path + ": " + e.what());
    }
  }

  // Strict fixtures replaying every successful exchange in a transcript.
  static MockFixtures from_transcript(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::kIo, "cannot open transcript " + path);
    MockFixtures f;
    f.strict = true;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (j.contains("response") && j["response"].is_string())
        f.by_hash[j.at("hash").get<std::string>()] = j["response"].get<std::string>();
    }
    return f;
  }

  std::string respond(const ChatRequest& req) const {
    const std::string hash = content_hash(req);
    if (auto it = by_hash.find(hash); it != by_hash.end()) return it->second;
    if (!strict) {
      for (const auto& rule : rules)
        if (rule.matches(req)) return rule.response;
      if (fallback) return *fallback;
    }
    throw Error(ErrorCode::kMockMiss, "mock gateway: no fixture for request hash " + hash +
                                          " (prompt '" + req.prompt_name + "')");
  }
};

// Counting admission gate; also records the peak concurrency it has seen.
class InFlightLimiter {
 public:
  explicit InFlightLimiter(int limit) : limit_(limit) {}

  class Slot {
   public:
    explicit Slot(InFlightLimiter& l) : l_(l) { l_.acquire(); }
    ~Slot() { l_.release(); }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

   private:
    InFlightLimiter& l_;
  };

  int peak() const {
    std::lock_guard lock(mu_);
    return peak_;
  }

 private:
  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return active_ < limit_; });
    ++active_;
    peak_ = std::max(peak_, active_);
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      --active_;
    }
    cv_.notify_one();
  }

  int limit_;
  int active_ = 0;
  int peak_ = 0;
  mutable std::mutex mu_;
  std::condition_variable cv_;
};

// Thread-safe chat-completions client. Outside mock mode every call goes
// through the HTTP transport with retry on 429, 5xx and timeouts.
class Gateway {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  Gateway(GatewayConfig config, std::unique_ptr<HttpTransport> transport)
      : config_(std::move(config)), transport_(std::move(transport)), limiter_(config_.max_in_flight) {
    config_.validate();
    open_transcript();
  }

  static std::shared_ptr<Gateway> http(GatewayConfig config) {
    return std::make_shared<Gateway>(std::move(config), std::make_unique<HttplibTransport>());
  }

  static std::shared_ptr<Gateway> mock(GatewayConfig config, MockFixtures fixtures) {
    config.mock_mode = true;
    auto g = std::make_shared<Gateway>(std::move(config), nullptr);
    g->fixtures_ = std::move(fixtures);
    return g;
  }

  void set_sleeper(Sleeper s) { sleeper_ = std::move(s); }
  const GatewayConfig& config() const { return config_; }
  int peak_in_flight() const { return limiter_.peak(); }

  std::string chat(const ChatRequest& req) {
    require(!req.messages.empty(), ErrorCode::kInvalidArgument, "chat: request has no messages");
    InFlightLimiter::Slot slot(limiter_);
    const std::string hash = content_hash(req);
    json attempts = json::array();
    if (config_.mock_mode) {
      std::string text = fixtures_.respond(req);
      log(req, hash, attempts, text);
      return text;
    }

    const std::string body = to_wire_json(req).dump();
    std::vector<std::pair<std::string, std::string>> headers;
    if (const char* key = std::getenv(config_.api_key_source.c_str()))
      headers.emplace_back("Authorization", std::string("Bearer ") + key);

    double backoff = config_.retry.base_backoff_ms;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
      const HttpResponse res = transport_->post(config_.endpoint_url, body, headers, config_.timeout_ms);
      attempts.push_back({{"attempt", attempt}, {"status", res.status}});
      if (res.status == 200) {
        std::string text = parse_completion(res.body);
        log(req, hash, attempts, text);
        return text;
      }
      const bool retryable = res.status == 0 || res.status == 429 || res.status >= 500;
      if (!retryable) {
        log(req, hash, attempts, std::nullopt);
        throw Error(ErrorCode::kTransport, "chat: HTTP " + std::to_string(res.status) + " from " +
                                               config_.endpoint_url + ": " + res.body.substr(0, 200));
      }
      if (attempt < config_.retry.max_attempts) {
        sleeper_(std::chrono::milliseconds(static_cast<std::int64_t>(backoff)));
        backoff *= config_.retry.multiplier;
      }
    }
    log(req, hash, attempts, std::nullopt);
    throw Error(ErrorCode::kTransport, "chat: request " + req.request_id + " failed after " +
                                           std::to_string(config_.retry.max_attempts) + " attempts");
  }

 private:
  static std::string parse_completion(const std::string& body) {
    try {
      const json j = json::parse(body);
      const json& content = j.at("choices").at(0).at("message").at("content");
      if (content.is_string()) return content.get<std::string>();
      std::string text;
      for (const auto& part : content)
        if (part.value("type", "") == "text") text += part.value("text", "");
      return text;
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kTransport, std::string("chat: malformed completion body: ") + e.what());
    }
  }

  void open_transcript() {
    if (config_.transcript_dir.empty()) return;
    std::filesystem::create_directories(config_.transcript_dir);
    const auto path = std::filesystem::path(config_.transcript_dir) / config_.transcript_name;
    transcript_.open(path, std::ios::app);
    require(transcript_.good(), ErrorCode::kIo, "cannot open transcript " + path.string());
  }

  void log(const ChatRequest& req, const std::string& hash, const json& attempts,
           const std::optional<std::string>& response) {
    if (!transcript_.is_open()) return;
    json line = {{"request_id", req.request_id},
                 {"prompt", req.prompt_name},
                 {"hash", hash},
                 {"request", to_wire_json(req)},
                 {"attempts", attempts},
                 {"response", response ? json(*response) : json(nullptr)}};
    std::lock_guard lock(transcript_mu_);
    transcript_ << line.dump() << '\n';
    transcript_.flush();
  }

  GatewayConfig config_;
  std::unique_ptr<HttpTransport> transport_;
  MockFixtures fixtures_;
  InFlightLimiter limiter_;
  Sleeper sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  std::mutex transcript_mu_;
  std::ofstream transcript_;
};

}  // namespace geoseg
