/// @file backend.hpp
/// Runs conversations against a judge model. Three interchangeable kinds:
///
///   live   - OpenAI-compatible chat completions endpoint over HTTPS
///   mock   - scripted replies keyed by (sample, strategy, phase), no network
///   replay - serves a previously recorded cache only; a miss is an error
///
/// Every reply is associated with a content-addressed cache key derived from
/// (model, temperature, conversation), so reruns are cheap and replay mode is
/// a hard reproducibility boundary: with a warmed cache a whole pipeline run
/// touches the network zero times.
#pragma once

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <semaphore>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <unistd.h>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <nlohmann/json.hpp>

#include "swejudge/core.hpp"
#include "swejudge/digest.hpp"
#include "swejudge/strategies.hpp"

namespace swejudge::backend {

enum class BackendKind { live, mock, replay };

inline const char* to_string(BackendKind k) {
  switch (k) {
    case BackendKind::live: return "live";
    case BackendKind::mock: return "mock";
    case BackendKind::replay: return "replay";
  }
  return "?";
}

inline std::optional<BackendKind> backend_kind_from_string(const std::string& s) {
  if (s == "live") return BackendKind::live;
  if (s == "mock") return BackendKind::mock;
  if (s == "replay") return BackendKind::replay;
  return std::nullopt;
}

/// Name of the environment variable holding the API credential.
inline constexpr const char* kApiKeyEnv = "SWEJ_API_KEY";

struct BackendConfig {
  BackendKind kind = BackendKind::replay;
  std::string model_name = "gpt-4o-mini-2024-07-18";
  double temperature = 0.0;
  std::string endpoint_url = "https://api.openai.com/v1";
  int max_concurrency = 4;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::chrono::milliseconds retry_backoff{250};  // doubles per attempt
  std::filesystem::path cache_dir = "cache";
  bool record = false;      // mock kind: persist replies into the cache
  std::string api_key;      // empty: read kApiKeyEnv at first live call
  /// Polled before each completion; returning true aborts the run with a
  /// backend error (used to honor Ctrl-C between calls).
  std::function<bool()> cancelled;

  void validate() const {
    if (model_name.empty())
      throw ValidationError("backend config: empty model name");
    if (max_concurrency < 1)
      throw ValidationError("backend config: max_concurrency must be >= 1");
    if (max_retries < 0)
      throw ValidationError("backend config: max_retries must be >= 0");
    if (timeout.count() <= 0)
      throw ValidationError("backend config: timeout must be positive");
    if (kind == BackendKind::live && endpoint_url.empty())
      throw ValidationError("backend config: empty endpoint url");
  }
};

/// Which pipeline step a completion belongs to. Only used for mock lookup
/// and error messages; it never influences the cache key.
struct CallContext {
  std::string sample_id;
  strategies::StrategyId strategy = strategies::StrategyId::P0;
  int phase = 1;

  std::string describe() const {
    return "sample '" + sample_id + "', strategy " +
           strategies::name(strategy) + ", phase " + std::to_string(phase);
  }
};

/// Canonical byte serialization hashed into the cache key. Roles and contents
/// are length-prefixed so distinct conversations can never collide through
/// separator games, and the format is trivial to reproduce from any language:
///
///   swej.cache.v1\n
///   <model>\n
///   <temperature, shortest round-trip decimal>\n
///   per turn: <role>\n<content byte count>\n<content>\n
inline std::string canonical_serialization(
    const std::string& model_name, double temperature,
    const strategies::Conversation& conversation) {
  char tbuf[64];
  const auto [tend, ec] =
      std::to_chars(tbuf, tbuf + sizeof tbuf, temperature);
  std::string out = "swej.cache.v1\n";
  out += model_name;
  out.push_back('\n');
  out.append(tbuf, tend);
  out.push_back('\n');
  for (const auto& turn : conversation.turns) {
    out += strategies::to_string(turn.role);
    out.push_back('\n');
    out += std::to_string(turn.content.size());
    out.push_back('\n');
    out += turn.content;
    out.push_back('\n');
  }
  return out;
}

inline std::string cache_key(const std::string& model_name, double temperature,
                             const strategies::Conversation& conversation) {
  return sha256_hex(canonical_serialization(model_name, temperature, conversation));
}

/// Directory of one reply per key: <dir>/<first 2 hex>/<digest>.txt with a
/// .meta JSON sidecar (model, timestamp, char counts). Writes go through a
/// temp file plus rename, so readers never observe a torn entry.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::optional<std::string> lookup(const std::string& key) const {
    std::ifstream in(entry_path(key), std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream body;
    body << in.rdbuf();
    return std::move(body).str();
  }

  void store(const std::string& key, const std::string& reply,
             const std::string& model_name, std::uint64_t prompt_chars) const {
    const std::filesystem::path path = entry_path(key);
    std::filesystem::create_directories(path.parent_path());

    nlohmann::json meta{{"model", model_name},
                        {"timestamp", now_iso8601()},
                        {"prompt_chars", prompt_chars},
                        {"reply_chars", reply.size()}};
    write_atomically(meta_path(key), meta.dump(2) + "\n");
    write_atomically(path, reply);
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path entry_path(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".txt");
  }

  std::filesystem::path meta_path(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".meta");
  }

  static std::string now_iso8601() {
    const std::time_t t =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  static void write_atomically(const std::filesystem::path& path,
                               const std::string& content) {
    static std::atomic<std::uint64_t> counter{0};
    const std::filesystem::path tmp =
        path.string() + ".tmp." +
        std::to_string(counter.fetch_add(1, std::memory_order_relaxed)) + "." +
        std::to_string(::getpid());
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw BackendError("cache: cannot write " + tmp.string());
      out.write(content.data(),
                static_cast<std::streamsize>(content.size()));
      if (!out) throw BackendError("cache: short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  std::filesystem::path dir_;
};

/// Counters for one backend's lifetime. live_calls counts wire attempts
/// (retries included, they are billed too); prompt/reply chars accumulate on
/// model-facing traffic (live and mock), not on cache hits.
class CallStats {
 public:
  struct Snapshot {
    std::uint64_t live_calls = 0;
    std::uint64_t cache_hits = 0;
    std::uint64_t prompt_chars = 0;
    std::uint64_t reply_chars = 0;
  };

  void count_live_call() { live_calls_.fetch_add(1, std::memory_order_relaxed); }
  void count_cache_hit() { cache_hits_.fetch_add(1, std::memory_order_relaxed); }
  void count_traffic(std::uint64_t prompt, std::uint64_t reply) {
    prompt_chars_.fetch_add(prompt, std::memory_order_relaxed);
    reply_chars_.fetch_add(reply, std::memory_order_relaxed);
  }

  Snapshot snapshot() const {
    return {live_calls_.load(), cache_hits_.load(), prompt_chars_.load(),
            reply_chars_.load()};
  }

 private:
  std::atomic<std::uint64_t> live_calls_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
  std::atomic<std::uint64_t> prompt_chars_{0};
  std::atomic<std::uint64_t> reply_chars_{0};
};

/// Deterministic reply source for tests and offline runs: a map from
/// (sample_id, strategy, phase) to reply text.
class MockScript {
 public:
  void set(const std::string& sample_id, strategies::StrategyId strategy,
           int phase, std::string reply) {
    replies_[key(sample_id, strategy, phase)] = std::move(reply);
  }

  std::optional<std::string> lookup(const CallContext& ctx) const {
    const auto it = replies_.find(key(ctx.sample_id, ctx.strategy, ctx.phase));
    if (it == replies_.end()) return std::nullopt;
    return it->second;
  }

  bool empty() const { return replies_.empty(); }

  /// File format: a JSON array of {sample_id, strategy, phase, reply}.
  static MockScript from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
      throw ValidationError("cannot open mock script: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("mock script " + path.string() +
                            ": invalid JSON: " + e.what());
    }
    if (!j.is_array())
      throw ValidationError("mock script " + path.string() +
                            ": expected a top-level array");
    MockScript script;
    for (const auto& entry : j) {
      const std::string where = "mock script " + path.string();
      const std::string sid = swejudge::detail::require_string(entry, "sample_id", where);
      const std::string strat_s =
          swejudge::detail::require_string(entry, "strategy", where);
      const auto strat = strategies::strategy_from_string(strat_s);
      if (!strat)
        throw ValidationError(where + ": unknown strategy '" + strat_s + "'");
      if (!entry.contains("phase") || !entry.at("phase").is_number_integer())
        throw ValidationError(where + ": missing integer 'phase'");
      const std::string reply =
          swejudge::detail::require_string(entry, "reply", where);
      script.set(sid, *strat, entry.at("phase").get<int>(), reply);
    }
    return script;
  }

  /// A judge that already knows the answer: final-phase replies carry the
  /// sample's human score rescaled to 0..100; generation phases produce a
  /// fixed placeholder artifact. Samples without a human score get 50.
  static MockScript perfect_judge(const Dataset& ds) {
    MockScript script;
    const auto& scale = ds.manifest.scale;
    for (const auto& s : ds.samples) {
      double rescaled = 50.0;
      if (s.human_score)
        rescaled = (*s.human_score - scale.min) / (scale.max - scale.min) * 100.0;
      std::string score_line =
          "Score: " + std::to_string(static_cast<long long>(std::llround(rescaled)));
      using strategies::StrategyId;
      for (StrategyId strat :
           {StrategyId::P0, StrategyId::P1a, StrategyId::P1b, StrategyId::P3})
        script.set(s.id, strat, 1, score_line);
      script.set(s.id, StrategyId::P2, 2,
                 "The reasons hold up. " + score_line);
      script.set(s.id, StrategyId::P4, 1,
                 "Test cases:\n1. Run the solution on the example input and "
                 "compare with the expected output.");
      script.set(s.id, StrategyId::P4, 2, score_line);
      script.set(s.id, StrategyId::P5, 1,
                 "Critical properties:\n1. Satisfies the stated requirement "
                 "on all inputs.");
      script.set(s.id, StrategyId::P5, 2, score_line);
    }
    return script;
  }

 private:
  static std::tuple<std::string, int, int> key(const std::string& sample_id,
                                               strategies::StrategyId strategy,
                                               int phase) {
    return {sample_id, static_cast<int>(strategy), phase};
  }

  std::map<std::tuple<std::string, int, int>, std::string> replies_;
};

/// Minimal HTTP abstraction so tests can substitute the wire.
struct HttpRequest {
  std::string url;  // full URL including path
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
};

struct HttpResponse {
  int status = 0;
  std::string body;
  std::string transport_error;  // nonempty: request never completed
};

using Transport = std::function<HttpResponse(const HttpRequest&)>;

/// httplib-backed transport. A fresh client per request keeps this trivially
/// safe under concurrency; connection reuse is not worth the locking here.
inline Transport default_transport(std::chrono::milliseconds timeout) {
  return [timeout](const HttpRequest& req) -> HttpResponse {
    const std::size_t scheme_end = req.url.find("://");
    if (scheme_end == std::string::npos)
      return {0, "", "invalid endpoint url: " + req.url};
    const std::size_t path_start = req.url.find('/', scheme_end + 3);
    const std::string base =
        path_start == std::string::npos ? req.url : req.url.substr(0, path_start);
    const std::string path =
        path_start == std::string::npos ? "/" : req.url.substr(path_start);

    httplib::Client client(base);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers headers;
    for (const auto& [k, v] : req.headers)
      if (k != "Content-Type") headers.emplace(k, v);
    client.set_default_headers(headers);

    auto result = client.Post(path, req.body, "application/json");
    if (!result)
      return {0, "", httplib::to_string(result.error())};
    return {result->status, result->body, ""};
  };
}

/// The judge model client. complete() is safe to call from many threads; at
/// most max_concurrency requests are on the wire at once.
class JudgeBackend {
 public:
  explicit JudgeBackend(BackendConfig config, MockScript script = {},
                        Transport transport = {})
      : config_(std::move(config)),
        script_(std::move(script)),
        transport_(std::move(transport)),
        cache_(config_.cache_dir),
        wire_slots_(config_.max_concurrency) {
    config_.validate();
    if (config_.kind == BackendKind::mock && script_.empty())
      throw ValidationError("mock backend needs a nonempty script");
    if (config_.kind == BackendKind::live && !transport_)
      transport_ = default_transport(config_.timeout);
  }

  const BackendConfig& config() const { return config_; }
  CallStats::Snapshot stats() const { return stats_.snapshot(); }

  /// Runs one conversation to completion and returns the assistant reply.
  /// The cache is consulted first in every mode; bypass_cache forces a fresh
  /// reply where one can be produced (live and mock; replay has nothing
  /// fresh to offer, so the flag is ignored there).
  std::string complete(const strategies::Conversation& conversation,
                       const CallContext& ctx, bool bypass_cache = false) {
    if (config_.cancelled && config_.cancelled())
      throw BackendError("run cancelled (" + ctx.describe() + ")");
    const std::string key =
        cache_key(config_.model_name, config_.temperature, conversation);
    if (config_.kind == BackendKind::replay) bypass_cache = false;

    if (!bypass_cache) {
      if (auto hit = cache_.lookup(key)) {
        stats_.count_cache_hit();
        return *hit;
      }
    }

    std::uint64_t prompt_chars = 0;
    for (const auto& t : conversation.turns) prompt_chars += t.content.size();

    switch (config_.kind) {
      case BackendKind::replay:
        throw BackendError("replay miss for cache key " + key + " (" +
                           ctx.describe() + ")");
      case BackendKind::mock: {
        auto reply = script_.lookup(ctx);
        if (!reply)
          throw BackendError("mock script has no reply for " + ctx.describe());
        stats_.count_traffic(prompt_chars, reply->size());
        if (config_.record)
          cache_.store(key, *reply, config_.model_name, prompt_chars);
        return *reply;
      }
      case BackendKind::live: {
        const std::string reply = live_complete(conversation, ctx);
        stats_.count_traffic(prompt_chars, reply.size());
        cache_.store(key, reply, config_.model_name, prompt_chars);
        return reply;
      }
    }
    throw BackendError("unreachable backend kind");
  }

 private:
  std::string api_key() const {
    if (!config_.api_key.empty()) return config_.api_key;
    const char* env = std::getenv(kApiKeyEnv);
    if (env == nullptr || *env == '\0')
      throw BackendError(std::string("authentication: ") + kApiKeyEnv +
                         " is not set");
    return env;
  }

  std::string live_complete(const strategies::Conversation& conversation,
                            const CallContext& ctx) {
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& t : conversation.turns)
      messages.push_back({{"role", strategies::to_string(t.role)},
                          {"content", t.content}});
    const nlohmann::json body{{"model", config_.model_name},
                              {"messages", messages},
                              {"temperature", config_.temperature}};
    HttpRequest req;
    req.url = config_.endpoint_url + "/chat/completions";
    req.body = body.dump();
    req.headers = {{"Authorization", "Bearer " + api_key()},
                   {"Content-Type", "application/json"}};

    std::chrono::milliseconds backoff = config_.retry_backoff;
    for (int attempt = 0;; ++attempt) {
      // The counting semaphore bounds in-flight wire requests.
      wire_slots_.acquire();
      stats_.count_live_call();
      HttpResponse resp;
      try {
        resp = transport_(req);
      } catch (...) {
        wire_slots_.release();
        throw;
      }
      wire_slots_.release();

      if (resp.transport_error.empty() && resp.status == 200)
        return extract_reply(resp.body, ctx);

      if (resp.transport_error.empty() &&
          (resp.status == 401 || resp.status == 403))
        throw BackendError("authentication failure (HTTP " +
                           std::to_string(resp.status) + ") for " +
                           ctx.describe() + endpoint_detail(resp.body));

      const bool transient = !resp.transport_error.empty() ||
                             resp.status == 408 || resp.status == 429 ||
                             resp.status >= 500;
      if (!transient)
        throw BackendError("endpoint rejected request (HTTP " +
                           std::to_string(resp.status) + ") for " +
                           ctx.describe() + endpoint_detail(resp.body));

      if (attempt >= config_.max_retries) {
        if (!resp.transport_error.empty())
          throw BackendError("transport failure after " +
                             std::to_string(attempt + 1) + " attempts for " +
                             ctx.describe() + ": " + resp.transport_error);
        throw BackendError("endpoint kept failing (last HTTP " +
                           std::to_string(resp.status) + ") after " +
                           std::to_string(attempt + 1) + " attempts for " +
                           ctx.describe());
      }
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }

  static std::string extract_reply(const std::string& body,
                                   const CallContext& ctx) {
    try {
      const nlohmann::json j = nlohmann::json::parse(body);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      if (!content.is_string())
        throw BackendError("malformed endpoint response for " +
                           ctx.describe() + ": content is not a string");
      return content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError("malformed endpoint response for " + ctx.describe() +
                         ": " + e.what());
    }
  }

  static std::string endpoint_detail(const std::string& body) {
    try {
      const auto j = nlohmann::json::parse(body);
      if (j.contains("error") && j.at("error").contains("message"))
        return ": " + j.at("error").at("message").get<std::string>();
    } catch (...) {
    }
    return "";
  }

  BackendConfig config_;
  MockScript script_;
  Transport transport_;
  ResponseCache cache_;
  CallStats stats_;
  std::counting_semaphore<4096> wire_slots_;
};

}  // namespace swejudge::backend
