#pragma once

// Chat-completions client for the teacher: POST {model, messages,
// temperature}, read choices[0].message.content. Retries 429/5xx and
// connection failures with capped exponential backoff and full jitter, and
// refuses to send once the estimated spend would exceed the budget.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <limits>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "distilrank/error.hpp"
#include "distilrank/llm.hpp"
#include "distilrank/rng.hpp"

namespace distilrank {

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  double factor = 2.0;
  std::chrono::milliseconds max_delay{60000};
};

struct LlmConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-3.5-turbo-16k-0613";
  double temperature = 0.0;
  std::size_t max_in_flight = 4;
  RetryPolicy retry;
  double budget_usd = 250.0;
  TokenPrices prices;
  std::chrono::seconds timeout{120};
  std::string api_key;  // bearer token; see api_key_from_env()
  std::uint64_t jitter_seed = 0;
};

inline std::string api_key_from_env() {
  const char* key = std::getenv("DISTILRANK_API_KEY");
  return key ? key : "";
}

inline void validate(const LlmConfig& c) {
  if (c.max_in_flight < 1) throw UsageError("llm.max_in_flight must be >= 1");
  if (!(c.temperature >= 0.0)) throw UsageError("llm.temperature must be >= 0");
  if (!(c.budget_usd >= 0.0)) throw UsageError("llm.budget_usd must be >= 0");
  if (c.retry.max_attempts < 1) throw UsageError("llm.retry.max_attempts must be >= 1");
  if (!(c.prices.prompt >= 0.0) || !(c.prices.completion >= 0.0)) throw UsageError("token prices must be >= 0");
}

struct Endpoint {
  std::string scheme_host_port;
  std::string path;
};

inline Endpoint split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw UsageError("endpoint must be an http(s) URL: " + url);
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw UsageError("unsupported endpoint scheme: " + scheme);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string request_body(const LlmConfig& config, const std::vector<Message>& messages) {
  nlohmann::ordered_json body;
  body["model"] = config.model;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& m : messages) arr.push_back({{"role", m.role}, {"content", m.content}});
  body["messages"] = std::move(arr);
  body["temperature"] = config.temperature;
  return body.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

inline bool is_retryable_status(int status) { return status == 429 || status >= 500; }

class ChatClient {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  // `log`, when given, receives one JSON line per attempt.
  explicit ChatClient(LlmConfig config, std::ostream* log = nullptr, Sleeper sleeper = {})
      : config_(std::move(config)), log_(log), sleeper_(std::move(sleeper)), rng_(config_.jitter_seed) {
    validate(config_);
    if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    endpoint_ = split_endpoint(config_.endpoint);
  }

  ChatClient(const ChatClient&) = delete;
  ChatClient& operator=(const ChatClient&) = delete;

  // Returns the first choice's content. Throws BudgetError before sending if
  // the estimate would overrun the budget, TransportError when retries are
  // exhausted or the reply is unusable.
  std::string complete(const std::vector<Message>& messages, std::size_t expected_entries = 0) {
    const double estimate = estimate_cost(messages, config_.prices, expected_entries);
    reserve(estimate);
    const std::string body = request_body(config_, messages);
    std::string last_error;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
      if (attempt > 1) sleeper_(backoff(attempt - 1));
      httplib::Client http(endpoint_.scheme_host_port);
      http.set_connection_timeout(config_.timeout);
      http.set_read_timeout(config_.timeout);
      http.set_write_timeout(config_.timeout);
      httplib::Headers headers;
      if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
      {
        std::lock_guard lock(mu_);
        ++attempts_;
      }
      auto res = http.Post(endpoint_.path, headers, body, "application/json");
      if (!res) {
        last_error = "connection failed: " + httplib::to_string(res.error());
        log_attempt(attempt, 0, body, last_error);
        continue;
      }
      log_attempt(attempt, res->status, body, res->body);
      if (res->status == 200) {
        try {
          auto reply = nlohmann::json::parse(res->body);
          std::string content = reply.at("choices").at(0).at("message").at("content").get<std::string>();
          settle(estimate, actual_cost(reply, estimate));
          return content;
        } catch (const nlohmann::json::exception& e) {
          settle(estimate, estimate);
          throw TransportError(std::string("unusable completion response: ") + e.what());
        }
      }
      last_error = "HTTP " + std::to_string(res->status);
      if (!is_retryable_status(res->status)) {
        settle(estimate, 0.0);
        throw TransportError(last_error + ": " + res->body.substr(0, 200));
      }
    }
    settle(estimate, 0.0);
    throw TransportError("giving up after " + std::to_string(config_.retry.max_attempts) + " attempts: " + last_error);
  }

  LlmFn as_llm() {
    return [this](const LlmRequest& req) { return complete(req.messages, req.doc_ids.size()); };
  }

  double spent_usd() const {
    std::lock_guard lock(mu_);
    return spent_;
  }
  std::size_t attempts() const {
    std::lock_guard lock(mu_);
    return attempts_;
  }
  const LlmConfig& config() const { return config_; }

 private:
  void reserve(double estimate) {
    std::lock_guard lock(mu_);
    if (spent_ + reserved_ + estimate > config_.budget_usd) {
      throw BudgetError("estimated cost $" + std::to_string(estimate) + " would exceed the budget ($" +
                        std::to_string(config_.budget_usd) + ", spent $" + std::to_string(spent_) + ")");
    }
    reserved_ += estimate;
  }

  void settle(double estimate, double actual) {
    std::lock_guard lock(mu_);
    reserved_ -= estimate;
    spent_ += actual;
  }

  double actual_cost(const nlohmann::json& reply, double estimate) const {
    if (!reply.contains("usage") || !reply["usage"].is_object()) return estimate;
    const auto& u = reply["usage"];
    const double p = u.value("prompt_tokens", 0.0);
    const double c = u.value("completion_tokens", 0.0);
    return p / 1000.0 * config_.prices.prompt + c / 1000.0 * config_.prices.completion;
  }

  std::chrono::milliseconds backoff(int retry) {
    double cap = static_cast<double>(config_.retry.base_delay.count());
    for (int i = 1; i < retry; ++i) cap *= config_.retry.factor;
    cap = std::min(cap, static_cast<double>(config_.retry.max_delay.count()));
    std::lock_guard lock(mu_);
    return std::chrono::milliseconds(static_cast<long long>(rng_.unit() * cap));
  }

  void log_attempt(int attempt, int status, const std::string& request, const std::string& response) {
    if (!log_) return;
    nlohmann::ordered_json line;
    line["attempt"] = attempt;
    line["status"] = status;
    line["request"] = request;
    line["response"] = response;
    std::lock_guard lock(mu_);
    *log_ << line.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace) << '\n';
    log_->flush();
  }

  LlmConfig config_;
  Endpoint endpoint_;
  std::ostream* log_;
  Sleeper sleeper_;
  mutable std::mutex mu_;
  Rng rng_;
  double spent_ = 0.0;
  double reserved_ = 0.0;
  std::size_t attempts_ = 0;
};

}  // namespace distilrank
