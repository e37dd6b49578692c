#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/bodyfit/body_model.hpp"

namespace ihk::pipeline {

// Wire format: {task, messages, images (base64 PNG), seed, params} -> {text, cost}.
struct ClientRequest {
  std::string task;  // "caption", "summarize", "summarize_level", "judge"
  std::vector<std::string> messages;
  std::vector<std::string> images;  // base64-encoded PNG
  uint64_t seed = 0;
  nlohmann::json params = nlohmann::json::object();
};

struct ClientReply {
  std::string text;
  double cost = 0.0;  // USD
};

nlohmann::json to_json(const ClientRequest& r);
ClientRequest client_request_from_json(const nlohmann::json& j);

// Retryable failure (timeouts, 429, 5xx).
class TransientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a stage cannot complete; carries the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Implementations must tolerate concurrent calls.
class ModelClient {
 public:
  virtual ~ModelClient() = default;
  virtual ClientReply complete(const ClientRequest& request) = 0;
  virtual std::string name() const = 0;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_delay{200};
  double factor = 2.0;
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to std::this_thread::sleep_for
};

// Calls the client, retrying TransientError with exponential backoff.
// Rethrows the last TransientError once attempts are exhausted.
ClientReply complete_with_retry(ModelClient& client, const ClientRequest& request, const RetryPolicy& policy = {});

// Counts calls and cost of a wrapped client.
class CountingClient : public ModelClient {
 public:
  explicit CountingClient(std::shared_ptr<ModelClient> inner) : inner_(std::move(inner)) {}
  ClientReply complete(const ClientRequest& request) override;
  std::string name() const override { return inner_->name(); }
  int64_t calls() const { return calls_.load(); }
  void reset() { calls_ = 0; }

 private:
  std::shared_ptr<ModelClient> inner_;
  std::atomic<int64_t> calls_{0};
};

// Throws TransientError for the first `failures` calls, then forwards.
class FlakyClient : public ModelClient {
 public:
  FlakyClient(std::shared_ptr<ModelClient> inner, int failures) : inner_(std::move(inner)), remaining_(failures) {}
  ClientReply complete(const ClientRequest& request) override;
  std::string name() const override { return inner_->name(); }

 private:
  std::shared_ptr<ModelClient> inner_;
  std::atomic<int> remaining_;
};

// Captions describe the toy subject drawn from the request seed, so the toy
// image stage renders what the caption says.
class MockCaptionClient : public ModelClient {
 public:
  explicit MockCaptionClient(const bodyfit::BodyModel& model, double cost_per_call = 0.004)
      : model_(model), cost_(cost_per_call) {}
  ClientReply complete(const ClientRequest& request) override;
  std::string name() const override { return "mock-caption"; }

 private:
  const bodyfit::BodyModel& model_;
  double cost_;
};

// Summaries with exactly the requested word counts. `violate_levels` (1-based)
// come back too long on the first request; `stubborn` keeps them too long on
// re-prompts as well.
class MockSummarizer : public ModelClient {
 public:
  struct Options {
    std::vector<int> violate_levels;
    bool stubborn = false;
    double cost_per_call = 0.002;
  };
  MockSummarizer() = default;
  explicit MockSummarizer(Options options) : options_(std::move(options)) {}
  ClientReply complete(const ClientRequest& request) override;
  std::string name() const override { return "mock-summarizer"; }

 private:
  Options options_;
};

// Picks the candidate closest (mean squared error) to a hidden reference, or
// to the first request image when no reference is set. Replies "No" when the
// best error exceeds `reject_above`.
class MockJudge : public ModelClient {
 public:
  enum class Mode { nearest, always_no, malformed_once, always_malformed };
  struct Options {
    Mode mode = Mode::nearest;
    std::optional<torch::Tensor> reference;  // H x W x C in [0,1]
    double reject_above = 1.0;
    double cost_per_call = 0.006;
  };
  MockJudge() = default;
  explicit MockJudge(Options options) : options_(std::move(options)) {}
  ClientReply complete(const ClientRequest& request) override;
  std::string name() const override { return "mock-judge"; }

 private:
  Options options_;
  std::atomic<int64_t> calls_{0};
};

// JSON over HTTP(S): POST {task, messages, images, seed, params} to `url`,
// expects {text, cost}. Sends "Authorization: Bearer <api_key>" when set.
class HttpClient : public ModelClient {
 public:
  HttpClient(std::string url, std::string api_key, std::chrono::seconds timeout = std::chrono::seconds(60));
  ClientReply complete(const ClientRequest& request) override;
  std::string name() const override { return "http:" + url_; }

 private:
  std::string url_, scheme_host_, path_, api_key_;
  std::chrono::seconds timeout_;
};

struct Clients {
  std::shared_ptr<ModelClient> caption, summarizer, judge;
};

// Mock clients for every role.
Clients mock_clients(const bodyfit::BodyModel& model);

// HTTP clients from {"caption_url", "summarizer_url", "judge_url"}, with the
// key read from IHK_API_KEY. Throws std::runtime_error when a URL is missing.
Clients http_clients(const nlohmann::json& config);

}  // namespace ihk::pipeline
