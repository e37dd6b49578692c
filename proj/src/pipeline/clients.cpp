#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "ihk/pipeline/clients.hpp"

#include <httplib.h>

#include <cstdlib>
#include <regex>
#include <sstream>
#include <thread>

#include "ihk/common/hashing.hpp"
#include "ihk/common/image_io.hpp"
#include "ihk/common/log.hpp"
#include "ihk/genmodels/toy_data.hpp"
#include "ihk/pipeline/captions.hpp"

namespace ihk::pipeline {

nlohmann::json to_json(const ClientRequest& r) {
  return {{"task", r.task}, {"messages", r.messages}, {"images", r.images}, {"seed", r.seed}, {"params", r.params}};
}

ClientRequest client_request_from_json(const nlohmann::json& j) {
  ClientRequest r;
  r.task = j.at("task").get<std::string>();
  r.messages = j.value("messages", std::vector<std::string>{});
  r.images = j.value("images", std::vector<std::string>{});
  r.seed = j.value("seed", uint64_t{0});
  r.params = j.value("params", nlohmann::json::object());
  return r;
}

ClientReply complete_with_retry(ModelClient& client, const ClientRequest& request, const RetryPolicy& policy) {
  auto delay = policy.initial_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      return client.complete(request);
    } catch (const TransientError& e) {
      if (attempt >= policy.attempts) throw;
      log_warn(client.name() + " attempt " + std::to_string(attempt) + " failed: " + e.what());
      if (policy.sleep) {
        policy.sleep(delay);
      } else {
        std::this_thread::sleep_for(delay);
      }
      delay = std::chrono::milliseconds(static_cast<int64_t>(static_cast<double>(delay.count()) * policy.factor));
    }
  }
}

ClientReply CountingClient::complete(const ClientRequest& request) {
  ++calls_;
  return inner_->complete(request);
}

ClientReply FlakyClient::complete(const ClientRequest& request) {
  if (remaining_.fetch_sub(1) > 0) throw TransientError("injected failure");
  return inner_->complete(request);
}

ClientReply MockCaptionClient::complete(const ClientRequest& request) {
  if (request.task != "caption") throw std::invalid_argument("caption client cannot handle task " + request.task);
  const int count = request.params.value("count", 1);
  std::string text;
  for (int k = 0; k < count; ++k) {
    if (k) text += "\n";
    text += genmodels::sample_identity(model_, request.seed + static_cast<uint64_t>(k)).describe();
  }
  return {text, cost_};
}

namespace {

// First `n` words, cycling through the text when it is shorter.
std::string exact_words(const std::string& text, int n) {
  auto words = split_words(text);
  if (words.empty()) words = {"person"};
  std::string out;
  for (int i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += words[static_cast<std::size_t>(i) % words.size()];
  }
  return out;
}

// Area-resampled copy of an H x W x C image.
torch::Tensor fit_to(const torch::Tensor& image, int64_t h, int64_t w) {
  if (image.size(0) == h && image.size(1) == w) return image;
  namespace F = torch::nn::functional;
  auto x = image.permute({2, 0, 1}).unsqueeze(0);
  x = F::interpolate(x, F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kArea));
  return x.squeeze(0).permute({1, 2, 0}).contiguous();
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

ClientReply MockSummarizer::complete(const ClientRequest& request) {
  if (request.messages.empty()) throw std::invalid_argument("summarizer request has no caption");
  const auto& caption = request.messages.back();
  if (request.task == "summarize") {
    std::ostringstream out;
    for (int level = 1; level <= kCaptionLevels; ++level) {
      int n = kLevelWordTargets[static_cast<std::size_t>(level - 1)];
      if (contains(options_.violate_levels, level)) n = level_word_limit(0) + 10;
      out << level << ". " << exact_words(caption, n) << "\n";
    }
    return {out.str(), options_.cost_per_call};
  }
  if (request.task == "summarize_level") {
    const int level = request.params.at("level").get<int>();
    int n = request.params.at("max_words").get<int>();
    if (options_.stubborn && contains(options_.violate_levels, level)) n = level_word_limit(0) + 10;
    return {exact_words(caption, n), options_.cost_per_call};
  }
  throw std::invalid_argument("summarizer cannot handle task " + request.task);
}

ClientReply MockJudge::complete(const ClientRequest& request) {
  if (request.task != "judge") throw std::invalid_argument("judge cannot handle task " + request.task);
  const auto call = calls_.fetch_add(1);
  const double cost = options_.cost_per_call;
  switch (options_.mode) {
    case Mode::always_no: return {"No", cost};
    case Mode::always_malformed: return {"I think the second one, maybe?", cost};
    case Mode::malformed_once:
      if (call == 0) return {"I think the second one, maybe?", cost};
      break;
    case Mode::nearest: break;
  }
  if (request.images.size() < 2) throw std::invalid_argument("judge request needs a context image and candidates");
  const auto first = decode_png(base64_decode(request.images[1]));
  const auto reference = fit_to(options_.reference ? *options_.reference : decode_png(base64_decode(request.images[0])),
                                first.size(0), first.size(1));
  double best = 0.0;
  std::size_t best_index = 0;
  for (std::size_t i = 1; i < request.images.size(); ++i) {
    auto img = decode_png(base64_decode(request.images[i]));
    if (img.size(2) != reference.size(2)) throw std::invalid_argument("candidate and reference channels differ");
    const double err = (img - reference).pow(2).mean().item<double>();
    if (i == 1 || err < best) {
      best = err;
      best_index = i;
    }
  }
  if (best > options_.reject_above) return {"No", cost};
  return {std::to_string(best_index), cost};
}

HttpClient::HttpClient(std::string url, std::string api_key, std::chrono::seconds timeout)
    : url_(std::move(url)), api_key_(std::move(api_key)), timeout_(timeout) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url_, m, re)) throw std::invalid_argument("bad client url '" + url_ + "'");
  scheme_host_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/";
}

ClientReply HttpClient::complete(const ClientRequest& request) {
  httplib::Client cli(scheme_host_);
  cli.set_connection_timeout(timeout_);
  cli.set_read_timeout(timeout_);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  auto res = cli.Post(path_, headers, to_json(request).dump(), "application/json");
  if (!res) throw TransientError("request to " + url_ + " failed: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500) {
    throw TransientError(url_ + " returned HTTP " + std::to_string(res->status));
  }
  if (res->status != 200) throw std::runtime_error(url_ + " returned HTTP " + std::to_string(res->status));
  const auto body = nlohmann::json::parse(res->body, nullptr, false);
  if (body.is_discarded() || !body.contains("text")) throw std::runtime_error(url_ + " returned an invalid reply");
  return {body.at("text").get<std::string>(), body.value("cost", 0.0)};
}

Clients mock_clients(const bodyfit::BodyModel& model) {
  return {std::make_shared<MockCaptionClient>(model), std::make_shared<MockSummarizer>(), std::make_shared<MockJudge>()};
}

Clients http_clients(const nlohmann::json& config) {
  const char* key = std::getenv("IHK_API_KEY");
  const std::string api_key = key ? key : "";
  if (api_key.empty()) log_warn("IHK_API_KEY is not set; requests go out unauthenticated");
  auto make = [&](const char* field) -> std::shared_ptr<ModelClient> {
    if (!config.contains(field)) throw std::runtime_error(std::string("client config lacks ") + field);
    return std::make_shared<HttpClient>(config.at(field).get<std::string>(), api_key);
  };
  return {make("caption_url"), make("summarizer_url"), make("judge_url")};
}

}  // namespace ihk::pipeline
