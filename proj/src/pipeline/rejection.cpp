#include "ihk/pipeline/rejection.hpp"

#include <algorithm>
#include <cctype>

#include "ihk/common/hashing.hpp"
#include "ihk/common/image_io.hpp"
#include "ihk/genmodels/gen_hres.hpp"

namespace ihk::pipeline {

std::vector<torch::Tensor> tryoff_extract(const torch::Tensor& person_image, const std::string& garment_label,
                                          genmodels::FlowModel& model, int n, uint64_t seed, int steps) {
  if (n < 1) throw std::invalid_argument("need at least one candidate");
  const auto cond = genmodels::tryoff_conditions(person_image, garment_label, model->config());
  std::vector<torch::Tensor> out;
  for (int k = 0; k < n; ++k) out.push_back(genmodels::sample_flow_image(model, cond, steps, seed + static_cast<uint64_t>(k)));
  return out;
}

std::optional<Selection> parse_judge_reply(const std::string& reply, std::size_t candidates) {
  std::string s;
  for (char c : reply) {
    if (!std::isspace(static_cast<unsigned char>(c))) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  while (!s.empty() && (s.back() == '.' || s.back() == '!')) s.pop_back();
  Selection sel;
  sel.reply = reply;
  if (s == "no") return sel;
  if (s.empty() || s.size() > 3 || !std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    return std::nullopt;
  }
  const auto k = static_cast<std::size_t>(std::stoul(s));
  if (k < 1 || k > candidates) return std::nullopt;
  sel.index = k - 1;
  return sel;
}

Selection reject_negatives(const std::vector<torch::Tensor>& candidates, const JudgeContext& context,
                           ModelClient& judge, uint64_t seed, CallLog* log, const RetryPolicy& retry) {
  if (candidates.empty()) throw std::invalid_argument("no candidates to judge");
  ClientRequest req;
  req.task = "judge";
  req.seed = seed;
  req.params = {{"candidates", candidates.size()}};
  req.messages = {"The first image shows a person. The following " + std::to_string(candidates.size()) +
                      " images are garment candidates for the " + context.garment_label +
                      ". Compare color, texture, pattern, length and details. Answer with the number of the best "
                      "matching candidate, or No if none match.",
                  context.caption};
  req.images.push_back(base64_encode(encode_png(context.image)));
  for (const auto& c : candidates) req.images.push_back(base64_encode(encode_png(c)));
  for (int attempt = 1; attempt <= 2; ++attempt) {
    ClientReply reply;
    try {
      reply = complete_with_retry(judge, req, retry);
    } catch (const TransientError& e) {
      throw StageError("rejection", std::string("client exhausted: ") + e.what());
    }
    if (log) log->add(req, reply);
    if (auto sel = parse_judge_reply(reply.text, candidates.size())) {
      sel->prompts = attempt;
      return *sel;
    }
    req.messages.push_back("Answer with a single candidate number or No.");
  }
  throw StageError("rejection", "judge reply malformed twice");
}

}  // namespace ihk::pipeline
