#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ihk/genmodels/flow_model.hpp"
#include "ihk/pipeline/captions.hpp"
#include "ihk/pipeline/clients.hpp"

namespace ihk::pipeline {

inline constexpr int kTryoffCandidates = 4;

// `n` try-off draws with seeds seed, seed + 1, ... Each is R x R x 4 in [0,1].
std::vector<torch::Tensor> tryoff_extract(const torch::Tensor& person_image, const std::string& garment_label,
                                          genmodels::FlowModel& model, int n = kTryoffCandidates, uint64_t seed = 0,
                                          int steps = 20);

struct JudgeContext {
  torch::Tensor image;  // shown to the judge before the candidates
  std::string garment_label;
  std::string caption;
};

struct Selection {
  std::optional<std::size_t> index;  // 0-based; empty means no candidate matched
  std::string reply;                 // raw judge answer that decided it (1-based)
  int prompts = 0;
};

// Parsed judge answer: 1-based "k" -> k - 1, "No" -> NoMatch. Returns
// std::nullopt for anything else.
std::optional<Selection> parse_judge_reply(const std::string& reply, std::size_t candidates);

// Asks the judge for the best candidate. A malformed reply is re-prompted
// once; a second one raises StageError("rejection").
Selection reject_negatives(const std::vector<torch::Tensor>& candidates, const JudgeContext& context,
                           ModelClient& judge, uint64_t seed, CallLog* log = nullptr, const RetryPolicy& retry = {});

}  // namespace ihk::pipeline
