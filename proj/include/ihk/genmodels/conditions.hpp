#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/bodyfit/body_model.hpp"

namespace ihk::genmodels {

inline constexpr int64_t kAlignedOffset = 0;
inline constexpr int64_t kReferenceOffset = -48;

// Lower-cased alphanumeric words of a caption.
std::vector<std::string> tokenize(const std::string& text);

// Fixed hash-bucket text embedding: every word maps to one of `vocab`
// buckets, each bucket to a fixed pseudo-random unit-variance vector.
// Returns L x dim with L = min(#words, max_tokens) (0 rows for empty text).
torch::Tensor hash_text_embedding(const std::string& text, int64_t dim = 32, int64_t max_tokens = 48,
                                  int64_t vocab = 4096);

// Conditions of one subject at image resolution.
struct ConditionBundle {
  std::string caption;
  torch::Tensor text_tokens;       // L x text_dim
  torch::Tensor body_normal_maps;  // 4 x H x W x 4 (normal rgb + coverage)
  torch::Tensor head_normal_maps;  // 4 x H x W x 4
  torch::Tensor cloth_image;       // H x W x 4 premultiplied RGBA
  uint64_t seed = 0;
  std::optional<bodyfit::BodyParams> body_params;

  int64_t resolution() const { return cloth_image.defined() ? cloth_image.size(0) : 0; }
  // Throws std::invalid_argument unless every image is at `resolution`.
  void validate(int64_t resolution) const;
};

ConditionBundle make_condition_bundle(const bodyfit::BodyModel& model, const bodyfit::BodyParams& params,
                                      const torch::Tensor& cloth_image, const std::string& caption, uint64_t seed,
                                      int64_t resolution, int64_t text_dim = 32);

// Same bundle with every image and token zeroed.
ConditionBundle zeroed(const ConditionBundle& bundle);

// Latent-resolution conditions. The normal map is pixel aligned with the
// views it conditions (positional offset 0); the reference image is not and
// its patch tokens carry a negative column offset.
struct ConditionLatents {
  torch::Tensor body;  // 4 x 8 x h x w in [0,1]: normal map (4) + reference image (4)
  torch::Tensor head;  // 4 x 8 x h x w
  torch::Tensor text;  // L x text_dim
  torch::Tensor reference_tokens;     // P x (4 * patch * patch)
  torch::Tensor reference_positions;  // P x 2 (row, column + offset)
  int64_t aligned_offset = kAlignedOffset;
  int64_t reference_offset = kReferenceOffset;

  int64_t channels() const { return body.size(1); }
};

// Throws std::invalid_argument when the bundle resolution is not a multiple
// of `latent_resolution` (or images disagree in size).
ConditionLatents encode_condition_bundle(const ConditionBundle& bundle, int64_t latent_resolution, int64_t patch = 4);

// Image (H x W x 4) at latent resolution -> patch tokens and their grid
// positions with `offset` added to the column index.
std::pair<torch::Tensor, torch::Tensor> patch_tokens(const torch::Tensor& latent, int64_t patch, int64_t offset);

}  // namespace ihk::genmodels
