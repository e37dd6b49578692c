#pragma once

#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/mvattention/attention.hpp"
#include "ihk/mvattention/denoiser.hpp"

namespace ihk::genmodels {

struct FlowModelConfig {
  int64_t channels = 4;
  int64_t resolution = 32;
  int64_t aligned_channels = 4;  // channel-concatenated, pixel-aligned condition
  int64_t reference_dim = 64;    // patch token size of the non-aligned reference (0 disables)
  int64_t base_channels = 32;
  std::vector<int64_t> channel_mults{1, 2};
  int64_t groups = 8;
  int64_t heads = 4;
  int64_t head_dim = 16;
  int64_t text_dim = 32;

  void validate() const;
};

nlohmann::json to_json(const FlowModelConfig& c);
FlowModelConfig flow_config_from_json(const nlohmann::json& j);

// Batched conditioning of the velocity model.
struct FlowConditions {
  torch::Tensor aligned;              // B x aligned_channels x R x R
  torch::Tensor reference_tokens;     // B x P x reference_dim, may be undefined
  torch::Tensor reference_positions;  // P x 2 token positions (row, column + offset)
  torch::Tensor text;                 // B x L x text_dim, may be undefined

  FlowConditions select(int64_t index) const;  // one sample, batch of 1
  static FlowConditions stack(const std::vector<FlowConditions>& items);
};

// 2D sinusoidal embedding of (row, column) positions: P x 2 -> P x dim.
torch::Tensor position_embedding(const torch::Tensor& positions, int64_t dim);

// Conv U-Net velocity field. Aligned conditions are concatenated with the
// state; text and reference tokens form a cross-attention context at the
// bottleneck, where state tokens carry positional offset 0 and reference
// tokens their own (negative) offset.
class FlowModelImpl : public torch::nn::Module {
 public:
  explicit FlowModelImpl(FlowModelConfig config = {});

  // x: B x C x R x R, t: B in [0,1].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const FlowConditions& cond);

  const FlowModelConfig& config() const { return config_; }

  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::ModuleList down_blocks{nullptr}, downsamplers{nullptr}, up_blocks{nullptr}, upsamplers{nullptr};
  mvattention::ResBlock mid1{nullptr}, mid2{nullptr};
  torch::nn::LayerNorm self_norm{nullptr}, cross_norm{nullptr};
  mvattention::MultiHeadAttention self_attn{nullptr}, cross_attn{nullptr};
  torch::nn::Linear text_proj{nullptr}, reference_proj{nullptr};

 private:
  FlowModelConfig config_;
  int64_t time_dim_;
};
TORCH_MODULE(FlowModel);

}  // namespace ihk::genmodels
