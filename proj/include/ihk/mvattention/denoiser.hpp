#pragma once

#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/mvattention/attention.hpp"

namespace ihk::mvattention {

struct DenoiserConfig {
  int64_t latent_channels = 4;
  int64_t condition_channels = 8;  // normal map (4) + reference image (4)
  int64_t base_channels = 64;
  std::vector<int64_t> channel_mults{1, 2, 2};
  int64_t groups = 8;
  int64_t heads = 4;
  int64_t head_dim = 16;
  int64_t text_dim = 32;
  int64_t num_train_steps = 1000;

  int64_t input_channels() const { return latent_channels + condition_channels; }
  void validate() const;
};

nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

// Sinusoidal embedding of integer timesteps: B -> B x dim.
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in, int64_t out, int64_t time_dim, int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// Row attention wrapped with a pre-norm and residual, operating on a stack of
// (part, view) images ordered [group][view].
class ViewAttentionBlockImpl : public torch::nn::Module {
 public:
  ViewAttentionBlockImpl(int64_t channels, int64_t groups, int64_t heads, int64_t head_dim);
  torch::Tensor forward(const torch::Tensor& x, int64_t views);

  torch::nn::GroupNorm norm{nullptr};
  RowAttention attn{nullptr};
};
TORCH_MODULE(ViewAttentionBlock);

// Epsilon predictor over paired body/head view stacks. Both parts run through
// the same trunk; row attention mixes views inside a part, the bottleneck
// cross-attends body and head views of equal label and attends to the text
// context prefixed by a learned per-part token.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(DenoiserConfig config = {});

  // x_*: B x N x latent_C x H x W; cond_*: B x N x condition_C x H x W (may be
  // undefined when condition_channels == 0); text: B x L x text_dim (L may be
  // 0 or the tensor undefined); t: B int64 in [0, num_train_steps).
  // Returns (eps_body, eps_head) shaped like x_body / x_head.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x_body, const torch::Tensor& x_head,
                                                  const torch::Tensor& cond_body, const torch::Tensor& cond_head,
                                                  const torch::Tensor& text, const torch::Tensor& t);

  // Widens the input convolution by `extra` zero-initialised channels and
  // grows condition_channels accordingly.
  void expand_condition_channels(int64_t extra);

  const DenoiserConfig& config() const { return config_; }

  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Sequential time_mlp{nullptr};
  torch::Tensor part_embedding;  // 2 x time_dim
  torch::Tensor part_tokens;     // 2 x context_dim
  torch::nn::Linear text_proj{nullptr};
  torch::nn::ModuleList down_blocks{nullptr}, down_attn{nullptr}, downsamplers{nullptr};
  torch::nn::ModuleList up_blocks{nullptr}, up_attn{nullptr}, upsamplers{nullptr};
  ResBlock mid1{nullptr}, mid2{nullptr};
  ViewAttentionBlock mid_attn{nullptr};
  BodyHeadCrossAttention body_head{nullptr};
  torch::nn::LayerNorm text_norm{nullptr};
  MultiHeadAttention text_attn{nullptr};

 private:
  DenoiserConfig config_;
  int64_t time_dim_;
};
TORCH_MODULE(Denoiser);

}  // namespace ihk::mvattention
