#pragma once

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/mvattention/attention.hpp"
#include "ihk/splat/gaussians.hpp"

namespace ihk::splat {

struct GeneratorConfig {
  int64_t latent_channels = 4;
  int64_t latent_resolution = 32;
  int64_t features = 64;
  int64_t heads = 4;
  int64_t head_dim = 16;
  int64_t groups = 8;
  double initial_scale = 0.06;  // scene units

  // One Gaussian per cell of a (latent_resolution / 2)^2 grid in each of the 4 views.
  int64_t grid() const { return latent_resolution / 2; }
  int64_t num_gaussians() const { return 4 * grid() * grid(); }
  void validate() const;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

// Pixel-aligned decoder: each view is encoded by a shared conv stack, views
// exchange information through row attention, and every grid cell emits one
// Gaussian anchored on its pixel ray. Means pass through tanh so they stay
// inside [-1,1]^3.
class SplatGeneratorImpl : public torch::nn::Module {
 public:
  explicit SplatGeneratorImpl(GeneratorConfig config = {});

  // mv_pred, x_t: 4 x C x R x R body-view latents in front/right/back/left order.
  GaussianSet forward(const torch::Tensor& mv_pred, const torch::Tensor& x_t);

  const GeneratorConfig& config() const { return config_; }

  torch::nn::Conv2d conv_in{nullptr}, conv_down{nullptr}, conv_mid{nullptr}, head{nullptr};
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr}, norm_attn{nullptr};
  mvattention::RowAttention fuse{nullptr};
  torch::Tensor anchor_logits;  // M x 3 buffer: atanh of the ray anchors

 private:
  GeneratorConfig config_;
};
TORCH_MODULE(SplatGenerator);

// ViewSet-style entry point; throws std::invalid_argument unless exactly the
// four canonical body views are present.
GaussianSet splat_generator(const mvattention::ViewSet& mv_pred, const torch::Tensor& x_t, SplatGenerator& params);

struct GeneratorStep {
  double loss = 0.0;
  bool skipped = false;  // non-finite loss or gradients
};

// One optimiser step on the mean squared rendering error over the 4
// canonical cameras. targets: 4 x H x W x 4 premultiplied RGBA in [0,1].
GeneratorStep generator_train_step(SplatGenerator& params, torch::optim::Optimizer& optimizer,
                                   const torch::Tensor& targets, const torch::Tensor& mv_pred, const torch::Tensor& x_t);

// Mean squared rendering error without a step.
double generator_loss(SplatGenerator& params, const torch::Tensor& targets, const torch::Tensor& mv_pred,
                      const torch::Tensor& x_t);

}  // namespace ihk::splat
