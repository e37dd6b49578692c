#include "ihk/splat/generator.hpp"

#include <cmath>
#include <stdexcept>

#include "ihk/bodyfit/camera.hpp"
#include "ihk/common/log.hpp"
#include "ihk/splat/renderer.hpp"

namespace ihk::splat {

namespace nn = torch::nn;

void GeneratorConfig::validate() const {
  if (latent_channels <= 0 || latent_resolution <= 0 || latent_resolution % 2 != 0) {
    throw std::invalid_argument("generator latent resolution must be positive and even");
  }
  if (features <= 0 || features % groups != 0) throw std::invalid_argument("generator features must be a multiple of groups");
  if (!(initial_scale > 0.0)) throw std::invalid_argument("initial_scale must be positive");
}

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"latent_channels", c.latent_channels}, {"latent_resolution", c.latent_resolution},
          {"features", c.features},               {"heads", c.heads},
          {"head_dim", c.head_dim},               {"groups", c.groups},
          {"initial_scale", c.initial_scale}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.latent_resolution = j.value("latent_resolution", c.latent_resolution);
  c.features = j.value("features", c.features);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.groups = j.value("groups", c.groups);
  c.initial_scale = j.value("initial_scale", c.initial_scale);
  c.validate();
  return c;
}

SplatGeneratorImpl::SplatGeneratorImpl(GeneratorConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto f = config_.features;
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(2 * config_.latent_channels, f, 3).padding(1)));
  norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(config_.groups, f)));
  conv_down = register_module("conv_down", nn::Conv2d(nn::Conv2dOptions(f, f, 3).stride(2).padding(1)));
  norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(config_.groups, f)));
  conv_mid = register_module("conv_mid", nn::Conv2d(nn::Conv2dOptions(f, f, 3).padding(1)));
  norm_attn = register_module("norm_attn", nn::GroupNorm(nn::GroupNormOptions(config_.groups, f)));
  fuse = register_module("fuse", mvattention::RowAttention(f, config_.heads, config_.head_dim));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(f, 8, 1)));
  {
    torch::NoGradGuard no_grad;
    head->weight.zero_();
    head->bias.zero_();
  }

  const int64_t g = config_.grid();
  auto anchors = torch::zeros({4, g, g, 3}, torch::kFloat64);
  for (std::size_t v = 0; v < kCanonicalViews.size(); ++v) {
    auto r = bodyfit::volume_camera(kCanonicalViews[v], config_.latent_resolution).rotation_tensor();
    for (int64_t i = 0; i < g; ++i) {
      for (int64_t j = 0; j < g; ++j) {
        const double x = -1.0 + (static_cast<double>(j) + 0.5) * 2.0 / static_cast<double>(g);
        const double y = 1.0 - (static_cast<double>(i) + 0.5) * 2.0 / static_cast<double>(g);
        // Camera-space point on the ray at depth 0, back to world.
        anchors[static_cast<int64_t>(v)][i][j] = torch::matmul(r.t(), torch::tensor({x, y, 0.0}, torch::kFloat64));
      }
    }
  }
  anchor_logits = register_buffer("anchor_logits",
                                  torch::atanh(torch::clamp(anchors.view({-1, 3}), -0.95, 0.95)).to(torch::kFloat32));
}

GaussianSet SplatGeneratorImpl::forward(const torch::Tensor& mv_pred, const torch::Tensor& x_t) {
  const auto c = config_.latent_channels, r = config_.latent_resolution;
  for (const auto* t : {&mv_pred, &x_t}) {
    if (!t->defined() || t->dim() != 4 || t->size(0) != 4 || t->size(1) != c || t->size(2) != r || t->size(3) != r) {
      throw std::invalid_argument("generator inputs must be 4 x C x R x R body-view latents");
    }
  }
  auto h = conv_in(torch::cat({mv_pred, x_t}, 1).to(torch::kFloat32));
  h = conv_down(torch::silu(norm1(h)));
  h = h + conv_mid(torch::silu(norm2(h)));
  h = h + fuse(norm_attn(h).unsqueeze(0)).squeeze(0);
  auto out = head(torch::silu(h)).permute({0, 2, 3, 1}).reshape({-1, 8});  // [view][row][col]
  GaussianSet gs;
  gs.means = torch::tanh(anchor_logits + out.narrow(1, 0, 3));
  // scale stays within e^{+-3} of the initial scale
  gs.log_scales = std::log(config_.initial_scale) + 3.0 * torch::tanh(out.select(1, 3) / 3.0);
  gs.colors = torch::sigmoid(out.narrow(1, 4, 3));
  gs.logit_opacities = out.select(1, 7);
  return gs;
}

GaussianSet splat_generator(const mvattention::ViewSet& mv_pred, const torch::Tensor& x_t, SplatGenerator& params) {
  mv_pred.validate();
  if (mv_pred.part != BodyPart::body) throw std::invalid_argument("the splat generator consumes body views");
  if (mv_pred.labels.size() != kCanonicalViews.size()) throw std::invalid_argument("the splat generator needs 4 body views");
  for (std::size_t i = 0; i < kCanonicalViews.size(); ++i) {
    if (mv_pred.labels[i] != kCanonicalViews[i]) {
      throw std::invalid_argument("body views must be front, right, back, left in that order");
    }
  }
  return params(mv_pred.data, x_t);
}

namespace {

torch::Tensor render_loss(SplatGenerator& params, const torch::Tensor& targets, const torch::Tensor& mv_pred,
                          const torch::Tensor& x_t) {
  if (!targets.defined() || targets.dim() != 4 || targets.size(0) != 4 || targets.size(3) != 4 ||
      targets.size(1) != targets.size(2)) {
    throw std::invalid_argument("targets must be 4 x R x R x 4");
  }
  auto renders = render_views(params(mv_pred, x_t), targets.size(1));
  return torch::mse_loss(renders, targets.to(renders.scalar_type()));
}

}  // namespace

GeneratorStep generator_train_step(SplatGenerator& params, torch::optim::Optimizer& optimizer,
                                   const torch::Tensor& targets, const torch::Tensor& mv_pred, const torch::Tensor& x_t) {
  optimizer.zero_grad();
  auto loss = render_loss(params, targets, mv_pred, x_t);
  GeneratorStep step;
  step.loss = loss.item<double>();
  if (!std::isfinite(step.loss)) {
    log_warn("generator step skipped: non-finite loss");
    step.skipped = true;
    return step;
  }
  loss.backward();
  for (const auto& p : params->parameters()) {
    if (p.grad().defined() && !torch::isfinite(p.grad()).all().item<bool>()) {
      log_warn("generator step skipped: non-finite gradient");
      optimizer.zero_grad();
      step.skipped = true;
      return step;
    }
  }
  optimizer.step();
  return step;
}

double generator_loss(SplatGenerator& params, const torch::Tensor& targets, const torch::Tensor& mv_pred,
                      const torch::Tensor& x_t) {
  torch::NoGradGuard no_grad;
  return render_loss(params, targets, mv_pred, x_t).item<double>();
}

}  // namespace ihk::splat
