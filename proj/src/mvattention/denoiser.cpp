#include "ihk/mvattention/denoiser.hpp"

#include <cmath>
#include <stdexcept>

namespace ihk::mvattention {

namespace nn = torch::nn;

void DenoiserConfig::validate() const {
  if (latent_channels <= 0 || condition_channels < 0) throw std::invalid_argument("bad denoiser channel counts");
  if (channel_mults.empty()) throw std::invalid_argument("channel_mults must not be empty");
  if (groups <= 0 || heads <= 0 || head_dim <= 0 || text_dim <= 0) throw std::invalid_argument("bad denoiser sizes");
  for (auto m : channel_mults) {
    if (m <= 0 || (base_channels * m) % groups != 0) {
      throw std::invalid_argument("every level width must be a positive multiple of groups");
    }
  }
  if (num_train_steps < 2) throw std::invalid_argument("num_train_steps must be >= 2");
}

nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"latent_channels", c.latent_channels}, {"condition_channels", c.condition_channels},
          {"base_channels", c.base_channels},     {"channel_mults", c.channel_mults},
          {"groups", c.groups},                   {"heads", c.heads},
          {"head_dim", c.head_dim},               {"text_dim", c.text_dim},
          {"num_train_steps", c.num_train_steps}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.condition_channels = j.value("condition_channels", c.condition_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.groups = j.value("groups", c.groups);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.num_train_steps = j.value("num_train_steps", c.num_train_steps);
  c.validate();
  return c;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, torch::kFloat32) * (-std::log(10000.0) / static_cast<double>(half)));
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({t.size(0), 1})}, 1);
  return emb;
}

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t time_dim, int64_t groups) {
  norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(groups, in)));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  time_proj = register_module("time_proj", nn::Linear(time_dim, out));
  norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(groups, out)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
  if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time_proj(temb).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

ViewAttentionBlockImpl::ViewAttentionBlockImpl(int64_t channels, int64_t groups, int64_t heads, int64_t head_dim) {
  norm = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(groups, channels)));
  attn = register_module("attn", RowAttention(channels, heads, head_dim));
}

torch::Tensor ViewAttentionBlockImpl::forward(const torch::Tensor& x, int64_t views) {
  const auto c = x.size(1), h = x.size(2), w = x.size(3);
  auto y = norm(x).view({-1, views, c, h, w});
  return x + attn(y).view(x.sizes());
}

DenoiserImpl::DenoiserImpl(DenoiserConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const int64_t base = c.base_channels;
  time_dim_ = base * 4;
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(c.input_channels(), base, 3).padding(1)));
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(base, time_dim_), nn::SiLU(),
                                                        nn::Linear(time_dim_, time_dim_)));
  part_embedding = register_parameter("part_embedding", torch::randn({2, time_dim_}) * 0.02);

  down_blocks = register_module("down_blocks", nn::ModuleList());
  down_attn = register_module("down_attn", nn::ModuleList());
  downsamplers = register_module("downsamplers", nn::ModuleList());
  up_blocks = register_module("up_blocks", nn::ModuleList());
  up_attn = register_module("up_attn", nn::ModuleList());
  upsamplers = register_module("upsamplers", nn::ModuleList());

  const auto levels = static_cast<int64_t>(c.channel_mults.size());
  std::vector<int64_t> widths;
  for (auto m : c.channel_mults) widths.push_back(base * m);
  int64_t prev = base;
  for (int64_t i = 0; i < levels; ++i) {
    down_blocks->push_back(ResBlock(prev, widths[i], time_dim_, c.groups));
    down_attn->push_back(ViewAttentionBlock(widths[i], c.groups, c.heads, c.head_dim));
    if (i + 1 < levels) {
      downsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(widths[i], widths[i], 3).stride(2).padding(1)));
    }
    prev = widths[i];
  }

  const int64_t mid = widths.back();
  mid1 = register_module("mid1", ResBlock(mid, mid, time_dim_, c.groups));
  mid_attn = register_module("mid_attn", ViewAttentionBlock(mid, c.groups, c.heads, c.head_dim));
  body_head = register_module("body_head", BodyHeadCrossAttention(mid, c.heads, c.head_dim));
  part_tokens = register_parameter("part_tokens", torch::randn({2, mid}) * 0.02);
  text_proj = register_module("text_proj", nn::Linear(c.text_dim, mid));
  text_norm = register_module("text_norm", nn::LayerNorm(nn::LayerNormOptions({mid})));
  text_attn = register_module("text_attn", MultiHeadAttention(mid, mid, c.heads, c.head_dim));
  mid2 = register_module("mid2", ResBlock(mid, mid, time_dim_, c.groups));

  // Up path is stored from the deepest level to the shallowest.
  int64_t cur = mid;
  for (int64_t i = levels - 1; i >= 0; --i) {
    up_blocks->push_back(ResBlock(cur + widths[i], widths[i], time_dim_, c.groups));
    up_attn->push_back(ViewAttentionBlock(widths[i], c.groups, c.heads, c.head_dim));
    if (i > 0) upsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(widths[i], widths[i], 3).padding(1)));
    cur = widths[i];
  }
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(c.groups, base)));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(base, c.latent_channels, 3).padding(1)));
}

std::pair<torch::Tensor, torch::Tensor> DenoiserImpl::forward(const torch::Tensor& x_body, const torch::Tensor& x_head,
                                                              const torch::Tensor& cond_body,
                                                              const torch::Tensor& cond_head, const torch::Tensor& text,
                                                              const torch::Tensor& t) {
  const auto& c = config_;
  if (!x_body.defined() || x_body.dim() != 5 || !x_head.defined() || x_head.sizes() != x_body.sizes()) {
    throw std::invalid_argument("x_body and x_head must both be B x N x C x H x W with equal shapes");
  }
  const auto b = x_body.size(0), n = x_body.size(1), h = x_body.size(3), w = x_body.size(4);
  if (x_body.size(2) != c.latent_channels) throw std::invalid_argument("latent channel count mismatch");
  const int64_t factor = int64_t{1} << (c.channel_mults.size() - 1);
  if (h % factor != 0 || w % factor != 0) throw std::invalid_argument("spatial size must divide the downsampling factor");
  if (!t.defined() || t.dim() != 1 || t.size(0) != b) throw std::invalid_argument("t must hold one step per sample");
  if (t.numel() > 0 && (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= c.num_train_steps)) {
    throw std::invalid_argument("timestep out of range");
  }

  auto assemble = [&](const torch::Tensor& x, const torch::Tensor& cond) {
    if (c.condition_channels == 0) return x;
    if (!cond.defined() || cond.dim() != 5 || cond.size(0) != b || cond.size(1) != n ||
        cond.size(2) != c.condition_channels || cond.size(3) != h || cond.size(4) != w) {
      throw std::invalid_argument("condition latents must be B x N x condition_C x H x W");
    }
    return torch::cat({x, cond.to(x.scalar_type())}, 2);
  };
  // Stack ordered [sample][part][view].
  auto stacked = torch::stack({assemble(x_body, cond_body), assemble(x_head, cond_head)}, 1)
                     .reshape({b * 2 * n, c.input_channels(), h, w});

  auto temb = time_mlp->forward<torch::Tensor>(timestep_embedding(t, c.base_channels));                                // B x D
  temb = temb.unsqueeze(1) + part_embedding.unsqueeze(0);                                       // B x 2 x D
  temb = temb.unsqueeze(2).expand({b, 2, n, time_dim_}).reshape({b * 2 * n, time_dim_});

  auto hcur = conv_in(stacked);
  std::vector<torch::Tensor> skips;
  const auto levels = static_cast<int64_t>(c.channel_mults.size());
  for (int64_t i = 0; i < levels; ++i) {
    hcur = down_blocks[i]->as<ResBlock>()->forward(hcur, temb);
    hcur = down_attn[i]->as<ViewAttentionBlock>()->forward(hcur, n);
    skips.push_back(hcur);
    if (i + 1 < levels) hcur = downsamplers[i]->as<nn::Conv2d>()->forward(hcur);
  }

  hcur = mid1(hcur, temb);
  hcur = mid_attn(hcur, n);
  {
    const auto ch = hcur.size(1), mh = hcur.size(2), mw = hcur.size(3);
    auto parts = hcur.view({b, 2, n, ch, mh, mw});
    auto [body, head] = body_head(parts.select(1, 0), parts.select(1, 1));
    hcur = torch::stack({body, head}, 1);  // B x 2 x N x C x h x w

    // Text context per (sample, part): part token followed by projected caption tokens.
    auto ctx = part_tokens.unsqueeze(0).expand({b, 2, ch}).unsqueeze(2);  // B x 2 x 1 x C
    if (text.defined() && text.numel() > 0) {
      if (text.dim() != 3 || text.size(0) != b || text.size(2) != c.text_dim) {
        throw std::invalid_argument("text must be B x L x text_dim");
      }
      auto tokens = text_proj(text.to(torch::kFloat32)).unsqueeze(1).expand({b, 2, text.size(1), ch});
      ctx = torch::cat({ctx, tokens}, 2);
    }
    ctx = ctx.reshape({b * 2, -1, ch});
    auto queries = hcur.permute({0, 1, 2, 4, 5, 3}).reshape({b * 2, n * mh * mw, ch});
    auto attended = queries + text_attn(text_norm(queries), ctx);
    hcur = attended.view({b, 2, n, mh, mw, ch}).permute({0, 1, 2, 5, 3, 4}).reshape({b * 2 * n, ch, mh, mw});
  }
  hcur = mid2(hcur, temb);

  for (int64_t k = 0; k < levels; ++k) {
    const int64_t i = levels - 1 - k;
    hcur = torch::cat({hcur, skips[static_cast<std::size_t>(i)]}, 1);
    hcur = up_blocks[k]->as<ResBlock>()->forward(hcur, temb);
    hcur = up_attn[k]->as<ViewAttentionBlock>()->forward(hcur, n);
    if (i > 0) {
      hcur = torch::upsample_nearest2d(hcur, {hcur.size(2) * 2, hcur.size(3) * 2});
      hcur = upsamplers[k]->as<nn::Conv2d>()->forward(hcur);
    }
  }
  auto out = conv_out(torch::silu(norm_out(hcur))).view({b, 2, n, c.latent_channels, h, w});
  return {out.select(1, 0), out.select(1, 1)};
}

void DenoiserImpl::expand_condition_channels(int64_t extra) {
  if (extra < 0) throw std::invalid_argument("extra channels must be >= 0");
  if (extra == 0) return;
  auto widened = nn::Conv2d(nn::Conv2dOptions(config_.input_channels() + extra, config_.base_channels, 3).padding(1));
  {
    torch::NoGradGuard no_grad;
    widened->weight.copy_(expand_input_channels(conv_in->weight, extra));
    widened->bias.copy_(conv_in->bias);
  }
  conv_in = replace_module("conv_in", widened);
  config_.condition_channels += extra;
}

}  // namespace ihk::mvattention
