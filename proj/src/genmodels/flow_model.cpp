#include "ihk/genmodels/flow_model.hpp"

#include <cmath>
#include <stdexcept>

namespace ihk::genmodels {

namespace nn = torch::nn;
using mvattention::ResBlock;

void FlowModelConfig::validate() const {
  if (channels <= 0 || resolution <= 0 || aligned_channels < 0 || reference_dim < 0) {
    throw std::invalid_argument("bad flow model channel counts");
  }
  if (channel_mults.empty()) throw std::invalid_argument("channel_mults must not be empty");
  for (auto m : channel_mults) {
    if (m <= 0 || (base_channels * m) % groups != 0) throw std::invalid_argument("level widths must be multiples of groups");
  }
  const int64_t factor = int64_t{1} << (channel_mults.size() - 1);
  if (resolution % factor != 0) throw std::invalid_argument("resolution must divide the downsampling factor");
}

nlohmann::json to_json(const FlowModelConfig& c) {
  return {{"channels", c.channels},         {"resolution", c.resolution},   {"aligned_channels", c.aligned_channels},
          {"reference_dim", c.reference_dim}, {"base_channels", c.base_channels}, {"channel_mults", c.channel_mults},
          {"groups", c.groups},             {"heads", c.heads},             {"head_dim", c.head_dim},
          {"text_dim", c.text_dim}};
}

FlowModelConfig flow_config_from_json(const nlohmann::json& j) {
  FlowModelConfig c;
  c.channels = j.value("channels", c.channels);
  c.resolution = j.value("resolution", c.resolution);
  c.aligned_channels = j.value("aligned_channels", c.aligned_channels);
  c.reference_dim = j.value("reference_dim", c.reference_dim);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.groups = j.value("groups", c.groups);
  c.heads = j.value("heads", c.heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.validate();
  return c;
}

FlowConditions FlowConditions::select(int64_t index) const {
  FlowConditions out;
  auto pick = [&](const torch::Tensor& t) { return t.defined() ? t.narrow(0, index, 1) : t; };
  out.aligned = pick(aligned);
  out.reference_tokens = pick(reference_tokens);
  out.reference_positions = reference_positions;
  out.text = pick(text);
  return out;
}

FlowConditions FlowConditions::stack(const std::vector<FlowConditions>& items) {
  if (items.empty()) throw std::invalid_argument("nothing to stack");
  FlowConditions out;
  auto cat = [&](auto member) {
    std::vector<torch::Tensor> parts;
    for (const auto& it : items) {
      if (!(it.*member).defined()) return torch::Tensor();
      parts.push_back(it.*member);
    }
    return torch::cat(parts, 0);
  };
  out.aligned = cat(&FlowConditions::aligned);
  out.reference_tokens = cat(&FlowConditions::reference_tokens);
  out.reference_positions = items.front().reference_positions;
  // Captions differ in length; pad with zero tokens.
  int64_t longest = 0;
  bool any_text = false;
  for (const auto& it : items) {
    if (it.text.defined()) {
      any_text = true;
      longest = std::max(longest, it.text.size(1));
    }
  }
  if (any_text) {
    std::vector<torch::Tensor> parts;
    for (const auto& it : items) {
      auto t = it.text;
      if (!t.defined()) throw std::invalid_argument("either every item has text or none does");
      if (t.size(1) < longest) t = torch::cat({t, torch::zeros({t.size(0), longest - t.size(1), t.size(2)})}, 1);
      parts.push_back(t);
    }
    out.text = torch::cat(parts, 0);
  }
  return out;
}

torch::Tensor position_embedding(const torch::Tensor& positions, int64_t dim) {
  const int64_t quarter = dim / 4;
  auto freqs = torch::exp(torch::arange(quarter, torch::kFloat32) * (-std::log(100.0) / static_cast<double>(quarter)));
  std::vector<torch::Tensor> parts;
  for (int64_t axis = 0; axis < 2; ++axis) {
    auto args = positions.select(1, axis).to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    parts.push_back(torch::sin(args));
    parts.push_back(torch::cos(args));
  }
  auto emb = torch::cat(parts, 1);
  if (emb.size(1) < dim) emb = torch::cat({emb, torch::zeros({emb.size(0), dim - emb.size(1)})}, 1);
  return emb;
}

FlowModelImpl::FlowModelImpl(FlowModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const int64_t base = c.base_channels;
  time_dim_ = 4 * base;
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(c.channels + c.aligned_channels, base, 3).padding(1)));
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(base, time_dim_), nn::SiLU(),
                                                        nn::Linear(time_dim_, time_dim_)));
  down_blocks = register_module("down_blocks", nn::ModuleList());
  downsamplers = register_module("downsamplers", nn::ModuleList());
  up_blocks = register_module("up_blocks", nn::ModuleList());
  upsamplers = register_module("upsamplers", nn::ModuleList());
  const auto levels = static_cast<int64_t>(c.channel_mults.size());
  std::vector<int64_t> widths;
  for (auto m : c.channel_mults) widths.push_back(base * m);
  int64_t prev = base;
  for (int64_t i = 0; i < levels; ++i) {
    down_blocks->push_back(ResBlock(prev, widths[i], time_dim_, c.groups));
    if (i + 1 < levels) downsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(widths[i], widths[i], 3).stride(2).padding(1)));
    prev = widths[i];
  }
  const int64_t mid = widths.back();
  mid1 = register_module("mid1", ResBlock(mid, mid, time_dim_, c.groups));
  self_norm = register_module("self_norm", nn::LayerNorm(nn::LayerNormOptions({mid})));
  self_attn = register_module("self_attn", mvattention::MultiHeadAttention(mid, mid, c.heads, c.head_dim));
  cross_norm = register_module("cross_norm", nn::LayerNorm(nn::LayerNormOptions({mid})));
  cross_attn = register_module("cross_attn", mvattention::MultiHeadAttention(mid, mid, c.heads, c.head_dim));
  text_proj = register_module("text_proj", nn::Linear(c.text_dim, mid));
  if (c.reference_dim > 0) reference_proj = register_module("reference_proj", nn::Linear(c.reference_dim, mid));
  mid2 = register_module("mid2", ResBlock(mid, mid, time_dim_, c.groups));
  int64_t cur = mid;
  for (int64_t i = levels - 1; i >= 0; --i) {
    up_blocks->push_back(ResBlock(cur + widths[i], widths[i], time_dim_, c.groups));
    if (i > 0) upsamplers->push_back(nn::Conv2d(nn::Conv2dOptions(widths[i], widths[i], 3).padding(1)));
    cur = widths[i];
  }
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(c.groups, base)));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(base, c.channels, 3).padding(1)));
}

torch::Tensor FlowModelImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const FlowConditions& cond) {
  const auto& c = config_;
  if (!x.defined() || x.dim() != 4 || x.size(1) != c.channels || x.size(2) != c.resolution || x.size(3) != c.resolution) {
    throw std::invalid_argument("flow state must be B x C x R x R at the configured resolution");
  }
  const auto b = x.size(0);
  if (!t.defined() || t.dim() != 1 || t.size(0) != b) throw std::invalid_argument("t must hold one time per sample");
  auto input = x;
  if (c.aligned_channels > 0) {
    const auto& a = cond.aligned;
    if (!a.defined() || a.dim() != 4 || a.size(0) != b || a.size(1) != c.aligned_channels || a.size(2) != x.size(2) ||
        a.size(3) != x.size(3)) {
      throw std::invalid_argument("aligned condition must be B x aligned_channels x R x R");
    }
    input = torch::cat({x, a.to(x.scalar_type())}, 1);
  }

  auto temb = time_mlp->forward<torch::Tensor>(mvattention::timestep_embedding(t.to(torch::kFloat32) * 1000.0, c.base_channels));
  auto h = conv_in(input);
  std::vector<torch::Tensor> skips;
  const auto levels = static_cast<int64_t>(c.channel_mults.size());
  for (int64_t i = 0; i < levels; ++i) {
    h = down_blocks[i]->as<ResBlock>()->forward(h, temb);
    skips.push_back(h);
    if (i + 1 < levels) h = downsamplers[i]->as<torch::nn::Conv2d>()->forward(h);
  }
  h = mid1(h, temb);
  {
    const auto ch = h.size(1), gh = h.size(2), gw = h.size(3);
    auto tokens = h.flatten(2).transpose(1, 2);  // B x (gh*gw) x C
    auto rows = torch::arange(gh, torch::kFloat32).unsqueeze(1).expand({gh, gw});
    auto cols = torch::arange(gw, torch::kFloat32).unsqueeze(0).expand({gh, gw});
    auto pos = position_embedding(torch::stack({rows, cols}, -1).reshape({gh * gw, 2}), ch);
    auto normed = self_norm(tokens) + pos.unsqueeze(0);
    tokens = tokens + self_attn(normed, normed);

    std::vector<torch::Tensor> context;
    if (cond.text.defined() && cond.text.numel() > 0) {
      if (cond.text.dim() != 3 || cond.text.size(0) != b || cond.text.size(2) != c.text_dim) {
        throw std::invalid_argument("text must be B x L x text_dim");
      }
      context.push_back(text_proj(cond.text.to(torch::kFloat32)));
    }
    if (c.reference_dim > 0 && cond.reference_tokens.defined() && cond.reference_tokens.numel() > 0) {
      const auto& r = cond.reference_tokens;
      if (r.dim() != 3 || r.size(0) != b || r.size(2) != c.reference_dim || !cond.reference_positions.defined() ||
          cond.reference_positions.size(0) != r.size(1)) {
        throw std::invalid_argument("reference tokens must be B x P x reference_dim with P positions");
      }
      context.push_back(reference_proj(r.to(torch::kFloat32)) + position_embedding(cond.reference_positions, ch).unsqueeze(0));
    }
    if (!context.empty()) {
      auto ctx = torch::cat(context, 1);
      tokens = tokens + cross_attn(cross_norm(tokens) + pos.unsqueeze(0), ctx);
    }
    h = tokens.transpose(1, 2).reshape({b, ch, gh, gw});
  }
  h = mid2(h, temb);
  for (int64_t k = 0; k < levels; ++k) {
    const int64_t i = levels - 1 - k;
    h = torch::cat({h, skips[static_cast<std::size_t>(i)]}, 1);
    h = up_blocks[k]->as<ResBlock>()->forward(h, temb);
    if (i > 0) {
      h = torch::upsample_nearest2d(h, {h.size(2) * 2, h.size(3) * 2});
      h = upsamplers[k]->as<torch::nn::Conv2d>()->forward(h);
    }
  }
  return conv_out(torch::silu(norm_out(h)));
}

}  // namespace ihk::genmodels
