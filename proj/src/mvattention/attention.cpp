#include "ihk/mvattention/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace ihk::mvattention {

void ViewSet::validate() const {
  if (!data.defined() || data.dim() != 4) throw std::invalid_argument("view set data must be N x C x H x W");
  if (static_cast<int64_t>(labels.size()) != data.size(0)) throw std::invalid_argument("one label per view required");
}

ViewSet canonical_view_set(torch::Tensor data, BodyPart part) {
  ViewSet v{std::move(data), {}, part};
  for (int64_t i = 0; i < v.data.size(0); ++i) v.labels.push_back(kCanonicalViews.at(static_cast<std::size_t>(i % 4)));
  return v;
}

torch::Tensor scaled_dot_product(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                 const torch::Tensor& mask, torch::Tensor* weights) {
  auto scores = torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(static_cast<double>(q.size(-1)));
  if (mask.defined()) scores = scores.masked_fill(mask.logical_not(), -std::numeric_limits<float>::infinity());
  auto w = torch::softmax(scores, -1);
  if (weights) *weights = w;
  return torch::matmul(w, v);
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t query_dim, int64_t context_dim, int64_t heads, int64_t head_dim)
    : heads_(heads), head_dim_(head_dim) {
  const int64_t inner = heads * head_dim;
  to_q = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(query_dim, inner).bias(false)));
  to_k = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(context_dim, inner).bias(false)));
  to_v = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(context_dim, inner).bias(false)));
  to_out = register_module("to_out", torch::nn::Linear(inner, query_dim));
}

torch::Tensor MultiHeadAttentionImpl::split_heads(const torch::Tensor& x) const {
  return x.view({x.size(0), x.size(1), heads_, head_dim_}).transpose(1, 2);
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& context,
                                              const torch::Tensor& mask, torch::Tensor* weights) {
  auto q = split_heads(to_q(query));
  auto k = split_heads(to_k(context));
  auto v = split_heads(to_v(context));
  auto out = scaled_dot_product(q, k, v, mask, weights);  // B x heads x Lq x d
  out = out.transpose(1, 2).reshape({query.size(0), query.size(1), heads_ * head_dim_});
  return to_out(out);
}

void MultiHeadAttentionImpl::zero_output() {
  torch::NoGradGuard no_grad;
  to_out->weight.zero_();
  to_out->bias.zero_();
}

RowAttentionImpl::RowAttentionImpl(int64_t channels, int64_t heads, int64_t head_dim) {
  attn = register_module("attn", MultiHeadAttention(channels, channels, heads, head_dim));
}

torch::Tensor RowAttentionImpl::forward(const torch::Tensor& x, torch::Tensor* weights) {
  if (x.dim() != 5) throw std::invalid_argument("row attention expects B x N x C x H x W");
  const auto b = x.size(0), n = x.size(1), c = x.size(2), h = x.size(3), w = x.size(4);
  // Tokens of row r: all columns of row r in every view.
  auto rows = x.permute({0, 3, 1, 4, 2}).reshape({b * h, n * w, c});
  auto out = attn(rows, rows, torch::Tensor(), weights);
  return out.view({b, h, n, w, c}).permute({0, 2, 4, 1, 3}).contiguous();
}

BodyHeadCrossAttentionImpl::BodyHeadCrossAttentionImpl(int64_t channels, int64_t heads, int64_t head_dim) {
  norm_body = register_module("norm_body", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  norm_head = register_module("norm_head", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  body_from_head = register_module("body_from_head", MultiHeadAttention(channels, channels, heads, head_dim));
  head_from_body = register_module("head_from_body", MultiHeadAttention(channels, channels, heads, head_dim));
  body_from_head->zero_output();
  head_from_body->zero_output();
}

std::pair<torch::Tensor, torch::Tensor> BodyHeadCrossAttentionImpl::forward(const torch::Tensor& body,
                                                                            const torch::Tensor& head,
                                                                            torch::Tensor* body_weights,
                                                                            torch::Tensor* head_weights) {
  if (body.dim() != 5 || head.dim() != 5) throw std::invalid_argument("cross attention expects B x N x C x H x W");
  if (body.size(0) != head.size(0) || body.size(1) != head.size(1) || body.size(2) != head.size(2)) {
    throw std::invalid_argument("body and head view stacks must agree in batch, view count and channels");
  }
  const auto b = body.size(0), n = body.size(1), c = body.size(2);
  const auto hb = body.size(3), wb = body.size(4), hh = head.size(3), wh = head.size(4);
  // One attention problem per (sample, view): tokens never cross view labels.
  auto body_tokens = body.permute({0, 1, 3, 4, 2}).reshape({b * n, hb * wb, c});
  auto head_tokens = head.permute({0, 1, 3, 4, 2}).reshape({b * n, hh * wh, c});
  auto nb = norm_body(body_tokens), nh = norm_head(head_tokens);
  auto body_out = body_tokens + body_from_head(nb, nh, torch::Tensor(), body_weights);
  auto head_out = head_tokens + head_from_body(nh, nb, torch::Tensor(), head_weights);
  return {body_out.view({b, n, hb, wb, c}).permute({0, 1, 4, 2, 3}).contiguous(),
          head_out.view({b, n, hh, wh, c}).permute({0, 1, 4, 2, 3}).contiguous()};
}

ViewSet ortho_mv_attention(const ViewSet& views, RowAttention& params, torch::Tensor* weights) {
  views.validate();
  return {params(views.data.unsqueeze(0), weights).squeeze(0), views.labels, views.part};
}

std::pair<ViewSet, ViewSet> body_head_cross_attention(const ViewSet& body, const ViewSet& head,
                                                      BodyHeadCrossAttention& params) {
  body.validate();
  head.validate();
  if (body.num_views() != head.num_views()) throw std::invalid_argument("body and head need the same number of views");
  // head_index[i] = position in `head` of the view labelled body.labels[i].
  std::vector<int64_t> head_index;
  for (auto label : body.labels) {
    const auto it = std::find(head.labels.begin(), head.labels.end(), label);
    if (it == head.labels.end()) throw std::invalid_argument("head views lack label " + std::string(to_string(label)));
    head_index.push_back(it - head.labels.begin());
  }
  auto idx = torch::tensor(head_index, torch::kInt64);
  auto paired_head = head.data.index_select(0, idx);
  auto [b, h] = params(body.data.unsqueeze(0), paired_head.unsqueeze(0));
  // Scatter head results back to the caller's order.
  auto head_back = torch::empty_like(h.squeeze(0));
  head_back.index_copy_(0, idx, h.squeeze(0));
  return {ViewSet{b.squeeze(0), body.labels, body.part}, ViewSet{head_back, head.labels, head.part}};
}

torch::Tensor expand_input_channels(const torch::Tensor& weights, int64_t extra_in) {
  if (extra_in < 0) throw std::invalid_argument("extra_in must be >= 0");
  if (weights.dim() != 4) throw std::invalid_argument("conv kernel must be C_out x C_in x k x k");
  if (extra_in == 0) return weights.clone();
  auto zeros = torch::zeros({weights.size(0), extra_in, weights.size(2), weights.size(3)}, weights.options());
  return torch::cat({weights, zeros}, 1);
}

}  // namespace ihk::mvattention
