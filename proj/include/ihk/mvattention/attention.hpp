#pragma once

#include <vector>

#include <torch/torch.h>

#include "ihk/common/views.hpp"

namespace ihk::mvattention {

// A stack of views of one part: data is N x C x H x W.
struct ViewSet {
  torch::Tensor data;
  std::vector<ViewLabel> labels;
  BodyPart part = BodyPart::body;

  int64_t num_views() const { return data.size(0); }
  // Throws std::invalid_argument if the data is not N x C x H x W or the
  // label count differs from N.
  void validate() const;
};

ViewSet canonical_view_set(torch::Tensor data, BodyPart part);

// Scaled dot-product attention over already-projected heads.
// q: B x heads x Lq x d, k/v: B x heads x Lk x d. `mask` (Lq x Lk, bool,
// true = may attend) is optional. Writes the softmax weights to `weights`
// when given.
torch::Tensor scaled_dot_product(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                 const torch::Tensor& mask = {}, torch::Tensor* weights = nullptr);

// Multi-head projections: q from the query tokens, k/v from the context.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t query_dim, int64_t context_dim, int64_t heads, int64_t head_dim);

  // query: B x Lq x query_dim, context: B x Lk x context_dim -> B x Lq x query_dim.
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& context, const torch::Tensor& mask = {},
                        torch::Tensor* weights = nullptr);
  void zero_output();

  int64_t heads() const { return heads_; }
  int64_t head_dim() const { return head_dim_; }

  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};

 private:
  torch::Tensor split_heads(const torch::Tensor& x) const;
  int64_t heads_;
  int64_t head_dim_;
};
TORCH_MODULE(MultiHeadAttention);

// Row-locked cross-view self-attention. For orthographic views the epipolar
// line of a pixel is its image row, so each query attends jointly to every
// column of the same row index across all views and to nothing else.
class RowAttentionImpl : public torch::nn::Module {
 public:
  RowAttentionImpl(int64_t channels, int64_t heads = 4, int64_t head_dim = 16);

  // x: B x N x C x H x W -> the attention branch, same shape (no residual).
  // `weights` receives (B*H) x heads x (N*W) x (N*W).
  torch::Tensor forward(const torch::Tensor& x, torch::Tensor* weights = nullptr);

  MultiHeadAttention attn{nullptr};
};
TORCH_MODULE(RowAttention);

// Dense pixel-level cross-attention between body and head views that share a
// view label, in both directions, with residual connections. Output
// projections start at zero so a fresh module is the identity.
class BodyHeadCrossAttentionImpl : public torch::nn::Module {
 public:
  BodyHeadCrossAttentionImpl(int64_t channels, int64_t heads = 4, int64_t head_dim = 16);

  // body: B x N x C x Hb x Wb, head: B x N x C x Hh x Wh with views already
  // paired by index. Returns the updated (body, head).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& body, const torch::Tensor& head,
                                                  torch::Tensor* body_weights = nullptr,
                                                  torch::Tensor* head_weights = nullptr);

  torch::nn::LayerNorm norm_body{nullptr}, norm_head{nullptr};
  MultiHeadAttention body_from_head{nullptr}, head_from_body{nullptr};
};
TORCH_MODULE(BodyHeadCrossAttention);

// ViewSet-level entry points.
ViewSet ortho_mv_attention(const ViewSet& views, RowAttention& params, torch::Tensor* weights = nullptr);
// Pairs head views to body views by label (any order), runs the cross
// attention and returns both sets in their original orders. Throws
// std::invalid_argument when the label sets differ.
std::pair<ViewSet, ViewSet> body_head_cross_attention(const ViewSet& body, const ViewSet& head,
                                                      BodyHeadCrossAttention& params);

// W' = [W | 0]: widens a conv kernel C_out x C_in x k x k by `extra_in`
// zero input channels.
torch::Tensor expand_input_channels(const torch::Tensor& weights, int64_t extra_in);

}  // namespace ihk::mvattention
