#include "difft/nn.hpp"

#include <cmath>
#include <limits>

namespace difft {

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int d_model, int n_heads, int kv_dim)
    : n_heads_(n_heads), d_head_(d_model / n_heads) {
  TORCH_CHECK(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  if (kv_dim <= 0) kv_dim = d_model;
  q_ = register_module("q", torch::nn::Linear(d_model, d_model));
  k_ = register_module("k", torch::nn::Linear(kv_dim, d_model));
  v_ = register_module("v", torch::nn::Linear(kv_dim, d_model));
  o_ = register_module("o", torch::nn::Linear(d_model, d_model));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& kv,
                                              const torch::Tensor& key_padding, bool causal) {
  const auto B = x.size(0), Lq = x.size(1), Lk = kv.size(1);
  auto split = [&](const torch::Tensor& t, int64_t L) {
    return t.view({B, L, n_heads_, d_head_}).transpose(1, 2);
  };
  auto q = split(q_(x), Lq);
  auto k = split(k_(kv), Lk);
  auto v = split(v_(kv), Lk);

  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d_head_));
  const double neg_inf = -std::numeric_limits<double>::infinity();
  if (causal) {
    auto future = torch::ones({Lq, Lk}, torch::kBool).triu(1);
    scores = scores.masked_fill(future, neg_inf);
  }
  if (key_padding.defined()) {
    scores = scores.masked_fill(key_padding.view({B, 1, 1, Lk}), neg_inf);
  }
  auto out = torch::matmul(torch::softmax(scores, -1), v);
  return o_(out.transpose(1, 2).contiguous().view({B, Lq, n_heads_ * d_head_}));
}

FeedForwardImpl::FeedForwardImpl(int d_model, int hidden) {
  fc1_ = register_module("fc1", torch::nn::Linear(d_model, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, d_model));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) {
  return fc2_(torch::gelu(fc1_(x)));
}

EncoderLayerImpl::EncoderLayerImpl(int d_model, int n_heads, int ffn) {
  ln1_ = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  attn_ = register_module("attn", MultiHeadAttention(d_model, n_heads));
  ln2_ = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  ffn_ = register_module("ffn", FeedForward(d_model, ffn));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& key_padding) {
  auto h = ln1_(x);
  auto y = x + attn_->forward(h, h, key_padding);
  return y + ffn_->forward(ln2_(y));
}

DecoderLayerImpl::DecoderLayerImpl(int d_model, int n_heads, int ffn, bool causal)
    : causal_(causal) {
  ln1_ = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  self_attn_ = register_module("self_attn", MultiHeadAttention(d_model, n_heads));
  ln2_ = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  cross_attn_ = register_module("cross_attn", MultiHeadAttention(d_model, n_heads));
  ln3_ = register_module("ln3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  ffn_ = register_module("ffn", FeedForward(d_model, ffn));
}

torch::Tensor DecoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& memory) {
  auto h = ln1_(x);
  auto y = x + self_attn_->forward(h, h, {}, causal_);
  y = y + cross_attn_->forward(ln2_(y), memory);
  return y + ffn_->forward(ln3_(y));
}

}  // namespace difft
