#pragma once

#include <torch/torch.h>

namespace difft {

/// Multi-head scaled dot-product attention. `key_padding` is a [B, Lk] bool
/// tensor, true at keys to ignore; `causal` hides keys after each query.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int d_model, int n_heads, int kv_dim = 0);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& kv,
                        const torch::Tensor& key_padding = {}, bool causal = false);

 private:
  int n_heads_;
  int d_head_;
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, o_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int d_model, int hidden);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm self-attention block.
class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(int d_model, int n_heads, int ffn);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& key_padding = {});

 private:
  torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr};
  MultiHeadAttention attn_{nullptr};
  FeedForward ffn_{nullptr};
};
TORCH_MODULE(EncoderLayer);

/// Pre-norm causal self-attention, cross-attention to `memory`, feed-forward.
class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int d_model, int n_heads, int ffn, bool causal = true);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& memory);

 private:
  bool causal_;
  torch::nn::LayerNorm ln1_{nullptr}, ln2_{nullptr}, ln3_{nullptr};
  MultiHeadAttention self_attn_{nullptr}, cross_attn_{nullptr};
  FeedForward ffn_{nullptr};
};
TORCH_MODULE(DecoderLayer);

}  // namespace difft
