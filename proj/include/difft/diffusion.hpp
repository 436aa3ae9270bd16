#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include <torch/torch.h>

#include "difft/nn.hpp"
#include "difft/table_condition.hpp"

namespace difft {

/// Variance-preserving noise schedule; timesteps run 1..T and alpha_bar(0) = 1.
class DiffusionSchedule {
 public:
  static DiffusionSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  static DiffusionSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(static_cast<std::size_t>(t - 1)); }
  double snr(int t) const { return alpha_bar(t) / (1.0 - alpha_bar(t)); }

  /// alpha_bar for a [B] tensor of timesteps, as [B] doubles.
  torch::Tensor alpha_bar(const torch::Tensor& t) const;

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, t is [B] or scalar.
torch::Tensor forward_noise(const DiffusionSchedule& schedule, const torch::Tensor& z0,
                            const torch::Tensor& t, const torch::Tensor& eps);

/// min(SNR, gamma) / SNR.
double min_snr_weight(double snr, double gamma);

class ShapeMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DenoiserConfig {
  int n_blocks = 8;
  int d_model = 128;
  int n_heads = 4;
  int ffn = 512;
  int d_c = 128;
  int t_dim = 128;
  int m = 4;
  int d = 16;
};

/// LayerNorm without affine terms, modulated by scale/shift from the
/// timestep embedding.
class AdaLayerNormImpl : public torch::nn::Module {
 public:
  AdaLayerNormImpl(int d_model, int t_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t_emb);

 private:
  int d_model_;
  torch::nn::Linear mod_{nullptr};
};
TORCH_MODULE(AdaLayerNorm);

class DenoiserBlockImpl : public torch::nn::Module {
 public:
  explicit DenoiserBlockImpl(const DenoiserConfig& c);
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& t_emb, const torch::Tensor& cond);

 private:
  AdaLayerNorm norm1_{nullptr}, norm2_{nullptr};
  MultiHeadAttention self_attn_{nullptr}, cross_attn_{nullptr};
  torch::nn::LayerNorm norm3_{nullptr};
  FeedForward ffn_{nullptr};
};
TORCH_MODULE(DenoiserBlock);

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(DenoiserConfig config = {});

  const DenoiserConfig& config() const { return config_; }

  /// z_t: [B, m, d], t: [B] long, c: [B, d_c] -> predicted noise [B, m, d].
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c);

 private:
  DenoiserConfig config_;
  torch::nn::Linear in_proj_{nullptr};
  torch::Tensor pos_;
  torch::nn::Sequential t_mlp_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm final_norm_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Per-entry mean and standard deviation of a latent corpus.
struct LatentScaler {
  torch::Tensor mean;  // [m, d]
  torch::Tensor std;   // [m, d]

  static LatentScaler fit(const torch::Tensor& latents);
  torch::Tensor standardize(const torch::Tensor& z) const;
  torch::Tensor destandardize(const torch::Tensor& z) const;
};

/// Min-SNR weighted noise-prediction loss: t uniform in 1..T, eps ~ N(0, I);
/// each sample's squared error is averaged over its entries and weighted.
torch::Tensor ldm_loss(Denoiser& denoiser, const DiffusionSchedule& schedule,
                       const torch::Tensor& z0, const torch::Tensor& c, double gamma_snr,
                       const torch::Tensor& t = {}, const torch::Tensor& eps = {});

struct LdmTrainOptions {
  int epochs = 800;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double gamma_snr = 5.0;
  std::uint64_t seed = 0;
  std::function<void(int epoch, double loss)> on_epoch;
};

struct LdmTrainResult {
  std::vector<double> epoch_loss;
};

/// Joint training of the condition network and the denoiser on standardized
/// latents, one graph per latent.
LdmTrainResult train_ldm(Denoiser& denoiser, TableCondition& condition,
                         const DiffusionSchedule& schedule, const torch::Tensor& latents,
                         const std::vector<FeatureGraph>& graphs, const LdmTrainOptions& options);

}  // namespace difft
