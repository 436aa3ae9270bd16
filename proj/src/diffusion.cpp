#include "difft/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "difft/vae.hpp"

namespace difft {

DiffusionSchedule DiffusionSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule needs at least one step");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    betas[static_cast<std::size_t>(i)] =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1.0);
  }
  return from_betas(std::move(betas));
}

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("schedule needs at least one step");
  DiffusionSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta must lie in (0, 1)");
    prod *= 1.0 - b;
    s.alpha_bar_.push_back(prod);
  }
  s.beta_ = std::move(betas);
  return s;
}

torch::Tensor DiffusionSchedule::alpha_bar(const torch::Tensor& t) const {
  auto table = torch::cat({torch::ones({1}, torch::kDouble), torch::tensor(alpha_bar_, torch::kDouble)});
  return table.index_select(0, t.to(torch::kLong).reshape({-1}));
}

torch::Tensor forward_noise(const DiffusionSchedule& schedule, const torch::Tensor& z0,
                            const torch::Tensor& t, const torch::Tensor& eps) {
  if (z0.sizes() != eps.sizes()) throw ShapeMismatch("forward_noise: eps shape differs from z0");
  auto ab = schedule.alpha_bar(t).to(z0.dtype());
  std::vector<std::int64_t> shape(static_cast<std::size_t>(z0.dim()), 1);
  if (t.dim() > 0 && t.numel() > 1) shape[0] = z0.size(0);
  ab = ab.view(shape);
  return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

double min_snr_weight(double snr, double gamma) { return std::min(snr, gamma) / snr; }

AdaLayerNormImpl::AdaLayerNormImpl(int d_model, int t_dim) : d_model_(d_model) {
  mod_ = register_module("mod", torch::nn::Linear(t_dim, 2 * d_model));
}

torch::Tensor AdaLayerNormImpl::forward(const torch::Tensor& x, const torch::Tensor& t_emb) {
  auto chunks = mod_(t_emb).unsqueeze(1).chunk(2, -1);
  auto normed = torch::layer_norm(x, {d_model_});
  return normed * (1.0 + chunks[0]) + chunks[1];
}

DenoiserBlockImpl::DenoiserBlockImpl(const DenoiserConfig& c) {
  norm1_ = register_module("norm1", AdaLayerNorm(c.d_model, c.t_dim));
  self_attn_ = register_module("self_attn", MultiHeadAttention(c.d_model, c.n_heads));
  norm2_ = register_module("norm2", AdaLayerNorm(c.d_model, c.t_dim));
  cross_attn_ = register_module("cross_attn", MultiHeadAttention(c.d_model, c.n_heads, c.d_c));
  norm3_ = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c.d_model})));
  ffn_ = register_module("ffn", FeedForward(c.d_model, c.ffn));
}

torch::Tensor DenoiserBlockImpl::forward(const torch::Tensor& h, const torch::Tensor& t_emb,
                                         const torch::Tensor& cond) {
  auto x = norm1_->forward(h, t_emb);
  auto y = h + self_attn_->forward(x, x);
  y = y + cross_attn_->forward(norm2_->forward(y, t_emb), cond);
  return y + ffn_->forward(norm3_(y));
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kDouble) / half);
  auto args = t.to(torch::kDouble).reshape({-1, 1}) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, -1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, torch::kDouble)}, -1);
  return emb;
}

DenoiserImpl::DenoiserImpl(DenoiserConfig config) : config_(config) {
  const int D = config_.d_model;
  in_proj_ = register_module("in_proj", torch::nn::Linear(config_.d, D));
  pos_ = register_parameter("pos", torch::randn({config_.m, D}) * 0.02);
  t_mlp_ = register_module("t_mlp", torch::nn::Sequential(torch::nn::Linear(config_.t_dim, config_.t_dim),
                                                          torch::nn::SiLU(),
                                                          torch::nn::Linear(config_.t_dim, config_.t_dim)));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < config_.n_blocks; ++i) blocks_->push_back(DenoiserBlock(config_));
  final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({D})));
  head_ = register_module("head", torch::nn::Linear(D, config_.d));
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t,
                                    const torch::Tensor& c) {
  if (z_t.dim() != 3 || z_t.size(1) != config_.m || z_t.size(2) != config_.d) {
    throw ShapeMismatch("denoiser expects latents of shape [B, m, d]");
  }
  if (c.dim() != 2 || c.size(0) != z_t.size(0) || c.size(1) != config_.d_c) {
    throw ShapeMismatch("denoiser expects a condition of shape [B, d_c]");
  }
  auto t_emb = t_mlp_->forward(timestep_embedding(t, config_.t_dim).to(z_t.dtype()));
  auto h = in_proj_(z_t) + pos_.unsqueeze(0);
  auto cond = c.unsqueeze(1);
  for (const auto& block : *blocks_) h = block->as<DenoiserBlock>()->forward(h, t_emb, cond);
  return head_(final_norm_(h));
}

LatentScaler LatentScaler::fit(const torch::Tensor& latents) {
  LatentScaler s;
  s.mean = latents.mean(0);
  s.std = latents.size(0) > 1 ? latents.std(0, /*unbiased=*/false).clamp_min(1e-6)
                              : torch::ones_like(s.mean);
  return s;
}

torch::Tensor LatentScaler::standardize(const torch::Tensor& z) const { return (z - mean) / std; }
torch::Tensor LatentScaler::destandardize(const torch::Tensor& z) const { return z * std + mean; }

torch::Tensor ldm_loss(Denoiser& denoiser, const DiffusionSchedule& schedule,
                       const torch::Tensor& z0, const torch::Tensor& c, double gamma_snr,
                       const torch::Tensor& t_in, const torch::Tensor& eps_in) {
  const auto B = z0.size(0);
  auto t = t_in.defined() ? t_in : torch::randint(1, schedule.steps() + 1, {B}, torch::kLong);
  auto eps = eps_in.defined() ? eps_in : torch::randn_like(z0);
  auto z_t = forward_noise(schedule, z0, t, eps);
  auto ab = schedule.alpha_bar(t);
  auto snr = ab / (1.0 - ab);
  auto w = (snr.clamp_max(gamma_snr) / snr).to(z0.dtype());
  auto err = (eps - denoiser->forward(z_t, t, c)).pow(2).reshape({B, -1}).mean(1);
  return (w * err).mean();
}

LdmTrainResult train_ldm(Denoiser& denoiser, TableCondition& condition,
                         const DiffusionSchedule& schedule, const torch::Tensor& latents,
                         const std::vector<FeatureGraph>& graphs, const LdmTrainOptions& options) {
  const auto N = latents.size(0);
  if (N == 0 || static_cast<std::int64_t>(graphs.size()) != N) {
    throw std::invalid_argument("train_ldm: one graph per latent required");
  }
  torch::manual_seed(options.seed);
  std::mt19937_64 rng(options.seed);
  auto params = denoiser->parameters();
  for (auto& p : condition->parameters()) params.push_back(p);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(options.learning_rate));

  LdmTrainResult result;
  std::vector<std::int64_t> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::int64_t>(std::max(1, options.batch_size));
  denoiser->train();
  condition->train();
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::int64_t lo = 0; lo < N; lo += bs) {
      const auto hi = std::min(N, lo + bs);
      std::vector<std::int64_t> ids(order.begin() + lo, order.begin() + hi);
      std::vector<FeatureGraph> batch_graphs_list;
      for (auto i : ids) batch_graphs_list.push_back(graphs[static_cast<std::size_t>(i)]);
      auto z0 = latents.index_select(0, torch::tensor(ids, torch::kLong));
      auto c = condition->forward(batch_graphs(batch_graphs_list, z0.scalar_type())).c;
      auto loss = ldm_loss(denoiser, schedule, z0, c, options.gamma_snr);
      opt.zero_grad();
      loss.backward();
      opt.step();
      const double v = loss.item<double>();
      if (!std::isfinite(v)) {
        throw DivergenceDetected("diffusion loss became non-finite at epoch " + std::to_string(epoch));
      }
      sum += v * static_cast<double>(hi - lo);
    }
    result.epoch_loss.push_back(sum / static_cast<double>(N));
    if (options.on_epoch) options.on_epoch(epoch, result.epoch_loss.back());
  }
  denoiser->eval();
  condition->eval();
  return result;
}

}  // namespace difft
