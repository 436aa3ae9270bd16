#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "difft/diffusion.hpp"
#include "difft/expr.hpp"

namespace difft {

/// eps_theta(z_t, t) with the condition already bound.
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z_t, int t)>;
/// Differentiable reward per sample, [B, m, d] -> [B].
using RewardFn = std::function<torch::Tensor(const torch::Tensor& z)>;

struct SamplerConfig {
  int n_steps = 50;
  double lambda = 100.0;
  double a = 1.0;
  double eta = 0.0;
  /// Cap on the per-sample RMS of the guidance term added to the predicted
  /// noise; 0 disables the cap.
  double guidance_clip = 1.0;
  std::uint64_t seed = 0;
};

/// d/dz of 0.5 (R(z) - a)^2 for each sample, by backpropagation through R.
torch::Tensor guidance_gradient(const torch::Tensor& z, double a, const RewardFn& reward);

/// Descending, uniformly spaced timesteps in [1, T]; the step after the last
/// one lands on t = 0.
std::vector<int> ddim_timesteps(int T, int n_steps);

/// One DDIM update from t to t_prev on the cumulative alpha_bar schedule.
/// The predicted noise is shifted toward the target reward by
/// lambda * guidance_gradient (skipped when lambda == 0). `noise` is used only
/// when eta > 0.
torch::Tensor ddim_step(const torch::Tensor& z_t, int t, int t_prev, const NoisePredictor& eps,
                        const RewardFn& reward, const DiffusionSchedule& schedule,
                        const SamplerConfig& config, const torch::Tensor& noise = {});

/// Full reverse process from z_T. Noise for eta > 0 comes from a generator
/// seeded with config.seed.
torch::Tensor sample_latents(const torch::Tensor& z_T, const NoisePredictor& eps,
                             const RewardFn& reward, const DiffusionSchedule& schedule,
                             const SamplerConfig& config);

struct SearchResult {
  torch::Tensor z;                      // best latent found
  std::vector<double> accepted_reward;  // reward after each accepted step
};

/// Gradient ascent on the reward from z0 with a backtracking line search:
/// a step is kept only if it does not lower the reward.
SearchResult continuous_search(const torch::Tensor& z0, const RewardFn& reward, int n_steps,
                               double lr);

}  // namespace difft
