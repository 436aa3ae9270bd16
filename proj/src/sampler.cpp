#include "difft/sampler.hpp"

#include <cmath>
#include <stdexcept>

namespace difft {

torch::Tensor guidance_gradient(const torch::Tensor& z, double a, const RewardFn& reward) {
  torch::AutoGradMode enable(true);
  auto x = z.detach().clone().set_requires_grad(true);
  auto objective = 0.5 * (reward(x) - a).pow(2).sum();
  return torch::autograd::grad({objective}, {x})[0].detach();
}

std::vector<int> ddim_timesteps(int T, int n_steps) {
  if (n_steps < 1 || n_steps > T) throw std::invalid_argument("ddim_timesteps: need 1 <= n_steps <= T");
  std::vector<int> ts;
  const int stride = T / n_steps;
  for (int i = n_steps; i >= 1; --i) ts.push_back(i * stride);
  return ts;
}

torch::Tensor ddim_step(const torch::Tensor& z_t, int t, int t_prev, const NoisePredictor& eps,
                        const RewardFn& reward, const DiffusionSchedule& schedule,
                        const SamplerConfig& config, const torch::Tensor& noise) {
  if (t <= t_prev) throw std::invalid_argument("ddim_step: t must exceed t_prev");
  torch::Tensor e;
  {
    torch::NoGradGuard no_grad;
    e = eps(z_t, t);
  }
  if (config.lambda != 0.0) {
    auto g = config.lambda * guidance_gradient(z_t, config.a, reward);
    if (config.guidance_clip > 0.0) {
      auto rms = g.pow(2).reshape({g.size(0), -1}).mean(1).sqrt();
      auto scale = (config.guidance_clip / rms.clamp_min(1e-12)).clamp_max(1.0);
      std::vector<std::int64_t> shape(static_cast<std::size_t>(g.dim()), 1);
      shape[0] = g.size(0);
      g = g * scale.view(shape);
    }
    e = e + g;
  }
  torch::NoGradGuard no_grad;
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  auto x0 = (z_t - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
  const double sigma =
      config.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  auto out = std::sqrt(ab_prev) * x0 + std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)) * e;
  if (sigma > 0.0) {
    if (!noise.defined()) throw std::invalid_argument("ddim_step: eta > 0 needs a noise tensor");
    out = out + sigma * noise;
  }
  return out;
}

torch::Tensor sample_latents(const torch::Tensor& z_T, const NoisePredictor& eps,
                             const RewardFn& reward, const DiffusionSchedule& schedule,
                             const SamplerConfig& config) {
  if (config.lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
  if (config.eta < 0.0 || config.eta > 1.0) throw std::invalid_argument("eta must lie in [0, 1]");
  const auto ts = ddim_timesteps(schedule.steps(), config.n_steps);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed);
  auto z = z_T;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    torch::Tensor noise;
    if (config.eta > 0.0) noise = at::randn(z.sizes(), gen, z.scalar_type());
    z = ddim_step(z, t, t_prev, eps, reward, schedule, config, noise);
  }
  return z;
}

SearchResult continuous_search(const torch::Tensor& z0, const RewardFn& reward, int n_steps,
                               double lr) {
  SearchResult result;
  auto z = z0.detach().clone();
  auto value = [&](const torch::Tensor& x) {
    torch::NoGradGuard no_grad;
    return reward(x).sum().item<double>();
  };
  double best = value(z);
  for (int step = 0; step < n_steps && lr > 0.0; ++step) {
    torch::Tensor grad;
    {
      torch::AutoGradMode enable(true);
      auto x = z.clone().set_requires_grad(true);
      grad = torch::autograd::grad({reward(x).sum()}, {x})[0].detach();
    }
    double step_size = lr;
    bool accepted = false;
    for (int tries = 0; tries < 20; ++tries, step_size *= 0.5) {
      auto candidate = z + step_size * grad;
      const double v = value(candidate);
      if (v >= best) {
        z = candidate;
        best = v;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    result.accepted_reward.push_back(best);
  }
  result.z = z;
  return result;
}

}  // namespace difft
