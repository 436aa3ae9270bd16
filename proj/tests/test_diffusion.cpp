#include <numeric>
#include <cmath>

#include "testing.hpp"
#include "difft/diffusion.hpp"
#include "gradcheck.hpp"

using namespace difft;

namespace {

DenoiserConfig toy(int blocks = 1) {
  DenoiserConfig c;
  c.n_blocks = blocks;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn = 32;
  c.d_c = 8;
  c.t_dim = 16;
  c.m = 3;
  c.d = 4;
  return c;
}

}  // namespace

TEST_CASE("schedule products") {
  const auto s = DiffusionSchedule::from_betas({0.1, 0.2});
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.72));

  const auto lin = DiffusionSchedule::linear();
  CHECK(lin.steps() == 1000);
  CHECK(lin.beta(1) == doctest::Approx(1e-4));
  CHECK(lin.beta(1000) == doctest::Approx(0.02));
  for (int t = 1; t < 1000; ++t) {
    CHECK(lin.beta(t) <= lin.beta(t + 1));
    CHECK(lin.alpha_bar(t + 1) < lin.alpha_bar(t));
  }
  CHECK(lin.alpha_bar(1000) < 0.01);
  CHECK_THROWS(DiffusionSchedule::from_betas({0.5, 1.0}));
}

TEST_CASE("forward noise") {
  const auto s = DiffusionSchedule::linear();
  torch::manual_seed(1);
  auto z0 = torch::randn({4, 3, 4}, torch::kDouble);
  auto eps = torch::randn({4, 3, 4}, torch::kDouble);
  auto z1 = forward_noise(s, z0, torch::ones({4}, torch::kLong), eps);
  CHECK((z1 - z0).norm().item<double>() <=
        std::sqrt(s.beta(1)) * (z0.norm().item<double>() + eps.norm().item<double>()));
  CHECK_THROWS_AS(forward_noise(s, z0, torch::ones({4}, torch::kLong), torch::randn({4, 3})), ShapeMismatch);

  // Monte-Carlo moments of one entry at t = 300.
  const int t = 300;
  const double ab = s.alpha_bar(t);
  const double x0 = 1.7;
  const int n = 10000;
  auto draws = forward_noise(s, torch::full({n, 1}, x0, torch::kDouble),
                             torch::full({n}, t, torch::kLong), torch::randn({n, 1}, torch::kDouble));
  const double mean = draws.mean().item<double>();
  const double var = draws.var().item<double>();
  const double sd = std::sqrt(1.0 - ab);
  CHECK(std::abs(mean - std::sqrt(ab) * x0) < 3.0 * sd / std::sqrt(n));
  // Var(sample variance) = 2 sigma^4 / (n - 1) for Gaussian draws.
  CHECK(std::abs(var - (1.0 - ab)) < 3.0 * std::sqrt(2.0 / (n - 1)) * (1.0 - ab));

  // With random z0 of variance v: Var(z_t) = ab v + (1 - ab).
  const double v = 4.0;
  auto spread = forward_noise(s, 2.0 * torch::randn({n, 1}, torch::kDouble), torch::full({n}, t, torch::kLong),
                              torch::randn({n, 1}, torch::kDouble));
  const double target = ab * v + (1.0 - ab);
  CHECK(std::abs(spread.var().item<double>() - target) < 3.0 * std::sqrt(2.0 / (n - 1)) * target);
}

TEST_CASE("min-snr weights") {
  CHECK(min_snr_weight(5.0, 5.0) == 1.0);
  CHECK(min_snr_weight(10.0, 5.0) == 0.5);
  CHECK(min_snr_weight(0.3, 5.0) == 1.0);
  const auto s = DiffusionSchedule::linear();
  for (int t = 1; t <= 1000; ++t) {
    const double w = min_snr_weight(s.snr(t), 5.0);
    CHECK(w > 0.0);
    CHECK(w <= 1.0);
    if (s.snr(t) <= 5.0) CHECK(w == 1.0);
  }
}

TEST_CASE("denoiser shapes and positional sensitivity") {
  torch::manual_seed(2);
  Denoiser net(toy(2));
  auto z = torch::randn({5, 3, 4});
  auto t = torch::randint(1, 1001, {5}, torch::kLong);
  auto c = torch::randn({5, 8});
  auto out = net->forward(z, t, c);
  CHECK(out.sizes() == z.sizes());
  CHECK_THROWS_AS(net->forward(torch::randn({5, 4, 4}), t, c), ShapeMismatch);
  CHECK_THROWS_AS(net->forward(z, t, torch::randn({5, 7})), ShapeMismatch);

  auto perm = torch::tensor({2, 0, 1}, torch::kLong);
  auto permuted = net->forward(z.index_select(1, perm), t, c);
  CHECK_FALSE(torch::allclose(permuted, out.index_select(1, perm)));
}

TEST_CASE("denoiser loss gradient matches finite differences") {
  torch::manual_seed(3);
  Denoiser net(toy(1));
  net->to(torch::kDouble);
  const auto s = DiffusionSchedule::linear();
  auto z0 = torch::randn({4, 3, 4}, torch::kDouble);
  auto c = torch::randn({4, 8}, torch::kDouble);
  auto t = torch::tensor({1, 250, 600, 1000}, torch::kLong);
  auto eps = torch::randn({4, 3, 4}, torch::kDouble);
  auto loss = [&] { return ldm_loss(net, s, z0, c, 5.0, t, eps); };
  CHECK(gradcheck::parameter_error(*net, loss, 60, 4) < 1e-3);
}

TEST_CASE("training on 32 latents halves the loss and is reproducible") {
  const auto s = DiffusionSchedule::linear();
  torch::manual_seed(5);
  auto latents = torch::randn({32, 3, 4}) * 0.3 + torch::linspace(-1, 1, 12).view({1, 3, 4});
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<FeatureGraph> graphs;
  for (int i = 0; i < 32; ++i) {
    Table t(20, 1 + i % 3);
    for (std::size_t j = 0; j < t.cols(); ++j) {
      for (std::size_t r = 0; r < t.rows(); ++r) t(r, j) = normal(rng);
    }
    graphs.push_back(build_graph(t));
  }

  auto run = [&] {
    torch::manual_seed(7);
    Denoiser net(toy(2));
    ConditionConfig cc;
    cc.hidden = 8;
    cc.d_g = 8;
    cc.d_c = 8;
    TableCondition cond(cc);
    LdmTrainOptions opts;
    opts.epochs = 150;
    opts.batch_size = 32;
    opts.seed = 8;
    auto res = train_ldm(net, cond, s, latents, graphs, opts);

    // Conditioning is live: different c, different prediction.
    torch::NoGradGuard no_grad;
    auto z = torch::randn({1, 3, 4});
    auto t = torch::full({1}, 500, torch::kLong);
    auto a = net->forward(z, t, torch::randn({1, 8}));
    auto b = net->forward(z, t, torch::randn({1, 8}));
    CHECK((a - b).norm().item<double>() > 0.0);
    return res.epoch_loss;
  };
  const auto first = run();
  const auto second = run();
  CHECK(first == second);
  auto mean = [&](std::size_t lo, std::size_t hi) {
    return std::accumulate(first.begin() + static_cast<std::ptrdiff_t>(lo),
                           first.begin() + static_cast<std::ptrdiff_t>(hi), 0.0) / static_cast<double>(hi - lo);
  };
  CHECK(mean(140, 150) < 0.5 * mean(0, 10));
}

TEST_CASE("latent scaler round trip") {
  torch::manual_seed(9);
  auto z = torch::randn({50, 3, 4}) * 5 + 2;
  const auto sc = LatentScaler::fit(z);
  auto s = sc.standardize(z);
  CHECK(s.mean(0).abs().max().item<double>() < 1e-5);
  CHECK((s.std(0, false) - 1).abs().max().item<double>() < 1e-4);
  CHECK(torch::allclose(sc.destandardize(s), z, 1e-5, 1e-5));
}
