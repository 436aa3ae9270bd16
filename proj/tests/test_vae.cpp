#include <numeric>
#include <cmath>
#include <random>

#include "testing.hpp"
#include "difft/vae.hpp"
#include "gradcheck.hpp"

using namespace difft;

namespace {

VaeConfig tiny(int n_features, DecoderKind kind = DecoderKind::SAR) {
  VaeConfig c;
  c.n_features = n_features;
  c.d_model = 32;
  c.n_layers = 1;
  c.decoder_layers = 1;
  c.n_heads = 2;
  c.ffn = 64;
  c.m = 2;
  c.d = 4;
  c.T_max = 6;
  c.L_max = 7;
  c.head_hidden = 32;
  c.decoder = kind;
  return c;
}

std::vector<FeatureSet> random_sets(std::mt19937_64& rng, int n, int count, int T, int L) {
  std::vector<FeatureSet> sets;
  for (int i = 0; i < count; ++i) sets.push_back(random_feature_set(rng, n, T, L));
  return sets;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  const Vocab v(5);
  CHECK(v.size() == 19);
  CHECK(v.encode(Token::op_ref(OpId::Add)) == 4);
  CHECK(v.encode(Token::feature_ref(1)) == 14);
  CHECK(v.decode(18) == Token::feature_ref(5));
  CHECK_THROWS_AS(v.encode(Token::feature_ref(6)), UnknownToken);
  CHECK(v.encode_flat(parse("f1 f2 +, f3", 5)) == std::vector<std::int64_t>{14, 15, 4, 3, 16});
  for (std::int64_t id = 0; id < v.size(); ++id) CHECK(v.encode(v.decode(id)) == id);
}

TEST_CASE("kl loss closed form") {
  CHECK(kl_loss(torch::zeros({1, 1}), torch::zeros({1, 1})).item<double>() == 0.0);
  CHECK(kl_loss(torch::ones({1, 1}), torch::zeros({1, 1})).item<double>() == doctest::Approx(0.5));

  torch::manual_seed(0);
  auto mu = torch::randn({2000, 8}, torch::kDouble) * 3;
  auto logvar = torch::randn({2000, 8}, torch::kDouble) * 2;
  auto per_row = 0.5 * (mu.pow(2) + logvar.exp() - 1 - logvar);
  CHECK(per_row.min().item<double>() >= 0.0);
  CHECK(kl_loss(mu, logvar).item<double>() == doctest::Approx(per_row.sum(1).mean().item<double>()));
}

TEST_CASE("kl loss agrees with a Monte-Carlo estimate") {
  torch::manual_seed(1);
  for (double m : {1.0, -0.4}) {
    for (double lv : {0.0, -0.7, 0.5}) {
      auto x = m + std::exp(0.5 * lv) * torch::randn({1000000}, torch::kDouble);
      auto log_q = -0.5 * ((x - m).pow(2) / std::exp(lv) + lv);
      auto log_p = -0.5 * x.pow(2);
      const double mc = (log_q - log_p).mean().item<double>();
      const double exact = kl_loss(torch::full({1, 1}, m, torch::kDouble),
                                   torch::full({1, 1}, lv, torch::kDouble)).item<double>();
      CHECK(std::abs(mc - exact) < 1e-2);
    }
  }
}

TEST_CASE("batch tensors follow the token layout") {
  const auto cfg = tiny(3);
  const std::vector<FeatureSet> sets = {parse("f1 f2 +, f3", 3), parse("f2 log", 3)};
  const std::vector<double> y = {0.25, 0.75};
  const auto b = make_batch(sets, y, cfg);
  CHECK(b.flat.sizes() == torch::IntArrayRef({2, 5}));
  CHECK(b.counts[0].item<int64_t>() == 1);
  CHECK(b.chunk_inputs.size(0) == 3);
  CHECK(b.chunk_inputs[0][0].item<int64_t>() == Vocab::kBos);
  CHECK(b.chunk_targets[0][3].item<int64_t>() == Vocab::kEos);
  CHECK(b.chunk_targets[1][1].item<int64_t>() == Vocab::kEos);
  CHECK(b.ar_targets[1][2].item<int64_t>() == Vocab::kEos);
  CHECK(b.nar_targets[1][1][0].item<int64_t>() == Vocab::kPad);

  CHECK_THROWS_AS(make_batch(std::vector<FeatureSet>{parse("f1, f1, f1, f1, f1, f1, f1", 3)},
                             std::vector<double>{0.0}, cfg),
                  SequenceTooLong);
  CHECK_THROWS_AS(make_batch(std::vector<FeatureSet>{parse("f1 log log log log log log log", 3)},
                             std::vector<double>{0.0}, cfg),
                  SequenceTooLong);
}

TEST_CASE("encoder is deterministic with the right shapes") {
  torch::manual_seed(2);
  Vae vae(tiny(4));
  std::mt19937_64 rng(3);
  const auto sets = random_sets(rng, 4, 5, 6, 7);
  const auto b = make_batch(sets, {}, vae->config());
  auto [mu, logvar] = vae->encode(b);
  CHECK(mu.sizes() == torch::IntArrayRef({5, 2, 4}));
  CHECK(logvar.sizes() == torch::IntArrayRef({5, 2, 4}));
  auto [mu2, logvar2] = vae->encode(b);
  CHECK(torch::equal(mu, mu2));
  CHECK(torch::equal(logvar, logvar2));
  CHECK(torch::isfinite(mu).all().item<bool>());
}

TEST_CASE("count loss of uniform logits is log of the class count") {
  auto logits = torch::zeros({3, 16});
  auto ce = torch::nn::functional::cross_entropy(logits, torch::tensor({0, 5, 15}, torch::kLong));
  CHECK(ce.item<double>() == doctest::Approx(std::log(16.0)));
}

TEST_CASE("loss weights combine linearly") {
  torch::manual_seed(4);
  auto cfg = tiny(4);
  std::mt19937_64 rng(5);
  const auto sets = random_sets(rng, 4, 6, 6, 7);
  const std::vector<double> y = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const auto b = make_batch(sets, y, cfg);

  cfg.alpha = cfg.beta = cfg.gamma = 0.0;
  Vae vae(cfg);
  auto l = vae->losses(b, 1.0, false);
  CHECK(l.total.item<double>() == l.rec.item<double>());
  CHECK(l.rec.item<double>() >= 0.0);
  CHECK(l.kl.item<double>() >= 0.0);

  auto with_gamma = [&](double g) {
    auto c = cfg;
    c.gamma = g;
    torch::manual_seed(4);
    Vae v(c);
    return v->losses(b, 1.0, false);
  };
  const auto one = with_gamma(1.0), two = with_gamma(2.0);
  const double kl1 = one.total.item<double>() - one.rec.item<double>();
  const double kl2 = two.total.item<double>() - two.rec.item<double>();
  CHECK(kl2 == doctest::Approx(2.0 * kl1).epsilon(1e-5));
}

TEST_CASE("chunk logits ignore other chunks' teacher tokens") {
  torch::manual_seed(6);
  Vae vae(tiny(5));
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::int64_t> tok(0, vae->config().vocab_size() - 1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto sets = random_sets(rng, 5, 3, 6, 7);
    auto b = make_batch(sets, {}, vae->config());
    const auto R = b.chunk_inputs.size(0);
    if (R < 2) continue;
    auto z = torch::randn({3, 2, 4});
    auto before = vae->chunk_logits(z, b);
    std::uniform_int_distribution<std::int64_t> pick(0, R - 1);
    const auto j = pick(rng);
    for (std::int64_t k = 1; k < b.chunk_inputs.size(1); ++k) b.chunk_inputs[j][k] = tok(rng);
    auto after = vae->chunk_logits(z, b);
    for (std::int64_t i = 0; i < R; ++i) {
      if (i == j) continue;
      CHECK(torch::equal(before[i], after[i]));
    }
  }
}

TEST_CASE("count logits depend on z only") {
  torch::manual_seed(8);
  Vae vae(tiny(3));
  auto z = torch::randn({2, 2, 4});
  auto a = vae->count_logits(z);
  (void)make_batch(std::vector<FeatureSet>{parse("f1", 3), parse("f2 f3 *", 3)}, {}, vae->config());
  CHECK(torch::equal(a, vae->count_logits(z)));
}

TEST_CASE("evaluator loss gradient matches finite differences") {
  torch::manual_seed(9);
  Vae vae(tiny(3));
  vae->to(torch::kDouble);
  auto z = torch::randn({1, 2, 4}, torch::kDouble);
  const double target = 0.3;
  auto f = [&](const torch::Tensor& x) { return (vae->evaluate(x) - target).pow(2).sum(); };
  CHECK(gradcheck::input_error(z, f) < 1e-4);

  auto pred = vae->evaluate(z).item<double>();
  CHECK(std::pow(pred - target, 2) == doctest::Approx(std::pow(target - pred, 2)));
}

TEST_CASE("total loss gradient matches finite differences for every decoder") {
  for (auto kind : {DecoderKind::SAR, DecoderKind::AR, DecoderKind::NAR}) {
    torch::manual_seed(10);
    Vae vae(tiny(4, kind));
    vae->to(torch::kDouble);
    std::mt19937_64 rng(11);
    const auto sets = random_sets(rng, 4, 3, 6, 7);
    const auto b = make_batch(sets, std::vector<double>{0.2, 0.5, 0.9}, vae->config());
    auto loss = [&] { return vae->losses(b, 1.0, false).total; };
    CHECK_MESSAGE(gradcheck::parameter_error(*vae, loss, 40, 12) < 1e-3, to_string(kind));
  }
}

TEST_CASE("repair keeps valid prefixes") {
  const auto f = Token::feature_ref;
  const auto op = Token::op_ref;
  const auto fs = repair({{f(1), f(2), op(OpId::Add)}, {f(2), f(3)}, {op(OpId::Log)}});
  CHECK(serialize(fs) == "f1 f2 +, f2, f1");
  CHECK(serialize(repair({})) == "f1");
}

TEST_CASE("overfitting one record reconstructs it exactly") {
  const auto target = parse("f1 f2 *, f3 log, f4 f2 + sqrt, f1", 4);
  const std::vector<TrainingRecord> records = {{target, 0.7, 0.7}};
  for (auto kind : {DecoderKind::SAR, DecoderKind::AR, DecoderKind::NAR}) {
    torch::manual_seed(12);
    Vae vae(tiny(4, kind));
    VaeTrainOptions opts;
    opts.epochs = 300;
    opts.learning_rate = 3e-3;
    opts.seed = 1;
    const auto result = train_vae(vae, records, opts);
    CHECK(result.reconstruction.exact_sets == 1.0);

    const auto b = make_batch(std::vector<FeatureSet>{target}, std::vector<double>{0.7}, vae->config());
    const double tokens = static_cast<double>(target.total_tokens() + target.count());
    CHECK_MESSAGE(vae->losses(b, 1.0, false).total.item<double>() / tokens < 0.01, to_string(kind));

    // Loss curve: 50-epoch window means decrease strictly.
    const auto& c = result.epoch_loss;
    auto window = [&](std::size_t end) {
      return std::accumulate(c.begin() + static_cast<std::ptrdiff_t>(end - 50),
                             c.begin() + static_cast<std::ptrdiff_t>(end), 0.0) / 50.0;
    };
    for (std::size_t e = 100; e <= c.size(); e += 50) CHECK(window(e) < window(e - 50));

    DecodeStats stats;
    auto [mu, logvar] = vae->encode(b);
    const auto decoded = vae->decode(mu, DecodeMode::Greedy, nullptr, &stats);
    CHECK(decoded.front() == target);
    if (kind == DecoderKind::SAR) CHECK(stats.passes == 5);   // longest chunk 4 tokens + terminator
    if (kind == DecoderKind::AR) CHECK(stats.passes == 14);   // 10 tokens, 3 separators, terminator
    if (kind == DecoderKind::NAR) CHECK(stats.passes == 1);
  }
}

TEST_CASE("forced decode pass counts") {
  torch::manual_seed(13);
  auto cfg = tiny(3);
  Vae sar(cfg);
  auto z = torch::randn({1, 2, 4});
  CHECK(sar->decode_forced(z, 2, 5).passes == 5);
  CHECK(sar->decode_forced(z, 6, 5).passes == 5);
  CHECK(sar->decode_forced(z, 6, 5).tokens == 30);

  cfg.decoder = DecoderKind::AR;
  Vae ar(cfg);
  CHECK(ar->decode_forced(z, 6, 5).passes == 30);

  cfg.decoder = DecoderKind::NAR;
  Vae nar(cfg);
  CHECK(nar->decode_forced(z, 6, 5).passes == 1);
}

TEST_CASE("sampled decodes are always valid") {
  torch::manual_seed(14);
  for (auto kind : {DecoderKind::SAR, DecoderKind::AR, DecoderKind::NAR}) {
    Vae vae(tiny(5, kind));
    std::mt19937_64 rng(15);
    auto z = torch::randn({20, 2, 4}) * 3;
    for (auto mode : {DecodeMode::Greedy, DecodeMode::Sample}) {
      for (const auto& fs : vae->decode(z, mode, &rng)) {
        CHECK(parse(serialize(fs), 5) == fs);
        CHECK(fs.count() <= 6);
        CHECK(fs.max_chunk_length() <= 7);
      }
    }
  }
}
