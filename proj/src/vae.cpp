#include "difft/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace difft {

namespace {

using torch::indexing::Slice;

torch::Tensor ids_tensor(const std::vector<std::int64_t>& data, std::vector<std::int64_t> shape) {
  return torch::tensor(data, torch::kLong).view(shape);
}

/// Picks a token id from one row of logits. Banned ids are never chosen;
/// greedy ties go to the lowest id.
std::int64_t choose(const float* logits, std::int64_t V, const std::vector<bool>& banned,
                    DecodeMode mode, std::mt19937_64* rng) {
  if (mode == DecodeMode::Greedy || rng == nullptr) {
    std::int64_t best = -1;
    for (std::int64_t v = 0; v < V; ++v) {
      if (banned[static_cast<std::size_t>(v)]) continue;
      if (best < 0 || logits[v] > logits[best]) best = v;
    }
    return best;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t v = 0; v < V; ++v) {
    if (!banned[static_cast<std::size_t>(v)]) mx = std::max(mx, static_cast<double>(logits[v]));
  }
  std::vector<double> p(static_cast<std::size_t>(V), 0.0);
  double total = 0.0;
  for (std::int64_t v = 0; v < V; ++v) {
    if (banned[static_cast<std::size_t>(v)]) continue;
    p[static_cast<std::size_t>(v)] = std::exp(logits[v] - mx);
    total += p[static_cast<std::size_t>(v)];
  }
  std::uniform_real_distribution<double> u(0.0, total);
  double r = u(*rng);
  std::int64_t last = -1;
  for (std::int64_t v = 0; v < V; ++v) {
    if (banned[static_cast<std::size_t>(v)]) continue;
    last = v;
    r -= p[static_cast<std::size_t>(v)];
    if (r < 0.0) return v;
  }
  return last;
}

std::vector<bool> ban(std::int64_t V, std::initializer_list<std::int64_t> ids) {
  std::vector<bool> banned(static_cast<std::size_t>(V), false);
  for (auto id : ids) banned[static_cast<std::size_t>(id)] = true;
  return banned;
}

std::vector<Token> to_tokens(const Vocab& vocab, const std::vector<std::int64_t>& ids) {
  std::vector<Token> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(vocab.decode(id));
  return out;
}

}  // namespace

std::string to_string(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::SAR: return "sar";
    case DecoderKind::AR: return "ar";
    case DecoderKind::NAR: return "nar";
  }
  return "sar";
}

DecoderKind decoder_kind_from_string(const std::string& s) {
  if (s == "sar") return DecoderKind::SAR;
  if (s == "ar") return DecoderKind::AR;
  if (s == "nar") return DecoderKind::NAR;
  throw std::invalid_argument("unknown decoder kind: " + s);
}

void VaeConfig::validate() const {
  if (n_features < 1 || d_model < 1 || n_layers < 1 || decoder_layers < 1 || n_heads < 1 ||
      ffn < 1 || m < 1 || d < 1 || T_max < 1 || L_max < 1 || head_hidden < 1) {
    throw std::invalid_argument("VaeConfig: sizes must be positive");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("VaeConfig: d_model % n_heads != 0");
  if (alpha < 0 || beta < 0 || gamma < 0) throw std::invalid_argument("VaeConfig: negative weight");
}

VaeBatch make_batch(std::span<const FeatureSet> sets, std::span<const double> y,
                    const VaeConfig& config) {
  if (sets.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (!y.empty() && y.size() != sets.size()) throw std::invalid_argument("make_batch: y size");
  const Vocab vocab(config.n_features);
  const auto B = static_cast<std::int64_t>(sets.size());
  const std::int64_t L = config.L_max + 1;
  const std::int64_t T_max = config.T_max;

  std::vector<std::vector<std::int64_t>> flats;
  std::int64_t S = 1;
  for (const auto& fs : sets) {
    if (fs.count() == 0 || static_cast<int>(fs.count()) > config.T_max) {
      throw SequenceTooLong("feature set has " + std::to_string(fs.count()) + " chunks, limit " +
                            std::to_string(config.T_max));
    }
    if (static_cast<int>(fs.max_chunk_length()) > config.L_max) {
      throw SequenceTooLong("chunk of length " + std::to_string(fs.max_chunk_length()) +
                            " exceeds limit " + std::to_string(config.L_max));
    }
    flats.push_back(vocab.encode_flat(fs));
    S = std::max<std::int64_t>(S, static_cast<std::int64_t>(flats.back().size()));
  }
  if (config.decoder == DecoderKind::AR && S + 1 > config.ar_length()) {
    throw SequenceTooLong("flat sequence exceeds the autoregressive decoder length");
  }

  std::vector<std::int64_t> flat(static_cast<std::size_t>(B * S), Vocab::kPad);
  std::vector<std::int64_t> ar_in(static_cast<std::size_t>(B * (S + 1)), Vocab::kPad);
  std::vector<std::int64_t> ar_out(static_cast<std::size_t>(B * (S + 1)), Vocab::kPad);
  std::vector<std::int64_t> counts;
  std::vector<std::int64_t> chunk_in, chunk_out, chunk_index, chunk_owner;
  std::vector<std::int64_t> nar(static_cast<std::size_t>(B * T_max * L), Vocab::kPad);

  for (std::int64_t b = 0; b < B; ++b) {
    const auto& ids = flats[static_cast<std::size_t>(b)];
    const auto n = static_cast<std::int64_t>(ids.size());
    for (std::int64_t i = 0; i < n; ++i) {
      flat[static_cast<std::size_t>(b * S + i)] = ids[static_cast<std::size_t>(i)];
      ar_in[static_cast<std::size_t>(b * (S + 1) + i + 1)] = ids[static_cast<std::size_t>(i)];
      ar_out[static_cast<std::size_t>(b * (S + 1) + i)] = ids[static_cast<std::size_t>(i)];
    }
    ar_in[static_cast<std::size_t>(b * (S + 1))] = Vocab::kBos;
    ar_out[static_cast<std::size_t>(b * (S + 1) + n)] = Vocab::kEos;

    const auto& fs = sets[static_cast<std::size_t>(b)];
    counts.push_back(static_cast<std::int64_t>(fs.count()) - 1);
    for (std::size_t t = 0; t < fs.count(); ++t) {
      const auto chunk = vocab.encode(fs.exprs()[t]);
      std::vector<std::int64_t> in(static_cast<std::size_t>(L), Vocab::kPad);
      std::vector<std::int64_t> out(static_cast<std::size_t>(L), Vocab::kPad);
      in[0] = Vocab::kBos;
      for (std::size_t k = 0; k < chunk.size(); ++k) {
        out[k] = chunk[k];
        if (k + 1 < in.size()) in[k + 1] = chunk[k];
      }
      out[chunk.size()] = Vocab::kEos;
      chunk_in.insert(chunk_in.end(), in.begin(), in.end());
      chunk_out.insert(chunk_out.end(), out.begin(), out.end());
      chunk_index.push_back(static_cast<std::int64_t>(t));
      chunk_owner.push_back(b);
      std::copy(out.begin(), out.end(),
                nar.begin() + static_cast<std::ptrdiff_t>((b * T_max + static_cast<std::int64_t>(t)) * L));
    }
  }

  const auto R = static_cast<std::int64_t>(chunk_index.size());
  VaeBatch batch;
  batch.flat = ids_tensor(flat, {B, S});
  batch.flat_padding = batch.flat.eq(Vocab::kPad);
  batch.counts = ids_tensor(counts, {B});
  batch.chunk_inputs = ids_tensor(chunk_in, {R, L});
  batch.chunk_targets = ids_tensor(chunk_out, {R, L});
  batch.chunk_index = ids_tensor(chunk_index, {R});
  batch.chunk_owner = ids_tensor(chunk_owner, {R});
  batch.ar_inputs = ids_tensor(ar_in, {B, S + 1});
  batch.ar_targets = ids_tensor(ar_out, {B, S + 1});
  batch.nar_targets = ids_tensor(nar, {B, T_max, L});
  std::vector<float> yv(static_cast<std::size_t>(B), 0.0f);
  for (std::size_t i = 0; i < y.size(); ++i) yv[i] = static_cast<float>(y[i]);
  batch.y = torch::tensor(yv);
  return batch;
}

torch::Tensor kl_loss(const torch::Tensor& mu, const torch::Tensor& logvar) {
  auto per = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar);
  return per.reshape({per.size(0), -1}).sum(1).mean();
}

VaeImpl::VaeImpl(VaeConfig config) : config_(config), vocab_(config.n_features) {
  config_.validate();
  const int D = config_.d_model;
  const auto V = config_.vocab_size();
  const int md = config_.latent_numel();

  enc_tok_ = register_module("enc_tok", torch::nn::Embedding(V, D));
  enc_pos_ = register_module("enc_pos", torch::nn::Embedding(config_.max_flat_len(), D));
  enc_layers_ = register_module("enc_layers", torch::nn::ModuleList());
  for (int i = 0; i < config_.n_layers; ++i) {
    enc_layers_->push_back(EncoderLayer(D, config_.n_heads, config_.ffn));
  }
  enc_norm_ = register_module("enc_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({D})));
  queries_ = register_parameter("queries", torch::randn({config_.m, D}) * 0.02);
  pool_attn_ = register_module("pool_attn", MultiHeadAttention(D, config_.n_heads));
  pool_norm_ = register_module("pool_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({D})));
  to_mu_ = register_module("to_mu", torch::nn::Linear(D, config_.d));
  to_logvar_ = register_module("to_logvar", torch::nn::Linear(D, config_.d));

  const int hh = config_.head_hidden;
  count_head_ = register_module(
      "count_head", torch::nn::Sequential(torch::nn::Linear(md, hh), torch::nn::GELU(),
                                          torch::nn::Linear(hh, config_.T_max)));
  evaluator_ = register_module(
      "evaluator", torch::nn::Sequential(torch::nn::Linear(md, hh), torch::nn::GELU(),
                                         torch::nn::Linear(hh, hh), torch::nn::GELU(),
                                         torch::nn::Linear(hh, 1)));

  z_proj_ = register_module("z_proj", torch::nn::Linear(config_.d, D));
  dec_tok_ = register_module("dec_tok", torch::nn::Embedding(V, D));
  const int positions = config_.decoder == DecoderKind::AR ? config_.ar_length() : config_.L_max + 2;
  dec_pos_ = register_module("dec_pos", torch::nn::Embedding(positions, D));
  chunk_emb_ = register_module("chunk_emb", torch::nn::Embedding(config_.T_max, D));
  dec_layers_ = register_module("dec_layers", torch::nn::ModuleList());
  const bool causal = config_.decoder != DecoderKind::NAR;
  for (int i = 0; i < config_.decoder_layers; ++i) {
    dec_layers_->push_back(DecoderLayer(D, config_.n_heads, config_.ffn, causal));
  }
  dec_norm_ = register_module("dec_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({D})));
  out_ = register_module("out", torch::nn::Linear(D, V));
}

std::pair<torch::Tensor, torch::Tensor> VaeImpl::encode(const VaeBatch& batch) {
  const auto B = batch.flat.size(0), S = batch.flat.size(1);
  if (S > config_.max_flat_len()) throw SequenceTooLong("flat sequence too long for the encoder");
  auto x = enc_tok_(batch.flat) + enc_pos_(torch::arange(S, torch::kLong)).unsqueeze(0);
  for (const auto& layer : *enc_layers_) {
    x = layer->as<EncoderLayer>()->forward(x, batch.flat_padding);
  }
  x = enc_norm_(x);
  auto q = queries_.unsqueeze(0).expand({B, config_.m, config_.d_model});
  auto h = pool_norm_(q + pool_attn_->forward(q, x, batch.flat_padding));
  return {to_mu_(h), to_logvar_(h)};
}

torch::Tensor VaeImpl::reparameterize(const torch::Tensor& mu, const torch::Tensor& logvar) {
  return mu + torch::exp(0.5 * logvar) * torch::randn_like(mu);
}

torch::Tensor VaeImpl::count_logits(const torch::Tensor& z) {
  return count_head_->forward(z.reshape({z.size(0), -1}));
}

torch::Tensor VaeImpl::evaluate(const torch::Tensor& z) {
  return evaluator_->forward(z.reshape({z.size(0), -1})).squeeze(1);
}

torch::Tensor VaeImpl::memory(const torch::Tensor& z) { return z_proj_(z); }

torch::Tensor VaeImpl::sar_forward(const torch::Tensor& memory_rows,
                                   const torch::Tensor& chunk_index, const torch::Tensor& inputs) {
  const auto len = inputs.size(1) + 1;
  auto x = torch::cat({chunk_emb_(chunk_index).unsqueeze(1), dec_tok_(inputs)}, 1) +
           dec_pos_(torch::arange(len, torch::kLong)).unsqueeze(0);
  for (const auto& layer : *dec_layers_) x = layer->as<DecoderLayer>()->forward(x, memory_rows);
  return out_(dec_norm_(x)).index({Slice(), Slice(1, torch::indexing::None)});
}

torch::Tensor VaeImpl::ar_forward(const torch::Tensor& memory, const torch::Tensor& inputs) {
  const auto len = inputs.size(1);
  auto x = dec_tok_(inputs) + dec_pos_(torch::arange(len, torch::kLong)).unsqueeze(0);
  for (const auto& layer : *dec_layers_) x = layer->as<DecoderLayer>()->forward(x, memory);
  return out_(dec_norm_(x));
}

torch::Tensor VaeImpl::chunk_logits(const torch::Tensor& z, const VaeBatch& batch) {
  auto mem = memory(z).index_select(0, batch.chunk_owner);
  return sar_forward(mem, batch.chunk_index, batch.chunk_inputs);
}

torch::Tensor VaeImpl::flat_logits(const torch::Tensor& z, const VaeBatch& batch) {
  return ar_forward(memory(z), batch.ar_inputs);
}

torch::Tensor VaeImpl::nar_logits(const torch::Tensor& z) {
  const auto B = z.size(0);
  const int T = config_.T_max, L = config_.L_max + 1, D = config_.d_model;
  auto q = chunk_emb_(torch::arange(T, torch::kLong)).unsqueeze(1) +
           dec_pos_(torch::arange(L, torch::kLong)).unsqueeze(0);
  auto x = q.reshape({1, T * L, D}).expand({B, T * L, D});
  auto mem = memory(z);
  for (const auto& layer : *dec_layers_) x = layer->as<DecoderLayer>()->forward(x, mem);
  return out_(dec_norm_(x)).view({B, T, L, -1});
}

torch::Tensor VaeImpl::recon_loss(const torch::Tensor& z, const VaeBatch& batch) {
  const auto B = static_cast<double>(batch.size());
  torch::Tensor logits, targets;
  switch (config_.decoder) {
    case DecoderKind::SAR:
      logits = chunk_logits(z, batch);
      targets = batch.chunk_targets;
      break;
    case DecoderKind::AR:
      logits = flat_logits(z, batch);
      targets = batch.ar_targets;
      break;
    case DecoderKind::NAR:
      logits = nar_logits(z);
      targets = batch.nar_targets;
      break;
  }
  auto ce = torch::nn::functional::cross_entropy(
      logits.reshape({-1, logits.size(-1)}), targets.reshape({-1}),
      torch::nn::functional::CrossEntropyFuncOptions().ignore_index(Vocab::kPad).reduction(torch::kSum));
  return ce / B;
}

VaeLosses VaeImpl::losses(const VaeBatch& batch, double gamma_scale, bool sample) {
  auto [mu, logvar] = encode(batch);
  auto z = sample ? reparameterize(mu, logvar) : mu;
  VaeLosses l;
  l.rec = recon_loss(z, batch);
  l.cot = torch::nn::functional::cross_entropy(count_logits(z), batch.counts);
  l.eva = torch::mse_loss(evaluate(z), batch.y.to(z.dtype()));
  l.kl = kl_loss(mu, logvar);
  l.total = l.rec + config_.alpha * l.cot + config_.beta * l.eva +
            config_.gamma * gamma_scale * l.kl;
  return l;
}

std::vector<int> VaeImpl::pick_counts(const torch::Tensor& z, DecodeMode mode,
                                      std::mt19937_64* rng) {
  auto logits = count_logits(z).to(torch::kFloat).contiguous();
  const auto B = logits.size(0), T = logits.size(1);
  const std::vector<bool> none(static_cast<std::size_t>(T), false);
  std::vector<int> counts;
  for (std::int64_t b = 0; b < B; ++b) {
    counts.push_back(static_cast<int>(choose(logits.data_ptr<float>() + b * T, T, none, mode, rng)) + 1);
  }
  return counts;
}

std::vector<FeatureSet> VaeImpl::decode(const torch::Tensor& z, DecodeMode mode,
                                        std::mt19937_64* rng, DecodeStats* stats) {
  torch::NoGradGuard no_grad;
  DecodeStats local;
  auto* s = stats ? stats : &local;
  switch (config_.decoder) {
    case DecoderKind::SAR: return decode_sar(z, mode, rng, s);
    case DecoderKind::AR: return decode_ar(z, mode, rng, s);
    case DecoderKind::NAR: return decode_nar(z, mode, rng, s);
  }
  return {};
}

std::vector<FeatureSet> VaeImpl::decode_sar(const torch::Tensor& z, DecodeMode mode,
                                            std::mt19937_64* rng, DecodeStats* stats) {
  const auto counts = pick_counts(z, mode, rng);
  const auto B = z.size(0);
  const std::int64_t V = config_.vocab_size();
  std::vector<std::int64_t> owner, index;
  for (std::int64_t b = 0; b < B; ++b) {
    for (int t = 0; t < counts[static_cast<std::size_t>(b)]; ++t) {
      owner.push_back(b);
      index.push_back(t);
    }
  }
  const auto R = static_cast<std::int64_t>(owner.size());
  auto mem = memory(z).index_select(0, torch::tensor(owner, torch::kLong));
  auto idx = torch::tensor(index, torch::kLong);
  auto inputs = torch::full({R, config_.L_max + 1}, Vocab::kPad, torch::kLong);
  inputs.index_put_({Slice(), 0}, Vocab::kBos);

  const auto first = ban(V, {Vocab::kPad, Vocab::kBos, Vocab::kSep, Vocab::kEos});
  const auto later = ban(V, {Vocab::kPad, Vocab::kBos, Vocab::kSep});
  std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(R));
  std::vector<bool> done(static_cast<std::size_t>(R), false);
  std::int64_t active = R;
  for (int k = 0; k < config_.L_max && active > 0; ++k) {
    auto logits = sar_forward(mem, idx, inputs.index({Slice(), Slice(0, k + 1)}))
                      .index({Slice(), k})
                      .to(torch::kFloat)
                      .contiguous();
    ++stats->passes;
    auto acc = inputs.accessor<std::int64_t, 2>();
    for (std::int64_t r = 0; r < R; ++r) {
      if (done[static_cast<std::size_t>(r)]) continue;
      const auto tok = choose(logits.data_ptr<float>() + r * V, V, k == 0 ? first : later, mode, rng);
      if (tok == Vocab::kEos) {
        done[static_cast<std::size_t>(r)] = true;
        --active;
        continue;
      }
      out[static_cast<std::size_t>(r)].push_back(tok);
      ++stats->tokens;
      if (k + 1 < config_.L_max + 1) acc[r][k + 1] = tok;
    }
  }

  std::vector<FeatureSet> sets;
  std::size_t r = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<std::vector<Token>> chunks;
    for (int t = 0; t < counts[static_cast<std::size_t>(b)]; ++t, ++r) {
      chunks.push_back(to_tokens(vocab_, out[r]));
    }
    sets.push_back(repair(chunks));
  }
  return sets;
}

std::vector<FeatureSet> VaeImpl::decode_ar(const torch::Tensor& z, DecodeMode mode,
                                           std::mt19937_64* rng, DecodeStats* stats) {
  const auto B = z.size(0);
  const std::int64_t V = config_.vocab_size();
  const int len = config_.ar_length();
  auto mem = memory(z);
  auto inputs = torch::full({B, len}, Vocab::kPad, torch::kLong);
  inputs.index_put_({Slice(), 0}, Vocab::kBos);

  // Start of a chunk: no terminator or separator yet. A full chunk must be
  // closed. The last allowed chunk cannot be followed by a separator.
  const auto start = ban(V, {Vocab::kPad, Vocab::kBos, Vocab::kSep, Vocab::kEos});
  std::vector<bool> close(static_cast<std::size_t>(V), true);
  close[static_cast<std::size_t>(Vocab::kSep)] = false;
  close[static_cast<std::size_t>(Vocab::kEos)] = false;
  const auto middle = ban(V, {Vocab::kPad, Vocab::kBos});

  std::vector<std::vector<std::vector<std::int64_t>>> chunks(static_cast<std::size_t>(B),
                                                            std::vector<std::vector<std::int64_t>>(1));
  std::vector<bool> done(static_cast<std::size_t>(B), false);
  std::int64_t active = B;
  for (int step = 0; step + 1 < len && active > 0; ++step) {
    auto logits = ar_forward(mem, inputs.index({Slice(), Slice(0, step + 1)}))
                      .index({Slice(), step})
                      .to(torch::kFloat)
                      .contiguous();
    ++stats->passes;
    auto acc = inputs.accessor<std::int64_t, 2>();
    for (std::int64_t b = 0; b < B; ++b) {
      auto& mine = chunks[static_cast<std::size_t>(b)];
      if (done[static_cast<std::size_t>(b)]) continue;
      const auto cur = static_cast<int>(mine.back().size());
      std::vector<bool> banned = cur == 0 ? start : cur >= config_.L_max ? close : middle;
      if (static_cast<int>(mine.size()) >= config_.T_max) banned[static_cast<std::size_t>(Vocab::kSep)] = true;
      const auto tok = choose(logits.data_ptr<float>() + b * V, V, banned, mode, rng);
      if (tok == Vocab::kEos) {
        done[static_cast<std::size_t>(b)] = true;
        --active;
        continue;
      }
      acc[b][step + 1] = tok;
      if (tok == Vocab::kSep) {
        mine.emplace_back();
      } else {
        mine.back().push_back(tok);
        ++stats->tokens;
      }
    }
  }

  std::vector<FeatureSet> sets;
  for (const auto& mine : chunks) {
    std::vector<std::vector<Token>> toks;
    for (const auto& c : mine) {
      if (!c.empty()) toks.push_back(to_tokens(vocab_, c));
    }
    sets.push_back(repair(toks));
  }
  return sets;
}

std::vector<FeatureSet> VaeImpl::decode_nar(const torch::Tensor& z, DecodeMode mode,
                                            std::mt19937_64* rng, DecodeStats* stats) {
  const auto counts = pick_counts(z, mode, rng);
  auto logits = nar_logits(z).to(torch::kFloat).contiguous();
  ++stats->passes;
  const auto B = z.size(0);
  const std::int64_t V = config_.vocab_size();
  const int L = config_.L_max + 1;
  const auto first = ban(V, {Vocab::kPad, Vocab::kBos, Vocab::kSep, Vocab::kEos});
  const auto later = ban(V, {Vocab::kPad, Vocab::kBos, Vocab::kSep});
  const float* base = logits.data_ptr<float>();
  std::vector<FeatureSet> sets;
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<std::vector<Token>> chunks;
    for (int t = 0; t < counts[static_cast<std::size_t>(b)]; ++t) {
      std::vector<std::int64_t> ids;
      for (int k = 0; k < config_.L_max; ++k) {
        const float* row = base + ((b * config_.T_max + t) * L + k) * V;
        const auto tok = choose(row, V, k == 0 ? first : later, mode, rng);
        if (tok == Vocab::kEos) break;
        ids.push_back(tok);
      }
      stats->tokens += static_cast<std::int64_t>(ids.size());
      chunks.push_back(to_tokens(vocab_, ids));
    }
    sets.push_back(repair(chunks));
  }
  return sets;
}

DecodeStats VaeImpl::decode_forced(const torch::Tensor& z, int chunks, int chunk_len) {
  torch::NoGradGuard no_grad;
  DecodeStats stats;
  const auto B = z.size(0);
  auto mem = memory(z);
  if (config_.decoder == DecoderKind::NAR) {
    nar_logits(z);
    stats.passes = 1;
    stats.tokens = B * chunks * chunk_len;
    return stats;
  }
  if (config_.decoder == DecoderKind::SAR) {
    if (chunks > config_.T_max || chunk_len > config_.L_max) {
      throw SequenceTooLong("forced shape exceeds decoder limits");
    }
    const std::int64_t R = B * chunks;
    auto rows = mem.repeat_interleave(chunks, 0);
    auto idx = torch::arange(chunks, torch::kLong).repeat({B});
    auto inputs = torch::full({R, chunk_len + 1}, Vocab::kPad, torch::kLong);
    inputs.index_put_({Slice(), 0}, Vocab::kBos);
    for (int k = 0; k < chunk_len; ++k) {
      auto logits = sar_forward(rows, idx, inputs.index({Slice(), Slice(0, k + 1)})).index({Slice(), k});
      inputs.index_put_({Slice(), k + 1}, logits.argmax(-1));
      ++stats.passes;
    }
    stats.tokens = R * chunk_len;
    return stats;
  }
  const int total = chunks * chunk_len;
  if (total + 1 > config_.ar_length()) throw SequenceTooLong("forced length exceeds decoder limit");
  auto inputs = torch::full({B, total + 1}, Vocab::kPad, torch::kLong);
  inputs.index_put_({Slice(), 0}, Vocab::kBos);
  for (int step = 0; step < total; ++step) {
    auto logits = ar_forward(mem, inputs.index({Slice(), Slice(0, step + 1)})).index({Slice(), step});
    inputs.index_put_({Slice(), step + 1}, logits.argmax(-1));
    ++stats.passes;
  }
  stats.tokens = B * total;
  return stats;
}

FeatureSet repair(const std::vector<std::vector<Token>>& chunks) {
  std::vector<FeatureExpr> exprs;
  for (const auto& c : chunks) {
    const auto keep = is_valid_postfix(c) ? c.size() : longest_valid_prefix(c);
    if (keep == 0) {
      exprs.push_back(FeatureExpr::passthrough(1));
    } else {
      exprs.emplace_back(std::vector<Token>(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(keep)));
    }
  }
  if (exprs.empty()) exprs.push_back(FeatureExpr::passthrough(1));
  return FeatureSet(std::move(exprs));
}

namespace {

template <typename F>
void for_batches(std::size_t n, int batch_size, F&& f) {
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    f(start, std::min(n, start + static_cast<std::size_t>(batch_size)));
  }
}

VaeBatch batch_of(const std::vector<TrainingRecord>& records, std::span<const std::size_t> ids,
                  const VaeConfig& config) {
  std::vector<FeatureSet> sets;
  std::vector<double> y;
  for (auto i : ids) {
    sets.push_back(records[i].fs);
    y.push_back(records[i].y_norm);
  }
  return make_batch(sets, y, config);
}

}  // namespace

torch::Tensor encode_records(Vae& vae, const std::vector<TrainingRecord>& records, int batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  std::vector<std::size_t> ids(records.size());
  std::iota(ids.begin(), ids.end(), 0);
  for_batches(records.size(), batch_size, [&](std::size_t lo, std::size_t hi) {
    const auto batch = batch_of(records, std::span(ids).subspan(lo, hi - lo), vae->config());
    parts.push_back(vae->encode(batch).first);
  });
  return torch::cat(parts, 0);
}

ReconstructionReport reconstruction_accuracy(Vae& vae, const std::vector<TrainingRecord>& records,
                                             int batch_size) {
  ReconstructionReport report;
  if (records.empty()) return report;
  const auto mu = encode_records(vae, records, batch_size);
  std::size_t hit = 0, total = 0, count_hit = 0, exact = 0;
  for_batches(records.size(), batch_size, [&](std::size_t lo, std::size_t hi) {
    const auto decoded = vae->decode(mu.index({Slice(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi))}));
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& want = records[i].fs;
      const auto& got = decoded[i - lo];
      count_hit += want.count() == got.count();
      exact += want == got;
      for (std::size_t t = 0; t < want.count(); ++t) {
        const auto& wt = want.exprs()[t].tokens();
        const std::vector<Token>* gt = t < got.count() ? &got.exprs()[t].tokens() : nullptr;
        for (std::size_t k = 0; k <= wt.size(); ++k) {
          ++total;
          if (!gt) continue;
          if (k < wt.size()) {
            hit += k < gt->size() && (*gt)[k] == wt[k];
          } else {
            hit += gt->size() == wt.size();
          }
        }
      }
    }
  });
  const auto n = static_cast<double>(records.size());
  report.token_accuracy = static_cast<double>(hit) / static_cast<double>(total);
  report.count_accuracy = static_cast<double>(count_hit) / n;
  report.exact_sets = static_cast<double>(exact) / n;
  return report;
}

VaeTrainResult train_vae(Vae& vae, const std::vector<TrainingRecord>& records,
                         const VaeTrainOptions& options) {
  if (records.empty()) throw std::invalid_argument("train_vae: empty corpus");
  torch::manual_seed(options.seed);
  std::mt19937_64 rng(options.seed);
  torch::optim::Adam opt(vae->parameters(), torch::optim::AdamOptions(options.learning_rate));

  const auto n = records.size();
  const auto bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const double total_steps = static_cast<double>(per_epoch) * std::max(1, options.epochs);
  const double anneal = std::max(1.0, vae->config().anneal_fraction * total_steps);

  VaeTrainResult result;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  vae->train();
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for_batches(n, static_cast<int>(bs), [&](std::size_t lo, std::size_t hi) {
      const auto batch = batch_of(records, std::span(order).subspan(lo, hi - lo), vae->config());
      const double scale = std::min(1.0, static_cast<double>(step) / anneal);
      auto l = vae->losses(batch, scale, true);
      opt.zero_grad();
      l.total.backward();
      opt.step();
      const double v = l.total.item<double>();
      if (!std::isfinite(v)) {
        throw DivergenceDetected("VAE loss became non-finite at epoch " + std::to_string(epoch));
      }
      sum += v * static_cast<double>(hi - lo);
      ++step;
    });
    result.epoch_loss.push_back(sum / static_cast<double>(n));
    result.epochs_run = epoch + 1;
    if (options.on_epoch) options.on_epoch(epoch, result.epoch_loss.back());
    if (options.stop_accuracy > 0.0 && (epoch + 1) % std::max(1, options.check_every) == 0) {
      vae->eval();
      const auto rep = reconstruction_accuracy(vae, records);
      vae->train();
      if (rep.token_accuracy >= options.stop_accuracy && rep.count_accuracy >= options.stop_accuracy) {
        break;
      }
    }
  }
  vae->eval();
  result.reconstruction = reconstruction_accuracy(vae, records);
  return result;
}

}  // namespace difft
