#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "difft/collector.hpp"
#include "difft/expr.hpp"
#include "difft/nn.hpp"
#include "difft/vocab.hpp"

namespace difft {

enum class DecoderKind { SAR, AR, NAR };

std::string to_string(DecoderKind kind);
DecoderKind decoder_kind_from_string(const std::string& s);

struct VaeConfig {
  int n_features = 1;
  int d_model = 128;
  int n_layers = 4;          // encoder depth
  int decoder_layers = 2;
  int n_heads = 4;
  int ffn = 512;
  int m = 4;                 // latent tokens
  int d = 16;                // latent width
  int T_max = 16;
  int L_max = 9;
  int ar_max_len = 0;        // 0: T_max * (L_max + 1) + 1
  int head_hidden = 128;     // count head and evaluator
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.01;
  double anneal_fraction = 0.1;
  DecoderKind decoder = DecoderKind::SAR;

  std::int64_t vocab_size() const { return Vocab(n_features).size(); }
  int max_flat_len() const { return T_max * (L_max + 1) - 1; }
  int ar_length() const { return ar_max_len > 0 ? ar_max_len : max_flat_len() + 2; }
  int latent_numel() const { return m * d; }
  void validate() const;
};

class SequenceTooLong : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Teacher-forcing tensors for a minibatch of feature sets.
struct VaeBatch {
  torch::Tensor flat;           // [B, S] SEP-joined ids, PAD padded
  torch::Tensor flat_padding;   // [B, S] true at PAD
  torch::Tensor counts;         // [B] T - 1
  torch::Tensor chunk_inputs;   // [R, L_max + 1] BOS + tokens
  torch::Tensor chunk_targets;  // [R, L_max + 1] tokens + EOS
  torch::Tensor chunk_index;    // [R] position of the chunk in its set
  torch::Tensor chunk_owner;    // [R] row in the batch
  torch::Tensor ar_inputs;      // [B, S + 1] BOS + flat
  torch::Tensor ar_targets;     // [B, S + 1] flat + EOS
  torch::Tensor nar_targets;    // [B, T_max, L_max + 1]
  torch::Tensor y;              // [B]
  std::int64_t size() const { return counts.size(0); }
};

VaeBatch make_batch(std::span<const FeatureSet> sets, std::span<const double> y,
                    const VaeConfig& config);

struct VaeLosses {
  torch::Tensor rec, cot, eva, kl, total;
};

/// Closed form KL(N(mu, exp(logvar)) || N(0, I)): summed over all latent
/// entries, averaged over the leading batch dimension.
torch::Tensor kl_loss(const torch::Tensor& mu, const torch::Tensor& logvar);

struct DecodeStats {
  std::int64_t passes = 0;  // sequential decoder forward passes
  std::int64_t tokens = 0;  // tokens emitted (EOS excluded)
};

enum class DecodeMode { Greedy, Sample };

class VaeImpl : public torch::nn::Module {
 public:
  explicit VaeImpl(VaeConfig config);

  const VaeConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }

  /// mu, logvar: [B, m, d].
  std::pair<torch::Tensor, torch::Tensor> encode(const VaeBatch& batch);
  torch::Tensor reparameterize(const torch::Tensor& mu, const torch::Tensor& logvar);

  torch::Tensor count_logits(const torch::Tensor& z);  // [B, T_max]
  torch::Tensor evaluate(const torch::Tensor& z);      // [B]

  /// Teacher-forced logits. SAR: [R, L_max + 1, V]; AR: [B, S + 1, V];
  /// NAR: [B, T_max, L_max + 1, V].
  torch::Tensor chunk_logits(const torch::Tensor& z, const VaeBatch& batch);
  torch::Tensor flat_logits(const torch::Tensor& z, const VaeBatch& batch);
  torch::Tensor nar_logits(const torch::Tensor& z);

  /// Token cross-entropy (EOS included) summed within each sample and
  /// averaged over the batch, for the active decoder kind.
  torch::Tensor recon_loss(const torch::Tensor& z, const VaeBatch& batch);

  /// With `sample` false, z = mu.
  VaeLosses losses(const VaeBatch& batch, double gamma_scale = 1.0, bool sample = true);

  std::vector<FeatureSet> decode(const torch::Tensor& z, DecodeMode mode = DecodeMode::Greedy,
                                 std::mt19937_64* rng = nullptr, DecodeStats* stats = nullptr);

  /// Fixed-shape decode for timing: SAR emits `chunks` chunks of
  /// `chunk_len` tokens, AR emits chunks * chunk_len tokens in one stream.
  /// No early stop; the emitted tokens are discarded.
  DecodeStats decode_forced(const torch::Tensor& z, int chunks, int chunk_len);

 private:
  torch::Tensor memory(const torch::Tensor& z);
  torch::Tensor sar_forward(const torch::Tensor& memory_rows, const torch::Tensor& chunk_index,
                            const torch::Tensor& inputs);
  torch::Tensor ar_forward(const torch::Tensor& memory, const torch::Tensor& inputs);

  std::vector<FeatureSet> decode_sar(const torch::Tensor& z, DecodeMode mode, std::mt19937_64* rng,
                                     DecodeStats* stats);
  std::vector<FeatureSet> decode_ar(const torch::Tensor& z, DecodeMode mode, std::mt19937_64* rng,
                                    DecodeStats* stats);
  std::vector<FeatureSet> decode_nar(const torch::Tensor& z, DecodeMode mode, std::mt19937_64* rng,
                                     DecodeStats* stats);
  std::vector<int> pick_counts(const torch::Tensor& z, DecodeMode mode, std::mt19937_64* rng);

  VaeConfig config_;
  Vocab vocab_;

  torch::nn::Embedding enc_tok_{nullptr}, enc_pos_{nullptr};
  torch::nn::ModuleList enc_layers_{nullptr};
  torch::nn::LayerNorm enc_norm_{nullptr};
  torch::Tensor queries_;
  MultiHeadAttention pool_attn_{nullptr};
  torch::nn::LayerNorm pool_norm_{nullptr};
  torch::nn::Linear to_mu_{nullptr}, to_logvar_{nullptr};

  torch::nn::Sequential count_head_{nullptr};
  torch::nn::Sequential evaluator_{nullptr};

  torch::nn::Linear z_proj_{nullptr};
  torch::nn::Embedding dec_tok_{nullptr}, dec_pos_{nullptr}, chunk_emb_{nullptr};
  torch::nn::ModuleList dec_layers_{nullptr};
  torch::nn::LayerNorm dec_norm_{nullptr};
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(Vae);

/// Token-level repair: each chunk is cut to its longest valid postfix
/// prefix; empty results become the passthrough "f1".
FeatureSet repair(const std::vector<std::vector<Token>>& chunks);

struct VaeTrainOptions {
  int epochs = 300;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  /// Checked every `check_every` epochs; stop once both greedy accuracies
  /// reach this value (0 disables).
  double stop_accuracy = 0.0;
  int check_every = 10;
  std::function<void(int epoch, double loss)> on_epoch;
};

struct ReconstructionReport {
  double token_accuracy = 0.0;
  double count_accuracy = 0.0;
  double exact_sets = 0.0;
};

struct VaeTrainResult {
  std::vector<double> epoch_loss;  // mean total loss per epoch
  int epochs_run = 0;
  ReconstructionReport reconstruction;
};

class DivergenceDetected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

VaeTrainResult train_vae(Vae& vae, const std::vector<TrainingRecord>& records,
                         const VaeTrainOptions& options);

/// Greedy decode from mu. Token accuracy counts target positions (tokens and
/// the chunk terminator) matched at the same chunk and offset.
ReconstructionReport reconstruction_accuracy(Vae& vae, const std::vector<TrainingRecord>& records,
                                             int batch_size = 128);

/// mu of every record, [N, m, d].
torch::Tensor encode_records(Vae& vae, const std::vector<TrainingRecord>& records,
                             int batch_size = 128);

}  // namespace difft
