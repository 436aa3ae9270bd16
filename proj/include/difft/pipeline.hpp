#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "difft/checkpoint.hpp"
#include "difft/collector.hpp"
#include "difft/diffusion.hpp"
#include "difft/sampler.hpp"
#include "difft/table_condition.hpp"
#include "difft/vae.hpp"

namespace difft {

enum class Variant { Full, AR, NAR, NoR, CS };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every stage's parameters. Stage seeds derive from `seed`: collect uses
/// seed, VAE training seed + 1, LDM training seed + 2, sampling seed + 3.
struct RunConfig {
  std::filesystem::path dataset;
  std::string task;  // empty: inferred from the target column
  std::uint64_t seed = 0;
  Variant variant = Variant::Full;
  std::filesystem::path out = "runs/default";
  int threads = 1;

  CollectorConfig collect;
  VaeConfig vae;
  VaeTrainOptions vae_train;
  ConditionConfig condition;
  DenoiserConfig denoiser;
  LdmTrainOptions ldm;
  SamplerConfig sampler;

  double target_scale = 1.1;  // a = target_scale * max y_norm
  int n_candidates = 16;
  int rescore_top = 4;
  int cs_steps = 100;
  double cs_lr = 0.05;

  std::vector<Variant> ablate_variants = {Variant::Full, Variant::AR, Variant::NAR, Variant::NoR,
                                          Variant::CS};
  int bench_seeds = 3;

  /// INI with sections run, collect, scoring, vae, ldm, sampler, generate,
  /// ablate, bench. Unknown keys are rejected.
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig parse_ini(const std::string& text);
  std::string to_ini() const;
  /// Snapshot recorded in manifests; the output directory is left out so
  /// reruns elsewhere produce identical manifests.
  nlohmann::json to_json() const;
  void validate() const;

  /// Variant rules: NoR forces lambda = 0; AR and NAR select the decoder.
  RunConfig effective() const;
};

/// Small profile for tests and acceptance runs.
RunConfig fast_profile();

/// Stage file names inside a run directory.
namespace files {
inline constexpr const char* kConfig = "config.ini";
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kCollectManifest = "collect_manifest.json";
inline constexpr const char* kVae = "vae.ckpt";
inline constexpr const char* kVaeLoss = "vae_loss.csv";
inline constexpr const char* kVaeManifest = "vae_manifest.json";
inline constexpr const char* kLdm = "ldm.ckpt";
inline constexpr const char* kLdmLoss = "ldm_loss.csv";
inline constexpr const char* kLdmManifest = "ldm_manifest.json";
inline constexpr const char* kCandidates = "candidates.jsonl";
inline constexpr const char* kTransformed = "transformed.csv";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kGenerateManifest = "generate_manifest.json";
inline constexpr const char* kAblation = "ablation.json";
inline constexpr const char* kAblationCsv = "ablation.csv";
}  // namespace files

Manifest cmd_collect(const RunConfig& config);
Manifest cmd_train_vae(const RunConfig& config);
Manifest cmd_train_ldm(const RunConfig& config);
Manifest cmd_generate(const RunConfig& config);

/// Runs every variant in `ablate_variants` under config.out / <variant>,
/// sharing the corpus and any checkpoints whose inputs coincide, and writes a
/// comparison table.
nlohmann::json cmd_ablate(const RunConfig& config);

/// Fans (dataset config, seed) cells out to `exe ablate` worker processes
/// (DIFFT_WORKERS at a time) and aggregates mean and std per dataset and
/// method. Failed cells are marked, not fatal.
nlohmann::json cmd_bench(const std::vector<std::filesystem::path>& configs,
                         const std::filesystem::path& out, const std::filesystem::path& exe,
                         std::optional<std::uint64_t> seed_override = std::nullopt);

/// Wall-clock comparison of SAR and AR decoding at a fixed token budget
/// with an untrained model of the given shape.
struct DecodeTiming {
  double sar_seconds = 0.0;
  double ar_seconds = 0.0;
  DecodeStats sar, ar;
};
DecodeTiming decode_timing(int total_tokens, int chunk_len, const VaeConfig& shape, int repeats = 3);

/// Loaded stage artifacts.
struct LoadedVae {
  Vae vae{nullptr};
  std::vector<TrainingRecord> records;
};
LoadedVae load_vae(const RunConfig& config);

struct LoadedLdm {
  Denoiser denoiser{nullptr};
  TableCondition condition{nullptr};
  LatentScaler scaler;
};
LoadedLdm load_ldm(const RunConfig& config, const VaeConfig& vae_config);

/// Process exit code for an exception escaping a stage.
int exit_code_for(const std::exception& e);

}  // namespace difft
