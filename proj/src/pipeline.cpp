#include "difft/pipeline.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <fcntl.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <variant>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

extern char** environ;

namespace difft {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::AR: return "AR";
    case Variant::NAR: return "NAR";
    case Variant::NoR: return "NoR";
    case Variant::CS: return "CS";
  }
  return "full";
}

Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::Full, Variant::AR, Variant::NAR, Variant::NoR, Variant::CS}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + s + "' (expected full, AR, NAR, NoR or CS)");
}

namespace {

using Slot = std::variant<int*, double*, std::uint64_t*, std::string*>;

struct Binding {
  const char* key;
  Slot slot;
};

/// Plain key/value settings; the dataset path, variants and output directory
/// are handled separately.
std::vector<Binding> bindings(RunConfig& c) {
  return {
      {"run.seed", &c.seed},
      {"run.threads", &c.threads},
      {"run.task", &c.task},
      {"collect.episodes", &c.collect.episodes},
      {"collect.steps", &c.collect.steps},
      {"collect.max_chunk_len", &c.collect.max_chunk_len},
      {"collect.gamma", &c.collect.gamma},
      {"collect.epsilon_start", &c.collect.epsilon_start},
      {"collect.epsilon_end", &c.collect.epsilon_end},
      {"collect.replay_capacity", &c.collect.replay_capacity},
      {"collect.batch_size", &c.collect.batch_size},
      {"collect.learning_rate", &c.collect.learning_rate},
      {"collect.hidden", &c.collect.hidden},
      {"collect.time_budget_seconds", &c.collect.time_budget_seconds},
      {"scoring.folds", &c.collect.scoring.folds},
      {"scoring.trees", &c.collect.scoring.forest.n_trees},
      {"scoring.max_depth", &c.collect.scoring.forest.max_depth},
      {"scoring.min_samples_leaf", &c.collect.scoring.forest.min_samples_leaf},
      {"scoring.max_features", &c.collect.scoring.forest.max_features},
      {"vae.d_model", &c.vae.d_model},
      {"vae.n_layers", &c.vae.n_layers},
      {"vae.decoder_layers", &c.vae.decoder_layers},
      {"vae.n_heads", &c.vae.n_heads},
      {"vae.ffn", &c.vae.ffn},
      {"vae.m", &c.vae.m},
      {"vae.d", &c.vae.d},
      {"vae.T_max", &c.vae.T_max},
      {"vae.head_hidden", &c.vae.head_hidden},
      {"vae.alpha", &c.vae.alpha},
      {"vae.beta", &c.vae.beta},
      {"vae.gamma", &c.vae.gamma},
      {"vae.anneal_fraction", &c.vae.anneal_fraction},
      {"vae.epochs", &c.vae_train.epochs},
      {"vae.batch_size", &c.vae_train.batch_size},
      {"vae.learning_rate", &c.vae_train.learning_rate},
      {"vae.stop_accuracy", &c.vae_train.stop_accuracy},
      {"vae.check_every", &c.vae_train.check_every},
      {"condition.hidden", &c.condition.hidden},
      {"condition.d_g", &c.condition.d_g},
      {"condition.d_c", &c.condition.d_c},
      {"ldm.n_blocks", &c.denoiser.n_blocks},
      {"ldm.d_model", &c.denoiser.d_model},
      {"ldm.n_heads", &c.denoiser.n_heads},
      {"ldm.ffn", &c.denoiser.ffn},
      {"ldm.t_dim", &c.denoiser.t_dim},
      {"ldm.epochs", &c.ldm.epochs},
      {"ldm.batch_size", &c.ldm.batch_size},
      {"ldm.learning_rate", &c.ldm.learning_rate},
      {"ldm.gamma_snr", &c.ldm.gamma_snr},
      {"sampler.n_steps", &c.sampler.n_steps},
      {"sampler.lambda", &c.sampler.lambda},
      {"sampler.eta", &c.sampler.eta},
      {"sampler.guidance_clip", &c.sampler.guidance_clip},
      {"generate.target_scale", &c.target_scale},
      {"generate.n_candidates", &c.n_candidates},
      {"generate.rescore_top", &c.rescore_top},
      {"generate.cs_steps", &c.cs_steps},
      {"generate.cs_lr", &c.cs_lr},
      {"bench.seeds", &c.bench_seeds},
  };
}

/// Shortest text that reads back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string slot_text(const Slot& slot) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return *p;
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(*p);
        } else {
          return std::to_string(*p);
        }
      },
      slot);
}

json slot_json(const Slot& slot) {
  return std::visit([](auto* p) { return json(*p); }, slot);
}

void assign(const Slot& slot, const std::string& key, const std::string& text) {
  try {
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          std::size_t used = text.size();
          if constexpr (std::is_same_v<T, std::string>) {
            *p = text;
          } else if constexpr (std::is_same_v<T, double>) {
            *p = std::stod(text, &used);
          } else if constexpr (std::is_same_v<T, int>) {
            *p = std::stoi(text, &used);
          } else {
            if (!text.empty() && text.front() == '-') throw std::invalid_argument("negative");
            *p = std::stoull(text, &used);
          }
          if (used != text.size()) throw std::invalid_argument("trailing characters");
        },
        slot);
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  }
}

std::vector<Variant> parse_variants(const std::string& text) {
  std::vector<Variant> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(variant_from_string(item));
  }
  if (out.empty()) throw ConfigError("ablate.variants is empty");
  return out;
}

std::string join_variants(const std::vector<Variant>& vs) {
  std::string out;
  for (std::size_t i = 0; i < vs.size(); ++i) out += (i ? "," : "") + to_string(vs[i]);
  return out;
}

}  // namespace

RunConfig RunConfig::parse_ini(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig c;
  auto table = bindings(c);
  std::map<std::string, Slot> by_key;
  for (const auto& b : table) by_key.emplace(b.key, b.slot);
  for (const auto& [section, entries] : tree) {
    if (entries.empty() && !entries.data().empty()) {
      throw ConfigError("key '" + section + "' must sit inside a section");
    }
    for (const auto& [name, value] : entries) {
      const auto key = section + "." + name;
      const auto text = value.get_value<std::string>();
      if (key == "run.dataset") {
        c.dataset = text;
      } else if (key == "run.out") {
        c.out = text;
      } else if (key == "run.variant") {
        c.variant = variant_from_string(text);
      } else if (key == "ablate.variants") {
        c.ablate_variants = parse_variants(text);
      } else if (auto it = by_key.find(key); it != by_key.end()) {
        assign(it->second, key, text);
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  auto c = parse_ini(buf.str());
  if (!c.dataset.empty() && c.dataset.is_relative()) {
    c.dataset = (path.parent_path() / c.dataset).lexically_normal();
  }
  return c;
}

std::string RunConfig::to_ini() const {
  RunConfig copy = *this;
  std::ostringstream os;
  std::string section;
  auto emit = [&](const std::string& key, const std::string& value) {
    const auto dot = key.find('.');
    const auto s = key.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    os << key.substr(dot + 1) << " = " << value << '\n';
  };
  emit("run.dataset", dataset.string());
  emit("run.out", out.string());
  emit("run.variant", to_string(variant));
  for (const auto& b : bindings(copy)) {
    if (std::string(b.key).rfind("run.", 0) == 0) emit(b.key, slot_text(b.slot));
  }
  for (const auto& b : bindings(copy)) {
    const std::string key = b.key;
    if (key.rfind("run.", 0) == 0 || key.rfind("bench.", 0) == 0) continue;
    emit(key, slot_text(b.slot));
  }
  emit("ablate.variants", join_variants(ablate_variants));
  emit("bench.seeds", std::to_string(bench_seeds));
  return os.str();
}

json RunConfig::to_json() const {
  RunConfig copy = *this;
  json j;
  j["run"]["dataset"] = dataset.string();
  j["run"]["variant"] = to_string(variant);
  for (const auto& b : bindings(copy)) {
    const std::string key = b.key;
    const auto dot = key.find('.');
    j[key.substr(0, dot)][key.substr(dot + 1)] = slot_json(b.slot);
  }
  j["ablate"]["variants"] = join_variants(ablate_variants);
  return j;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  need(!dataset.empty(), "run.dataset is required");
  need(task.empty() || task == "classification" || task == "regression",
       "run.task must be classification or regression");
  need(threads >= 1, "run.threads >= 1");
  need(collect.episodes >= 1 && collect.steps >= 1, "collect.episodes and collect.steps >= 1");
  need(collect.max_chunk_len >= 1, "collect.max_chunk_len >= 1");
  need(collect.scoring.folds >= 2, "scoring.folds >= 2");
  need(collect.scoring.forest.n_trees >= 1, "scoring.trees >= 1");
  need(vae.d_model % vae.n_heads == 0, "vae.d_model divisible by vae.n_heads");
  need(vae_train.epochs >= 1 && vae_train.batch_size >= 1, "vae.epochs and vae.batch_size >= 1");
  need(denoiser.d_model % denoiser.n_heads == 0, "ldm.d_model divisible by ldm.n_heads");
  need(denoiser.n_blocks >= 1, "ldm.n_blocks >= 1");
  need(ldm.epochs >= 1 && ldm.batch_size >= 1, "ldm.epochs and ldm.batch_size >= 1");
  need(sampler.lambda >= 0.0, "sampler.lambda >= 0");
  need(sampler.eta >= 0.0 && sampler.eta <= 1.0, "sampler.eta in [0, 1]");
  need(sampler.n_steps >= 1 && sampler.n_steps <= 1000, "sampler.n_steps in [1, 1000]");
  need(n_candidates >= 1 && rescore_top >= 1, "generate.n_candidates and rescore_top >= 1");
  need(cs_steps >= 0 && cs_lr >= 0.0, "generate.cs_steps and cs_lr >= 0");
  need(bench_seeds >= 1, "bench.seeds >= 1");
}

RunConfig RunConfig::effective() const {
  RunConfig c = *this;
  if (c.variant == Variant::NoR) c.sampler.lambda = 0.0;
  c.vae.decoder = c.variant == Variant::AR    ? DecoderKind::AR
                  : c.variant == Variant::NAR ? DecoderKind::NAR
                                              : DecoderKind::SAR;
  c.vae.L_max = c.collect.max_chunk_len;
  c.denoiser.m = c.vae.m;
  c.denoiser.d = c.vae.d;
  c.denoiser.d_c = c.condition.d_c;
  c.collect.seed = c.seed;
  c.vae_train.seed = c.seed + 1;
  c.ldm.seed = c.seed + 2;
  c.sampler.seed = c.seed + 3;
  return c;
}

RunConfig fast_profile() {
  RunConfig c;
  c.collect.episodes = 40;
  c.collect.steps = 8;
  c.collect.batch_size = 16;
  c.collect.hidden = 32;
  c.collect.scoring.forest.n_trees = 30;
  c.vae.d_model = 64;
  c.vae.n_layers = 2;
  c.vae.decoder_layers = 2;
  c.vae.ffn = 128;
  c.vae.head_hidden = 64;
  c.vae.m = 4;
  c.vae.d = 8;
  c.vae_train.epochs = 120;
  c.vae_train.batch_size = 32;
  c.vae_train.learning_rate = 2e-3;
  c.condition.hidden = 32;
  c.condition.d_g = 32;
  c.condition.d_c = 64;
  c.denoiser.n_blocks = 2;
  c.denoiser.d_model = 64;
  c.denoiser.ffn = 128;
  c.denoiser.t_dim = 64;
  c.ldm.epochs = 800;
  c.ldm.batch_size = 64;
  c.n_candidates = 64;
  c.rescore_top = 8;
  c.cs_steps = 50;
  c.ablate_variants = {Variant::Full, Variant::CS};
  return c;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

/// Creates the run directory; a stage never overwrites its own earlier output.
void prepare(const RunConfig& c, const char* manifest) {
  fs::create_directories(c.out);
  if (fs::exists(c.out / manifest)) {
    throw ConfigError(std::string(manifest) + " already exists in " + c.out.string() +
                      "; stage outputs are append-only, use a new --out");
  }
  if (!fs::exists(c.out / files::kConfig)) write_text(c.out / files::kConfig, c.to_ini());
}

Dataset load_dataset(const RunConfig& c) {
  std::optional<TaskType> task;
  if (!c.task.empty()) task = task_from_string(c.task);
  return load_csv(c.dataset, task);
}

void write_loss_csv(const fs::path& path, const std::vector<double>& loss) {
  std::ostringstream os;
  os << "epoch,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) os << i << ',' << format_double(loss[i]) << '\n';
  write_text(path, os.str());
}

Manifest read_manifest(const RunConfig& c, const char* name) {
  if (!fs::exists(c.out / name)) {
    throw HashMismatch(std::string(name) + " not found in " + c.out.string() + "; run the upstream stage first");
  }
  return Manifest::read(c.out / name);
}

/// Upstream links: the recorded input hash must equal the producer's
/// recorded output hash and the file on disk.
void check_link(const RunConfig& c, const Manifest& producer, const Manifest& consumer,
                const std::string& file) {
  const auto& made = producer.outputs.at(file);
  if (consumer.inputs.count(file) && consumer.inputs.at(file) != made) {
    throw HashMismatch(file + " recorded by " + consumer.stage + " differs from the one " + producer.stage +
                       " produced");
  }
  verify_hash(c.out / file, made);
}

std::vector<TrainingRecord> checked_corpus(const RunConfig& c, const Dataset& ds) {
  const auto collected = read_manifest(c, files::kCollectManifest);
  verify_hash(c.dataset, collected.inputs.at("dataset"));
  verify_hash(c.out / files::kCorpus, collected.outputs.at(files::kCorpus));
  return read_corpus(c.out / files::kCorpus, static_cast<int>(ds.cols()));
}

VaeConfig vae_shape(const RunConfig& c, const json& shape) {
  VaeConfig v = c.vae;
  v.n_features = shape.at("n_features").get<int>();
  v.T_max = shape.at("T_max").get<int>();
  v.L_max = shape.at("L_max").get<int>();
  v.decoder = decoder_kind_from_string(shape.at("decoder").get<std::string>());
  return v;
}

json vae_shape_json(const VaeConfig& v) {
  return {{"n_features", v.n_features}, {"T_max", v.T_max}, {"L_max", v.L_max}, {"decoder", to_string(v.decoder)}};
}

}  // namespace

Manifest cmd_collect(const RunConfig& config) {
  const auto c = config.effective();
  c.validate();
  prepare(c, files::kCollectManifest);
  const auto ds = load_dataset(c);
  const auto result = collect(ds, c.collect);
  write_corpus(c.out / files::kCorpus, result.records);
  const auto raw = downstream_score(ds, kRaw, c.seed, c.collect.scoring);

  double best = raw.value;
  for (const auto& r : result.records) best = std::max(best, r.y_raw);
  Manifest m;
  m.stage = "collect";
  m.config = c.to_json();
  m.inputs["dataset"] = sha256_file(c.dataset);
  m.outputs[files::kCorpus] = sha256_file(c.out / files::kCorpus);
  m.metrics = {{"records", result.records.size()},
               {"candidates", result.candidates},
               {"budget_exceeded", result.budget_exceeded},
               {"metric", metric_name(metric_for(ds.task))},
               {"raw_score", raw.value},
               {"best_corpus_score", best}};
  m.write(c.out / files::kCollectManifest);
  return m;
}

Manifest cmd_train_vae(const RunConfig& config) {
  const auto c = config.effective();
  c.validate();
  prepare(c, files::kVaeManifest);
  const auto ds = load_dataset(c);
  const auto records = checked_corpus(c, ds);

  VaeConfig vc = c.vae;
  vc.n_features = static_cast<int>(ds.cols());
  for (const auto& r : records) vc.T_max = std::max(vc.T_max, static_cast<int>(r.fs.exprs().size()));
  torch::manual_seed(c.vae_train.seed);
  Vae vae(vc);
  const auto result = train_vae(vae, records, c.vae_train);

  TensorMap state;
  collect_state(*vae, "vae.", state);
  save_tensors(c.out / files::kVae, state);
  write_loss_csv(c.out / files::kVaeLoss, result.epoch_loss);

  Manifest m;
  m.stage = "train-vae";
  m.config = c.to_json();
  m.config["vae_shape"] = vae_shape_json(vc);
  m.inputs[files::kCorpus] = sha256_file(c.out / files::kCorpus);
  m.outputs[files::kVae] = sha256_file(c.out / files::kVae);
  m.outputs[files::kVaeLoss] = sha256_file(c.out / files::kVaeLoss);
  m.metrics = {{"epochs_run", result.epochs_run},
               {"final_loss", result.epoch_loss.back()},
               {"token_accuracy", result.reconstruction.token_accuracy},
               {"count_accuracy", result.reconstruction.count_accuracy},
               {"exact_sets", result.reconstruction.exact_sets}};
  m.write(c.out / files::kVaeManifest);
  return m;
}

LoadedVae load_vae(const RunConfig& config) {
  const auto c = config.effective();
  const auto collected = read_manifest(c, files::kCollectManifest);
  const auto trained = read_manifest(c, files::kVaeManifest);
  check_link(c, collected, trained, files::kCorpus);
  verify_hash(c.out / files::kVae, trained.outputs.at(files::kVae));

  const auto vc = vae_shape(c, trained.config.at("vae_shape"));
  LoadedVae out;
  out.vae = Vae(vc);
  restore_state(*out.vae, "vae.", load_tensors(c.out / files::kVae));
  out.vae->eval();
  out.records = read_corpus(c.out / files::kCorpus, vc.n_features);
  return out;
}

Manifest cmd_train_ldm(const RunConfig& config) {
  const auto c = config.effective();
  c.validate();
  prepare(c, files::kLdmManifest);
  const auto ds = load_dataset(c);
  auto loaded = load_vae(c);
  const auto trained = read_manifest(c, files::kVaeManifest);

  auto latents = encode_records(loaded.vae, loaded.records).detach();
  const auto scaler = LatentScaler::fit(latents);
  std::vector<FeatureGraph> graphs;
  graphs.reserve(loaded.records.size());
  for (const auto& r : loaded.records) graphs.push_back(build_graph(evaluate(r.fs, ds.X)));

  torch::manual_seed(c.ldm.seed);
  Denoiser denoiser(c.denoiser);
  TableCondition condition(c.condition);
  const auto schedule = DiffusionSchedule::linear();
  const auto result = train_ldm(denoiser, condition, schedule, scaler.standardize(latents), graphs, c.ldm);

  TensorMap state;
  collect_state(*denoiser, "denoiser.", state);
  collect_state(*condition, "condition.", state);
  state["scaler.mean"] = scaler.mean;
  state["scaler.std"] = scaler.std;
  save_tensors(c.out / files::kLdm, state);
  write_loss_csv(c.out / files::kLdmLoss, result.epoch_loss);

  Manifest m;
  m.stage = "train-ldm";
  m.config = c.to_json();
  m.config["schedule"] = {{"kind", "linear"}, {"T", 1000}, {"beta_start", 1e-4}, {"beta_end", 0.02}};
  m.config["condition_training"] = "joint with the denoiser";
  m.inputs[files::kCorpus] = trained.inputs.at(files::kCorpus);
  m.inputs[files::kVae] = trained.outputs.at(files::kVae);
  m.outputs[files::kLdm] = sha256_file(c.out / files::kLdm);
  m.outputs[files::kLdmLoss] = sha256_file(c.out / files::kLdmLoss);
  m.metrics = {{"records", loaded.records.size()},
               {"initial_loss", result.epoch_loss.front()},
               {"final_loss", result.epoch_loss.back()}};
  m.write(c.out / files::kLdmManifest);
  return m;
}

LoadedLdm load_ldm(const RunConfig& config, const VaeConfig& vae_config) {
  const auto c = config.effective();
  const auto trained = read_manifest(c, files::kVaeManifest);
  const auto diffused = read_manifest(c, files::kLdmManifest);
  check_link(c, trained, diffused, files::kVae);
  verify_hash(c.out / files::kLdm, diffused.outputs.at(files::kLdm));

  auto dc = c.denoiser;
  dc.m = vae_config.m;
  dc.d = vae_config.d;
  LoadedLdm out;
  out.denoiser = Denoiser(dc);
  out.condition = TableCondition(c.condition);
  const auto state = load_tensors(c.out / files::kLdm);
  restore_state(*out.denoiser, "denoiser.", state);
  restore_state(*out.condition, "condition.", state);
  out.scaler.mean = state.at("scaler.mean");
  out.scaler.std = state.at("scaler.std");
  out.denoiser->eval();
  out.condition->eval();
  return out;
}

namespace {

struct Candidate {
  FeatureSet fs;
  double predicted = 0.0;  // evaluator at the sampled latent
  double reencoded = 0.0;  // evaluator at the decoded set's own latent
  std::optional<double> actual;
};

std::vector<double> to_vector(const torch::Tensor& t) {
  auto v = t.detach().to(torch::kDouble).contiguous();
  return {v.data_ptr<double>(), v.data_ptr<double>() + v.numel()};
}

}  // namespace

Manifest cmd_generate(const RunConfig& config) {
  const auto c = config.effective();
  c.validate();
  prepare(c, files::kGenerateManifest);
  const auto ds = load_dataset(c);
  auto loaded = load_vae(c);
  auto& vae = loaded.vae;
  const auto& vc = vae->config();
  for (auto& p : vae->parameters()) p.set_requires_grad(false);

  double max_y = 0.0;
  std::size_t best_record = 0;
  for (std::size_t i = 0; i < loaded.records.size(); ++i) {
    max_y = std::max(max_y, loaded.records[i].y_norm);
    if (loaded.records[i].y_raw > loaded.records[best_record].y_raw) best_record = i;
  }
  const double a = c.target_scale * max_y;

  Manifest m;
  m.stage = "generate";
  m.config = c.to_json();
  m.inputs[files::kCorpus] = read_manifest(c, files::kVaeManifest).inputs.at(files::kCorpus);
  m.inputs[files::kVae] = sha256_file(c.out / files::kVae);

  std::vector<Candidate> candidates;
  RewardFn reward = [&](const torch::Tensor& z) { return vae->evaluate(z); };
  if (c.variant == Variant::CS) {
    const std::vector<TrainingRecord> start = {loaded.records[best_record]};
    const auto z0 = encode_records(vae, start).detach();
    const auto found = continuous_search(z0, reward, c.cs_steps, c.cs_lr);
    torch::NoGradGuard no_grad;
    candidates.push_back({vae->decode(found.z).front(), to_vector(reward(found.z)).front(), 0.0, {}});
    m.metrics["search_accepted_steps"] = found.accepted_reward.size();
  } else {
    auto ldm = load_ldm(c, vc);
    m.inputs[files::kLdm] = sha256_file(c.out / files::kLdm);
    for (auto& p : ldm.denoiser->parameters()) p.set_requires_grad(false);
    torch::Tensor cond;
    {
      torch::NoGradGuard no_grad;
      cond = ldm.condition->embed(ds.X).c;
    }
    const auto schedule = DiffusionSchedule::linear();
    NoisePredictor eps = [&](const torch::Tensor& z, int t) {
      const auto B = z.size(0);
      return ldm.denoiser->forward(z, torch::full({B}, t, torch::kLong), cond.expand({B, -1}));
    };
    RewardFn guided = [&](const torch::Tensor& z) { return vae->evaluate(ldm.scaler.destandardize(z)); };
    auto sampler = c.sampler;
    sampler.a = a;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(sampler.seed);
    const auto z_T = at::randn({c.n_candidates, vc.m, vc.d}, gen, torch::kFloat);
    const auto z0 = ldm.scaler.destandardize(sample_latents(z_T, eps, guided, schedule, sampler));
    torch::NoGradGuard no_grad;
    const auto sets = vae->decode(z0);
    const auto predicted = to_vector(reward(z0));
    for (std::size_t i = 0; i < sets.size(); ++i) candidates.push_back({sets[i], predicted[i], 0.0, {}});
  }
  // Guided latents can sit where the evaluator overestimates, so candidates
  // are ranked by the evaluator on the re-encoded decoded set.
  {
    std::vector<TrainingRecord> decoded;
    for (const auto& cand : candidates) decoded.push_back({cand.fs, 0.0, 0.0});
    torch::NoGradGuard no_grad;
    const auto again = to_vector(reward(encode_records(vae, decoded)));
    for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i].reencoded = again[i];
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& x, const Candidate& y) { return x.reencoded > y.reencoded; });

  // The top distinct sets by re-encoded reward get a true downstream score.
  std::map<std::string, double> scored;
  std::size_t best = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto key = serialize(candidates[i].fs);
    if (!scored.count(key)) {
      if (scored.size() == static_cast<std::size_t>(c.rescore_top)) continue;
      scored[key] = downstream_score(ds, candidates[i].fs, c.seed, c.collect.scoring).value;
    }
    candidates[i].actual = scored[key];
    if (!candidates[best].actual || *candidates[i].actual > *candidates[best].actual) best = i;
  }
  const auto& chosen = candidates[best];
  const auto raw = downstream_score(ds, kRaw, c.seed, c.collect.scoring);

  {
    std::ostringstream os;
    for (const auto& cand : candidates) {
      json line = {{"sequence", serialize(cand.fs)}, {"predicted", cand.predicted}, {"reencoded", cand.reencoded}};
      if (cand.actual) line["actual"] = *cand.actual;
      os << line.dump() << '\n';
    }
    write_text(c.out / files::kCandidates, os.str());
  }
  std::vector<std::string> header;
  for (const auto& e : chosen.fs.exprs()) header.push_back(serialize(e));
  write_csv(c.out / files::kTransformed, evaluate(chosen.fs, ds.X), header, ds.y);

  const auto metric = metric_for(ds.task);
  EvalResult raw_result = raw;
  EvalResult ours{metric, *chosen.actual, {}};
  const json report = {
      {"dataset", ds.name},
      {"variant", to_string(c.variant)},
      {"seed", c.seed},
      {"metric", metric_name(metric)},
      {"raw_score", raw.value},
      {"score", *chosen.actual},
      {"best_sequence", serialize(chosen.fs)},
      {"best_predicted", chosen.predicted},
      {"n_candidates", candidates.size()},
      {"target_reward", a},
      {"records",
       {result_record(ds.name, "RAW", raw_result, c.seed), result_record(ds.name, to_string(c.variant), ours, c.seed)}}};
  write_text(c.out / files::kReport, report.dump(2) + "\n");

  m.config["sampler_notes"] = {{"alpha_bar", "cumulative at t and t_prev"},
                               {"guidance", "eps + clip_rms(lambda * grad 0.5 (R - a)^2)"}};
  m.outputs[files::kCandidates] = sha256_file(c.out / files::kCandidates);
  m.outputs[files::kTransformed] = sha256_file(c.out / files::kTransformed);
  m.outputs[files::kReport] = sha256_file(c.out / files::kReport);
  m.metrics["raw_score"] = raw.value;
  m.metrics["score"] = *chosen.actual;
  m.metrics["target_reward"] = a;
  m.write(c.out / files::kGenerateManifest);
  return m;
}

namespace {

void copy_artifacts(const fs::path& from, const fs::path& to, std::initializer_list<const char*> names) {
  for (const char* name : names) fs::copy_file(from / name, to / name, fs::copy_options::overwrite_existing);
}

bool uses_sar(Variant v) { return v == Variant::Full || v == Variant::NoR || v == Variant::CS; }
bool uses_ldm(Variant v) { return v != Variant::CS; }

}  // namespace

json cmd_ablate(const RunConfig& config) {
  config.validate();
  fs::create_directories(config.out);
  if (fs::exists(config.out / files::kAblation)) {
    throw ConfigError("ablation already exists in " + config.out.string() + "; use a new --out");
  }
  const auto& variants = config.ablate_variants;
  auto any = [&](auto pred) { return std::any_of(variants.begin(), variants.end(), pred); };

  RunConfig base = config;
  base.variant = Variant::Full;
  base.out = config.out / "base";
  cmd_collect(base);
  const bool sar = any(uses_sar);
  const bool sar_ldm = any([](Variant v) { return uses_sar(v) && uses_ldm(v); });
  if (sar) cmd_train_vae(base);
  if (sar_ldm) cmd_train_ldm(base);

  json rows = json::array();
  double raw_score = 0.0;
  std::string metric, dataset;
  for (auto v : variants) {
    RunConfig rc = config;
    rc.variant = v;
    rc.out = config.out / to_string(v);
    fs::create_directories(rc.out);
    write_text(rc.out / files::kConfig, rc.to_ini());
    copy_artifacts(base.out, rc.out, {files::kCorpus, files::kCollectManifest});
    if (uses_sar(v)) {
      copy_artifacts(base.out, rc.out, {files::kVae, files::kVaeLoss, files::kVaeManifest});
      if (uses_ldm(v)) copy_artifacts(base.out, rc.out, {files::kLdm, files::kLdmLoss, files::kLdmManifest});
    } else {
      cmd_train_vae(rc);
      cmd_train_ldm(rc);
    }
    cmd_generate(rc);
    std::ifstream is(rc.out / files::kReport);
    const auto report = json::parse(is);
    raw_score = report.at("raw_score").get<double>();
    metric = report.at("metric").get<std::string>();
    dataset = report.at("dataset").get<std::string>();
    rows.push_back({{"variant", to_string(v)},
                    {"score", report.at("score")},
                    {"best_sequence", report.at("best_sequence")}});
  }
  const json table = {{"dataset", dataset}, {"seed", config.seed},   {"metric", metric},
                      {"raw_score", raw_score}, {"variants", rows}};
  write_text(config.out / files::kAblation, table.dump(2) + "\n");
  std::ostringstream csv;
  csv << "variant,metric,score,raw_score\n";
  for (const auto& r : rows) {
    csv << r.at("variant").get<std::string>() << ',' << metric << ',' << format_double(r.at("score").get<double>())
        << ',' << format_double(raw_score) << '\n';
  }
  write_text(config.out / files::kAblationCsv, csv.str());
  return table;
}

namespace {

struct Job {
  std::string dataset;
  std::uint64_t seed = 0;
  fs::path dir;
  std::vector<std::string> argv;
  int status = -1;
};

pid_t spawn(const Job& job) {
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  const auto log = (job.dir / "worker.log").string();
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
  std::vector<char*> argv;
  for (const auto& a : job.argv) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, argv[0], &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  return rc == 0 ? pid : -1;
}

json summarize(const std::vector<double>& values) {
  if (values.empty()) return {{"n", 0}};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
  return {{"n", values.size()}, {"mean", mean}, {"std", sd}, {"values", values}};
}

}  // namespace

json cmd_bench(const std::vector<fs::path>& configs, const fs::path& out, const fs::path& exe,
               std::optional<std::uint64_t> seed_override) {
  if (configs.empty()) throw ConfigError("bench needs at least one --config");
  if (fs::exists(out / "bench.json")) throw ConfigError("bench already exists in " + out.string());
  int workers = 1;
  if (const char* env = std::getenv("DIFFT_WORKERS")) workers = std::max(1, std::atoi(env));

  std::vector<Job> jobs;
  std::vector<std::pair<std::string, std::vector<Variant>>> datasets;
  for (const auto& path : configs) {
    const auto rc = RunConfig::load(path);
    rc.validate();
    const auto name = rc.dataset.stem().string();
    datasets.emplace_back(name, rc.ablate_variants);
    const auto first = seed_override.value_or(rc.seed);
    for (int s = 0; s < rc.bench_seeds; ++s) {
      Job job;
      job.dataset = name;
      job.seed = first + static_cast<std::uint64_t>(s);
      job.dir = out / name / ("seed" + std::to_string(job.seed));
      fs::create_directories(job.dir);
      job.argv = {exe.string(), "ablate", "--config", fs::absolute(path).string(), "--seed",
                  std::to_string(job.seed), "--out", (job.dir / "run").string()};
      jobs.push_back(std::move(job));
    }
  }

  std::map<pid_t, std::size_t> running;
  std::size_t next = 0;
  while (next < jobs.size() || !running.empty()) {
    while (next < jobs.size() && static_cast<int>(running.size()) < workers) {
      const pid_t pid = spawn(jobs[next]);
      if (pid < 0) {
        jobs[next].status = 127;
      } else {
        running[pid] = next;
      }
      ++next;
    }
    if (running.empty()) continue;
    int status = 0;
    const pid_t done = waitpid(-1, &status, 0);
    if (done < 0) break;
    if (auto it = running.find(done); it != running.end()) {
      jobs[it->second].status = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
      running.erase(it);
    }
  }

  json table = json::array();
  std::ostringstream md;
  for (const auto& [name, variants] : datasets) {
    std::map<std::string, std::vector<double>> values;
    json failed = json::array();
    std::string metric;
    for (const auto& job : jobs) {
      if (job.dataset != name) continue;
      const auto path = job.dir / "run" / files::kAblation;
      if (job.status != 0 || !fs::exists(path)) {
        failed.push_back({{"seed", job.seed}, {"exit_code", job.status}});
        continue;
      }
      std::ifstream is(path);
      const auto ab = json::parse(is);
      metric = ab.at("metric").get<std::string>();
      values["RAW"].push_back(ab.at("raw_score").get<double>());
      for (const auto& row : ab.at("variants")) {
        values[row.at("variant").get<std::string>()].push_back(row.at("score").get<double>());
      }
    }
    json methods;
    std::vector<std::string> order = {"RAW"};
    for (auto v : variants) order.push_back(to_string(v));
    md << "| " << name << " (" << metric << ")";
    for (const auto& method : order) {
      methods[method] = summarize(values[method]);
      const auto& s = methods[method];
      md << " | " << method << ": ";
      if (s.at("n").get<std::size_t>() == 0) {
        md << "failed";
      } else {
        std::ostringstream cell;
        cell.setf(std::ios::fixed);
        cell.precision(4);
        cell << s.at("mean").get<double>() << " ± " << s.at("std").get<double>();
        md << cell.str();
      }
    }
    md << " |\n";
    table.push_back({{"dataset", name}, {"metric", metric}, {"methods", methods}, {"failed", failed}});
  }
  const json result = {{"workers", workers}, {"datasets", table}};
  fs::create_directories(out);
  write_text(out / "bench.json", result.dump(2) + "\n");
  write_text(out / "bench.md", md.str());
  return result;
}

DecodeTiming decode_timing(int total_tokens, int chunk_len, const VaeConfig& shape, int repeats) {
  const int chunks = (total_tokens + chunk_len - 1) / chunk_len;
  auto make = [&](DecoderKind kind) {
    VaeConfig c = shape;
    c.decoder = kind;
    c.T_max = std::max(c.T_max, chunks);
    c.L_max = std::max(c.L_max, chunk_len);
    c.ar_max_len = std::max(c.ar_length(), chunks * chunk_len + 1);
    torch::manual_seed(0);
    Vae v(c);
    v->eval();
    return v;
  };
  auto time = [&](Vae& v, DecodeStats& stats) {
    const auto z = torch::zeros({1, v->config().m, v->config().d});
    double best = 1e300;
    for (int r = 0; r < std::max(1, repeats); ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      stats = v->decode_forced(z, chunks, chunk_len);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
  };
  DecodeTiming out;
  auto sar = make(DecoderKind::SAR);
  auto ar = make(DecoderKind::AR);
  out.sar_seconds = time(sar, out.sar);
  out.ar_seconds = time(ar, out.ar);
  return out;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DatasetError*>(&e)) return 2;
  if (dynamic_cast<const HashMismatch*>(&e)) return 3;
  if (dynamic_cast<const DivergenceDetected*>(&e)) return 4;
  return 1;
}

}  // namespace difft
