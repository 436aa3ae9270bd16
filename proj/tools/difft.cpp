#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "difft/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out;
};

difft::RunConfig resolve(const Overrides& o) {
  auto c = difft::RunConfig::load(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.variant.empty()) c.variant = difft::variant_from_string(o.variant);
  if (!o.out.empty()) c.out = o.out;
  c.validate();
  torch::set_num_threads(c.threads);
  return c;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run configuration (INI)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Base seed (overrides run.seed)");
  cmd->add_option("--variant", o.variant, "full, AR, NAR, NoR or CS (overrides run.variant)");
  cmd->add_option("--out", o.out, "Run directory (overrides run.out)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reward-guided latent diffusion for tabular feature transformation"};
  app.require_subcommand(1);

  Overrides o;
  std::vector<std::string> bench_configs;
  std::string bench_out = "runs/bench";
  std::optional<std::uint64_t> bench_seed;

  auto* collect = app.add_subcommand("collect", "Explore transformations and write the training corpus");
  auto* train_vae = app.add_subcommand("train-vae", "Train the sequence VAE on the corpus");
  auto* train_ldm = app.add_subcommand("train-ldm", "Train the table-conditioned latent diffusion model");
  auto* generate = app.add_subcommand("generate", "Sample, decode and score feature sets");
  auto* ablate = app.add_subcommand("ablate", "Run every configured variant and compare them");
  for (auto* cmd : {collect, train_vae, train_ldm, generate, ablate}) add_common(cmd, o);

  auto* bench = app.add_subcommand("bench", "Run ablations over datasets and seeds in worker processes");
  bench->add_option("--config", bench_configs, "One configuration per dataset")->required()->check(CLI::ExistingFile);
  bench->add_option("--seed", bench_seed, "First seed (overrides run.seed)");
  bench->add_option("--out", bench_out, "Benchmark directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*bench) {
      torch::set_num_threads(1);
      const std::vector<std::filesystem::path> paths(bench_configs.begin(), bench_configs.end());
      const auto result = difft::cmd_bench(paths, bench_out, std::filesystem::canonical("/proc/self/exe"), bench_seed);
      std::cout << result.dump(2) << '\n';
      return 0;
    }
    const auto config = resolve(o);
    if (*collect) {
      std::cout << difft::cmd_collect(config).metrics.dump(2) << '\n';
    } else if (*train_vae) {
      std::cout << difft::cmd_train_vae(config).metrics.dump(2) << '\n';
    } else if (*train_ldm) {
      std::cout << difft::cmd_train_ldm(config).metrics.dump(2) << '\n';
    } else if (*generate) {
      std::cout << difft::cmd_generate(config).metrics.dump(2) << '\n';
    } else if (*ablate) {
      std::cout << difft::cmd_ablate(config).dump(2) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return difft::exit_code_for(e);
  }
  return 0;
}
