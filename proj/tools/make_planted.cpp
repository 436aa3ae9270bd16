#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "difft/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a planted-interaction dataset as CSV"};
  std::string out;
  std::size_t rows = 200, cols = 8;
  std::string task = "classification";
  std::uint64_t seed = 0;
  app.add_option("--out", out, "Output CSV")->required();
  app.add_option("--rows", rows, "Row count");
  app.add_option("--cols", cols, "Feature count (at least 3)");
  app.add_option("--task", task, "classification or regression")->check(CLI::IsMember({"classification", "regression"}));
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);
  if (cols < 3 || rows < 20) {
    std::cerr << "need at least 3 columns and 20 rows\n";
    return 2;
  }
  const auto ds = difft::planted(rows, cols, difft::task_from_string(task), seed);
  difft::write_csv(out, ds.X, ds.feature_names, ds.y);
  return 0;
}
