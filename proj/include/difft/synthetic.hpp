#pragma once

#include <cmath>
#include <random>
#include <string>

#include "difft/dataset.hpp"

namespace difft {

/// Gaussian features whose target mixes a product, a sine and a difference of
/// columns, so engineered features help a tree model.
inline Dataset planted(std::size_t rows, std::size_t cols, TaskType task,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.name = task == TaskType::Classification ? "planted_cls" : "planted_reg";
  ds.task = task;
  ds.X = Table(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) ds.X(i, j) = normal(rng);
    const double signal = ds.X(i, 0) * ds.X(i, 1) + std::sin(2.0 * ds.X(i, 2)) +
                          (cols > 4 ? ds.X(i, 3) - ds.X(i, 4) : 0.0);
    ds.y.push_back(task == TaskType::Classification ? (signal > 0 ? 1.0 : 0.0)
                                                           : signal + 0.1 * normal(rng));
  }
  ds.n_classes = task == TaskType::Classification ? 2 : 0;
  for (std::size_t j = 0; j < cols; ++j) ds.feature_names.push_back("x" + std::to_string(j + 1));
  return ds;
}

}  // namespace difft
