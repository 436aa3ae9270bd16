#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "difft/dataset.hpp"
#include "difft/table.hpp"

namespace difft {

struct ForestOptions {
  int n_trees = 100;
  int max_depth = 0;  // 0 = grow until pure
  int min_samples_split = 2;
  int min_samples_leaf = 1;
  /// Features tried per split; 0 selects sqrt(p) for classification and
  /// max(1, p/3) for regression.
  int max_features = 0;
  std::uint64_t seed = 0;
};

/// Bagged CART ensemble. Classification averages leaf class distributions,
/// regression averages leaf means.
class RandomForest {
 public:
  static RandomForest fit(const Table& X, std::span<const double> y, TaskType task,
                          int n_classes, const ForestOptions& options);

  std::vector<double> predict(const Table& X) const;

 private:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    int leaf_offset = 0;
  };
  struct Tree {
    std::vector<Node> nodes;
    std::vector<double> leaf_values;
  };
  class Builder;

  const double* leaf_for(const Tree& tree, const Table& X, std::size_t row) const;

  TaskType task_ = TaskType::Classification;
  int n_classes_ = 0;
  std::vector<Tree> trees_;
};

}  // namespace difft
