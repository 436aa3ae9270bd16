#include "difft/random_forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace difft {

class RandomForest::Builder {
 public:
  Builder(const Table& X, std::span<const double> y, TaskType task, int n_classes,
          const ForestOptions& options, std::mt19937_64& rng)
      : X_(X), y_(y), task_(task), n_classes_(n_classes), options_(options), rng_(rng) {
    const int p = static_cast<int>(X.cols());
    mtry_ = options.max_features > 0
                ? std::min(options.max_features, p)
                : (task == TaskType::Classification
                       ? std::max(1, static_cast<int>(std::sqrt(static_cast<double>(p))))
                       : std::max(1, p / 3));
  }

  Tree build(std::vector<std::size_t> sample) {
    Tree tree;
    grow(tree, sample, 0);
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  int grow(Tree& tree, std::vector<std::size_t>& idx, int depth) {
    const int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});

    const bool depth_capped = options_.max_depth > 0 && depth >= options_.max_depth;
    Split split;
    if (!depth_capped && static_cast<int>(idx.size()) >= options_.min_samples_split && !pure(idx)) {
      split = best_split(idx);
    }
    if (split.feature < 0) {
      make_leaf(tree, node_id, idx);
      return node_id;
    }

    auto column = X_.col(static_cast<std::size_t>(split.feature));
    std::vector<std::size_t> left, right;
    for (auto i : idx) (column[i] <= split.threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();

    tree.nodes[node_id].feature = split.feature;
    tree.nodes[node_id].threshold = split.threshold;
    const int l = grow(tree, left, depth + 1);
    const int r = grow(tree, right, depth + 1);
    tree.nodes[node_id].left = l;
    tree.nodes[node_id].right = r;
    return node_id;
  }

  bool pure(const std::vector<std::size_t>& idx) const {
    const double first = y_[idx.front()];
    return std::all_of(idx.begin(), idx.end(), [&](auto i) { return y_[i] == first; });
  }

  void make_leaf(Tree& tree, int node_id, const std::vector<std::size_t>& idx) {
    tree.nodes[node_id].leaf_offset = static_cast<int>(tree.leaf_values.size());
    if (task_ == TaskType::Classification) {
      std::vector<double> dist(static_cast<std::size_t>(n_classes_), 0.0);
      for (auto i : idx) dist[static_cast<std::size_t>(y_[i])] += 1.0;
      for (auto& d : dist) d /= static_cast<double>(idx.size());
      tree.leaf_values.insert(tree.leaf_values.end(), dist.begin(), dist.end());
    } else {
      double sum = 0.0;
      for (auto i : idx) sum += y_[i];
      tree.leaf_values.push_back(sum / static_cast<double>(idx.size()));
    }
  }

  Split best_split(const std::vector<std::size_t>& idx) {
    std::vector<int> features(X_.cols());
    std::iota(features.begin(), features.end(), 0);
    std::shuffle(features.begin(), features.end(), rng_);

    Split best;
    int tried = 0;
    for (int f : features) {
      // Keep drawing past mtry until some valid split exists.
      if (tried >= mtry_ && best.feature >= 0) break;
      ++tried;
      Split s = task_ == TaskType::Classification ? split_gini(idx, f) : split_variance(idx, f);
      if (s.feature >= 0 && s.gain > best.gain) best = s;
    }
    return best;
  }

  std::vector<std::pair<double, double>> sorted_pairs(const std::vector<std::size_t>& idx,
                                                      int f) const {
    auto column = X_.col(static_cast<std::size_t>(f));
    std::vector<std::pair<double, double>> pairs;
    pairs.reserve(idx.size());
    for (auto i : idx) pairs.emplace_back(column[i], y_[i]);
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return pairs;
  }

  Split split_gini(const std::vector<std::size_t>& idx, int f) const {
    const auto pairs = sorted_pairs(idx, f);
    if (pairs.front().first == pairs.back().first) return {};
    const auto k = static_cast<std::size_t>(n_classes_);
    std::vector<double> left(k, 0.0), right(k, 0.0);
    for (const auto& pr : pairs) right[static_cast<std::size_t>(pr.second)] += 1.0;
    const double n = static_cast<double>(pairs.size());
    auto sum_sq = [](const std::vector<double>& c) {
      double s = 0.0;
      for (double v : c) s += v * v;
      return s;
    };
    const double parent = 1.0 - sum_sq(right) / (n * n);
    double left_sq = 0.0, right_sq = sum_sq(right);

    Split best;
    const auto min_leaf = static_cast<std::size_t>(options_.min_samples_leaf);
    for (std::size_t i = 0; i + 1 < pairs.size(); ++i) {
      const auto c = static_cast<std::size_t>(pairs[i].second);
      left_sq += 2.0 * left[c] + 1.0;
      right_sq -= 2.0 * right[c] - 1.0;
      left[c] += 1.0;
      right[c] -= 1.0;
      if (pairs[i].first == pairs[i + 1].first) continue;
      const std::size_t nl = i + 1, nr = pairs.size() - nl;
      if (nl < min_leaf || nr < min_leaf) continue;
      const double dl = static_cast<double>(nl), dr = static_cast<double>(nr);
      const double gini_l = 1.0 - left_sq / (dl * dl);
      const double gini_r = 1.0 - right_sq / (dr * dr);
      const double gain = parent - (dl * gini_l + dr * gini_r) / n;
      if (gain > best.gain + 1e-15) {
        best = {f, 0.5 * (pairs[i].first + pairs[i + 1].first), gain};
      }
    }
    return best;
  }

  Split split_variance(const std::vector<std::size_t>& idx, int f) const {
    const auto pairs = sorted_pairs(idx, f);
    if (pairs.front().first == pairs.back().first) return {};
    double total = 0.0;
    for (const auto& pr : pairs) total += pr.second;
    const double n = static_cast<double>(pairs.size());
    const double parent_term = total * total / n;

    Split best;
    double left_sum = 0.0;
    const auto min_leaf = static_cast<std::size_t>(options_.min_samples_leaf);
    for (std::size_t i = 0; i + 1 < pairs.size(); ++i) {
      left_sum += pairs[i].second;
      if (pairs[i].first == pairs[i + 1].first) continue;
      const std::size_t nl = i + 1, nr = pairs.size() - nl;
      if (nl < min_leaf || nr < min_leaf) continue;
      const double right_sum = total - left_sum;
      // SSE reduction = sum_l^2/n_l + sum_r^2/n_r - sum^2/n
      const double gain = (left_sum * left_sum / static_cast<double>(nl) +
                           right_sum * right_sum / static_cast<double>(nr) - parent_term) /
                          n;
      if (gain > best.gain + 1e-15) {
        best = {f, 0.5 * (pairs[i].first + pairs[i + 1].first), gain};
      }
    }
    return best;
  }

  const Table& X_;
  std::span<const double> y_;
  TaskType task_;
  int n_classes_;
  const ForestOptions& options_;
  std::mt19937_64& rng_;
  int mtry_ = 1;
};

RandomForest RandomForest::fit(const Table& X, std::span<const double> y, TaskType task,
                               int n_classes, const ForestOptions& options) {
  if (X.rows() == 0 || X.rows() != y.size()) throw std::invalid_argument("forest: bad shapes");
  if (task == TaskType::Classification && n_classes < 1) {
    throw std::invalid_argument("forest: classification needs n_classes >= 1");
  }
  RandomForest forest;
  forest.task_ = task;
  forest.n_classes_ = n_classes;
  forest.trees_.reserve(static_cast<std::size_t>(options.n_trees));

  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> draw(0, X.rows() - 1);
  for (int t = 0; t < options.n_trees; ++t) {
    std::vector<std::size_t> sample(X.rows());
    for (auto& s : sample) s = draw(rng);
    Builder builder(X, y, task, n_classes, options, rng);
    forest.trees_.push_back(builder.build(std::move(sample)));
  }
  return forest;
}

const double* RandomForest::leaf_for(const Tree& tree, const Table& X, std::size_t row) const {
  int node = 0;
  while (tree.nodes[static_cast<std::size_t>(node)].feature >= 0) {
    const auto& n = tree.nodes[static_cast<std::size_t>(node)];
    node = X(row, static_cast<std::size_t>(n.feature)) <= n.threshold ? n.left : n.right;
  }
  return tree.leaf_values.data() + tree.nodes[static_cast<std::size_t>(node)].leaf_offset;
}

std::vector<double> RandomForest::predict(const Table& X) const {
  std::vector<double> out(X.rows(), 0.0);
  if (task_ == TaskType::Regression) {
    for (std::size_t i = 0; i < X.rows(); ++i) {
      double sum = 0.0;
      for (const auto& tree : trees_) sum += *leaf_for(tree, X, i);
      out[i] = sum / static_cast<double>(trees_.size());
    }
    return out;
  }
  std::vector<double> votes(static_cast<std::size_t>(n_classes_));
  for (std::size_t i = 0; i < X.rows(); ++i) {
    std::fill(votes.begin(), votes.end(), 0.0);
    for (const auto& tree : trees_) {
      const double* dist = leaf_for(tree, X, i);
      for (std::size_t c = 0; c < votes.size(); ++c) votes[c] += dist[c];
    }
    out[i] = static_cast<double>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

}  // namespace difft
