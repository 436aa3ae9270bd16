#include "difft/scoring.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace difft {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t row_hash(const Dataset& ds, std::size_t row, std::uint64_t seed) {
  std::uint64_t h = mix(seed);
  for (std::size_t j = 0; j < ds.cols(); ++j) h = mix(h ^ std::bit_cast<std::uint64_t>(ds.X(row, j)));
  return mix(h ^ std::bit_cast<std::uint64_t>(ds.y[row]));
}

}  // namespace

std::string metric_name(MetricKind metric) {
  return metric == MetricKind::F1 ? "f1" : "one_minus_rae";
}

MetricKind metric_for(TaskType task) {
  return task == TaskType::Classification ? MetricKind::F1 : MetricKind::OneMinusRae;
}

double metric_f1(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size() || y_true.empty()) {
    throw std::invalid_argument("metric_f1: lengths must match and be >= 1");
  }
  std::map<double, std::array<double, 3>> counts;  // tp, fp, fn per label
  std::map<double, double> support;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    support[y_true[i]] += 1.0;
    if (y_true[i] == y_pred[i]) {
      counts[y_true[i]][0] += 1.0;
    } else {
      counts[y_pred[i]][1] += 1.0;
      counts[y_true[i]][2] += 1.0;
    }
  }
  double weighted = 0.0;
  for (const auto& [label, n] : support) {
    const auto& c = counts[label];
    const double denom = 2.0 * c[0] + c[1] + c[2];
    weighted += n * (denom > 0.0 ? 2.0 * c[0] / denom : 0.0);
  }
  return weighted / static_cast<double>(y_true.size());
}

double metric_one_minus_rae(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size() || y_true.empty()) {
    throw std::invalid_argument("metric_one_minus_rae: lengths must match and be >= 1");
  }
  const double mean =
      std::accumulate(y_true.begin(), y_true.end(), 0.0) / static_cast<double>(y_true.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    num += std::abs(y_true[i] - y_pred[i]);
    den += std::abs(y_true[i] - mean);
  }
  if (den == 0.0) return 0.0;
  return 1.0 - num / den;
}

std::vector<int> fold_assignment(const Dataset& ds, std::uint64_t seed, int folds) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  keyed.reserve(ds.rows());
  for (std::size_t i = 0; i < ds.rows(); ++i) keyed.emplace_back(row_hash(ds, i, seed), i);
  std::sort(keyed.begin(), keyed.end());
  std::vector<int> fold(ds.rows());
  for (std::size_t rank = 0; rank < keyed.size(); ++rank) {
    fold[keyed[rank].second] = static_cast<int>(rank % static_cast<std::size_t>(folds));
  }
  return fold;
}

EvalResult score_table(const Dataset& ds, const Table& X, std::uint64_t seed,
                       const ScoringOptions& options) {
  if (X.rows() != ds.rows()) throw std::invalid_argument("score_table: row mismatch");
  if (ds.rows() < 20) {
    throw DatasetError("dataset '" + ds.name + "' has " + std::to_string(ds.rows()) +
                       " rows; scoring needs at least 20");
  }
  if (ds.task == TaskType::Classification) {
    std::set<double> labels(ds.y.begin(), ds.y.end());
    if (labels.size() < 2) throw DegenerateTarget("classification target has a single class");
  }

  // Canonical row order: by hash, so training sets are permutation invariant.
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t i = 0; i < ds.rows(); ++i) order.emplace_back(row_hash(ds, i, seed), i);
  std::sort(order.begin(), order.end());

  EvalResult result;
  result.metric = metric_for(ds.task);
  for (int f = 0; f < options.folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      (static_cast<int>(rank % static_cast<std::size_t>(options.folds)) == f ? test : train)
          .push_back(order[rank].second);
    }
    std::vector<double> y_train, y_test;
    for (auto i : train) y_train.push_back(ds.y[i]);
    for (auto i : test) y_test.push_back(ds.y[i]);

    ForestOptions forest = options.forest;
    forest.seed = mix(seed ^ mix(options.forest.seed + static_cast<std::uint64_t>(f)));
    const auto model = RandomForest::fit(X.select_rows(train), y_train, ds.task,
                                         std::max(ds.n_classes, 1), forest);
    const auto pred = model.predict(X.select_rows(test));
    result.per_fold.push_back(result.metric == MetricKind::F1 ? metric_f1(y_test, pred)
                                                              : metric_one_minus_rae(y_test, pred));
  }
  result.value = std::accumulate(result.per_fold.begin(), result.per_fold.end(), 0.0) /
                 static_cast<double>(result.per_fold.size());
  return result;
}

EvalResult downstream_score(const Dataset& ds, RawFeatures, std::uint64_t seed,
                            const ScoringOptions& options) {
  return score_table(ds, ds.X, seed, options);
}

EvalResult downstream_score(const Dataset& ds, const FeatureSet& fs, std::uint64_t seed,
                            const ScoringOptions& options) {
  return score_table(ds, evaluate(fs, ds.X), seed, options);
}

nlohmann::json result_record(const std::string& dataset, const std::string& method,
                             const EvalResult& result, std::uint64_t seed) {
  return {{"dataset", dataset},
          {"method", method},
          {"metric", metric_name(result.metric)},
          {"value", result.value},
          {"seed", seed}};
}

}  // namespace difft
