#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "difft/dataset.hpp"
#include "difft/expr.hpp"
#include "difft/random_forest.hpp"

namespace difft {

enum class MetricKind { F1, OneMinusRae };

std::string metric_name(MetricKind metric);
MetricKind metric_for(TaskType task);

struct EvalResult {
  MetricKind metric = MetricKind::F1;
  double value = 0.0;
  std::vector<double> per_fold;
};

class DegenerateTarget : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Support-weighted F1 over the labels present in y_true or y_pred.
double metric_f1(std::span<const double> y_true, std::span<const double> y_pred);

/// 1 - sum|y - yhat| / sum|y - mean(y)|; 0 when y_true is constant.
double metric_one_minus_rae(std::span<const double> y_true, std::span<const double> y_pred);

struct ScoringOptions {
  int folds = 5;
  ForestOptions forest;
};

/// Tag for scoring the untransformed table.
struct RawFeatures {};
inline constexpr RawFeatures kRaw{};

/// Fold id per row. Rows are ranked by a seeded hash of their raw content, so
/// the assignment does not depend on row order.
std::vector<int> fold_assignment(const Dataset& ds, std::uint64_t seed, int folds);

/// Mean k-fold CV metric of a random forest on `X` (rows aligned with ds).
EvalResult score_table(const Dataset& ds, const Table& X, std::uint64_t seed,
                       const ScoringOptions& options = {});
EvalResult downstream_score(const Dataset& ds, RawFeatures, std::uint64_t seed,
                            const ScoringOptions& options = {});
EvalResult downstream_score(const Dataset& ds, const FeatureSet& fs, std::uint64_t seed,
                            const ScoringOptions& options = {});

/// {dataset, method, metric, value, seed}
nlohmann::json result_record(const std::string& dataset, const std::string& method,
                             const EvalResult& result, std::uint64_t seed);

}  // namespace difft
