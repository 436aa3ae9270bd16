#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "difft/dataset.hpp"
#include "difft/expr.hpp"
#include "difft/scoring.hpp"
#include "difft/stats.hpp"

namespace difft {

inline constexpr std::size_t kStateDim = kNumStats * kNumStats;
using CollectorState = std::array<double, kStateDim>;

/// The seven statistics of every column, each summarized across columns by
/// the same seven statistics (stat-major: entry [s * 7 + k] is statistic k of
/// the column-wise statistic s).
CollectorState represent_state(const Table& table);

/// R(t) = y_t - y_{t-1}
inline double reward(double y_t, double y_prev) { return y_t - y_prev; }

struct TrainingRecord {
  FeatureSet fs;
  double y_raw = 0.0;
  double y_norm = 0.0;
};

struct CollectorConfig {
  int episodes = 30;
  int steps = 8;
  int max_chunk_len = 9;
  double gamma = 0.9;
  double epsilon_start = 1.0;
  double epsilon_end = 0.1;
  int replay_capacity = 4096;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int hidden = 64;
  std::uint64_t seed = 0;
  double time_budget_seconds = 0.0;  // 0 = unlimited
  ScoringOptions scoring;
};

/// Current columns plus the expression (over raw features) defining each.
struct FeatureSpace {
  Table table;
  std::vector<FeatureExpr> exprs;

  static FeatureSpace raw(const Table& X);
  FeatureSet feature_set() const { return FeatureSet(exprs); }
};

struct StepAction {
  std::size_t head = 0;
  OpId op = OpId::Add;
  std::size_t tail = 0;
};

struct StepResult {
  StepAction action;
  FeatureExpr feature;
  FeatureSpace space;  // input space with the new column appended
};

/// Head, operation and tail agents: Q-networks over the 49-dim state with one
/// replay buffer each. Column agents score (state, column statistics) pairs
/// because their action set grows with the table.
class AgentTriple {
 public:
  AgentTriple(const CollectorConfig& config, std::uint64_t seed);

  StepAction act(const CollectorState& state, const Table& table, double epsilon,
                 std::mt19937_64& rng);

  /// Greedy Q-values, exposed for tests.
  std::vector<double> head_values(const CollectorState& state, const Table& table);
  std::vector<double> op_values(const CollectorState& state);

  void remember(const CollectorState& state, const Table& table, const StepAction& action,
                double r, const CollectorState& next_state, const Table& next_table, bool done);

  /// One TD(0) minibatch update per agent; returns the mean squared TD error.
  double learn(std::mt19937_64& rng);

  std::size_t replay_size() const { return op_buffer_.size(); }

 private:
  struct ColumnTransition {
    std::vector<float> state;
    std::vector<float> column;
    float reward;
    std::vector<float> next_state;
    std::vector<std::vector<float>> next_columns;
    bool done;
  };
  struct OpTransition {
    std::vector<float> state;
    std::int64_t action;
    float reward;
    std::vector<float> next_state;
    bool done;
  };

  double learn_column(torch::nn::Sequential& net, torch::optim::Adam& opt,
                      const std::deque<ColumnTransition>& buffer, std::mt19937_64& rng);
  double learn_op(std::mt19937_64& rng);
  std::size_t pick_column(torch::nn::Sequential& net, const std::vector<float>& state,
                          const std::vector<std::vector<float>>& columns, double epsilon,
                          std::mt19937_64& rng);

  CollectorConfig config_;
  torch::nn::Sequential head_net_{nullptr};
  torch::nn::Sequential op_net_{nullptr};
  torch::nn::Sequential tail_net_{nullptr};
  std::unique_ptr<torch::optim::Adam> head_opt_;
  std::unique_ptr<torch::optim::Adam> op_opt_;
  std::unique_ptr<torch::optim::Adam> tail_opt_;
  std::deque<ColumnTransition> head_buffer_;
  std::deque<ColumnTransition> tail_buffer_;
  std::deque<OpTransition> op_buffer_;
};

/// Applies one agent action: picks head/op/tail, composes the new postfix
/// feature, and appends its column. Features longer than max_chunk_len are
/// rejected and the action is redrawn uniformly.
StepResult step(AgentTriple& agents, const FeatureSpace& space, double epsilon,
                std::mt19937_64& rng, int max_chunk_len);

struct CollectResult {
  std::vector<TrainingRecord> records;  // deduplicated, y_norm filled
  std::size_t candidates = 0;           // records before deduplication
  bool budget_exceeded = false;
  std::vector<double> episode_returns;
};

/// Episodic multi-agent exploration. Every visited feature set (raw
/// passthrough chunks plus generated chunks) becomes a record, together with
/// the raw baseline.
CollectResult collect(const Dataset& ds, const CollectorConfig& config);

/// Min-max normalizes y_raw into y_norm (all zeros for a constant corpus).
void normalize_records(std::vector<TrainingRecord>& records);

/// Line-delimited JSON: {"sequence", "y_raw", "y_norm"}.
void write_corpus(const std::filesystem::path& path, const std::vector<TrainingRecord>& records);
std::vector<TrainingRecord> read_corpus(const std::filesystem::path& path, int n_features);

}  // namespace difft
