#include "difft/collector.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace difft {

namespace {

float squash(double x) { return static_cast<float>(std::copysign(std::log1p(std::abs(x)), x)); }

std::vector<float> state_features(const CollectorState& state) {
  std::vector<float> out(state.size());
  std::transform(state.begin(), state.end(), out.begin(), squash);
  return out;
}

std::vector<float> column_features(std::span<const double> column) {
  const auto stats = describe(column);
  std::vector<float> out(stats.size());
  std::transform(stats.begin(), stats.end(), out.begin(), squash);
  return out;
}

std::vector<std::vector<float>> all_column_features(const Table& table) {
  std::vector<std::vector<float>> out;
  out.reserve(table.cols());
  for (std::size_t j = 0; j < table.cols(); ++j) out.push_back(column_features(table.col(j)));
  return out;
}

torch::nn::Sequential mlp(int in, int hidden, int out) {
  return torch::nn::Sequential(torch::nn::Linear(in, hidden), torch::nn::ReLU(),
                               torch::nn::Linear(hidden, hidden), torch::nn::ReLU(),
                               torch::nn::Linear(hidden, out));
}

torch::Tensor to_tensor(const std::vector<std::vector<float>>& rows) {
  const auto n = static_cast<std::int64_t>(rows.size());
  const auto d = static_cast<std::int64_t>(rows.front().size());
  auto t = torch::empty({n, d});
  auto acc = t.accessor<float, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < d; ++k) acc[i][k] = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  return t;
}

std::vector<float> concat(const std::vector<float>& a, const std::vector<float>& b) {
  std::vector<float> out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::vector<double> column_q(torch::nn::Sequential& net, const std::vector<float>& state,
                             const std::vector<std::vector<float>>& columns) {
  std::vector<std::vector<float>> rows;
  rows.reserve(columns.size());
  for (const auto& c : columns) rows.push_back(concat(state, c));
  torch::NoGradGuard no_grad;
  auto q = net->forward(to_tensor(rows)).squeeze(1).contiguous();
  return {q.data_ptr<float>(), q.data_ptr<float>() + q.numel()};
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <typename T>
void push_bounded(std::deque<T>& buffer, T item, std::size_t capacity) {
  buffer.push_back(std::move(item));
  while (buffer.size() > capacity) buffer.pop_front();
}

}  // namespace

CollectorState represent_state(const Table& table) {
  if (table.empty()) throw std::invalid_argument("represent_state: empty table");
  std::array<std::vector<double>, kNumStats> per_stat;
  for (std::size_t j = 0; j < table.cols(); ++j) {
    const auto stats = describe(table.col(j));
    for (std::size_t s = 0; s < kNumStats; ++s) per_stat[s].push_back(stats[s]);
  }
  CollectorState state{};
  for (std::size_t s = 0; s < kNumStats; ++s) {
    const auto summary = describe(per_stat[s]);
    std::copy(summary.begin(), summary.end(), state.begin() + static_cast<std::ptrdiff_t>(s * kNumStats));
  }
  return state;
}

FeatureSpace FeatureSpace::raw(const Table& X) {
  FeatureSpace space;
  space.table = X;
  for (std::size_t j = 0; j < X.cols(); ++j) {
    space.exprs.push_back(FeatureExpr::passthrough(static_cast<int>(j + 1)));
  }
  return space;
}

AgentTriple::AgentTriple(const CollectorConfig& config, std::uint64_t seed) : config_(config) {
  torch::manual_seed(seed);
  const int state_dim = static_cast<int>(kStateDim);
  const int col_dim = static_cast<int>(kNumStats);
  head_net_ = mlp(state_dim + col_dim, config.hidden, 1);
  op_net_ = mlp(state_dim, config.hidden, static_cast<int>(kNumOperators));
  tail_net_ = mlp(state_dim + col_dim, config.hidden, 1);
  const auto opts = torch::optim::AdamOptions(config.learning_rate);
  head_opt_ = std::make_unique<torch::optim::Adam>(head_net_->parameters(), opts);
  op_opt_ = std::make_unique<torch::optim::Adam>(op_net_->parameters(), opts);
  tail_opt_ = std::make_unique<torch::optim::Adam>(tail_net_->parameters(), opts);
}

std::size_t AgentTriple::pick_column(torch::nn::Sequential& net, const std::vector<float>& state,
                                     const std::vector<std::vector<float>>& columns,
                                     double epsilon, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < epsilon) {
    std::uniform_int_distribution<std::size_t> any(0, columns.size() - 1);
    return any(rng);
  }
  return argmax(column_q(net, state, columns));
}

StepAction AgentTriple::act(const CollectorState& state, const Table& table, double epsilon,
                            std::mt19937_64& rng) {
  const auto s = state_features(state);
  const auto columns = all_column_features(table);
  StepAction action;
  action.head = pick_column(head_net_, s, columns, epsilon, rng);

  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < epsilon) {
    std::uniform_int_distribution<std::size_t> any(0, kNumOperators - 1);
    action.op = static_cast<OpId>(any(rng));
  } else {
    action.op = static_cast<OpId>(argmax(op_values(state)));
  }

  action.tail = pick_column(tail_net_, s, columns, epsilon, rng);
  return action;
}

std::vector<double> AgentTriple::head_values(const CollectorState& state, const Table& table) {
  return column_q(head_net_, state_features(state), all_column_features(table));
}

std::vector<double> AgentTriple::op_values(const CollectorState& state) {
  torch::NoGradGuard no_grad;
  auto q = op_net_->forward(to_tensor({state_features(state)})).squeeze(0).contiguous();
  return {q.data_ptr<float>(), q.data_ptr<float>() + q.numel()};
}

void AgentTriple::remember(const CollectorState& state, const Table& table,
                           const StepAction& action, double r, const CollectorState& next_state,
                           const Table& next_table, bool done) {
  const auto s = state_features(state);
  const auto s_next = state_features(next_state);
  const auto next_columns = all_column_features(next_table);
  const auto capacity = static_cast<std::size_t>(config_.replay_capacity);
  const auto rf = static_cast<float>(r);

  push_bounded(head_buffer_,
               ColumnTransition{s, column_features(table.col(action.head)), rf, s_next,
                                next_columns, done},
               capacity);
  push_bounded(op_buffer_,
               OpTransition{s, static_cast<std::int64_t>(action.op), rf, s_next, done}, capacity);
  if (operator_spec(action.op).arity == 2) {
    push_bounded(tail_buffer_,
                 ColumnTransition{s, column_features(table.col(action.tail)), rf, s_next,
                                  next_columns, done},
                 capacity);
  }
}

double AgentTriple::learn_column(torch::nn::Sequential& net, torch::optim::Adam& opt,
                                 const std::deque<ColumnTransition>& buffer,
                                 std::mt19937_64& rng) {
  const auto batch = static_cast<std::size_t>(config_.batch_size);
  if (buffer.size() < batch) return 0.0;
  std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
  std::vector<const ColumnTransition*> sample;
  for (std::size_t i = 0; i < batch; ++i) sample.push_back(&buffer[pick(rng)]);

  std::vector<float> targets;
  for (const auto* tr : sample) {
    double target = tr->reward;
    if (!tr->done) {
      const auto q_next = column_q(net, tr->next_state, tr->next_columns);
      target += config_.gamma * *std::max_element(q_next.begin(), q_next.end());
    }
    targets.push_back(static_cast<float>(target));
  }
  std::vector<std::vector<float>> inputs;
  for (const auto* tr : sample) inputs.push_back(concat(tr->state, tr->column));

  auto q = net->forward(to_tensor(inputs)).squeeze(1);
  auto loss = torch::mse_loss(q, torch::tensor(targets));
  opt.zero_grad();
  loss.backward();
  opt.step();
  return loss.item<double>();
}

double AgentTriple::learn_op(std::mt19937_64& rng) {
  const auto batch = static_cast<std::size_t>(config_.batch_size);
  if (op_buffer_.size() < batch) return 0.0;
  std::uniform_int_distribution<std::size_t> pick(0, op_buffer_.size() - 1);
  std::vector<std::vector<float>> states, next_states;
  std::vector<std::int64_t> actions;
  std::vector<float> rewards, not_done;
  for (std::size_t i = 0; i < batch; ++i) {
    const auto& tr = op_buffer_[pick(rng)];
    states.push_back(tr.state);
    next_states.push_back(tr.next_state);
    actions.push_back(tr.action);
    rewards.push_back(tr.reward);
    not_done.push_back(tr.done ? 0.0f : 1.0f);
  }
  torch::Tensor target;
  {
    torch::NoGradGuard no_grad;
    auto q_next = std::get<0>(op_net_->forward(to_tensor(next_states)).max(1));
    target = torch::tensor(rewards) +
             static_cast<float>(config_.gamma) * torch::tensor(not_done) * q_next;
  }
  auto q = op_net_->forward(to_tensor(states)).gather(1, torch::tensor(actions).unsqueeze(1)).squeeze(1);
  auto loss = torch::mse_loss(q, target);
  op_opt_->zero_grad();
  loss.backward();
  op_opt_->step();
  return loss.item<double>();
}

double AgentTriple::learn(std::mt19937_64& rng) {
  const double h = learn_column(head_net_, *head_opt_, head_buffer_, rng);
  const double o = learn_op(rng);
  const double t = learn_column(tail_net_, *tail_opt_, tail_buffer_, rng);
  return (h + o + t) / 3.0;
}

StepResult step(AgentTriple& agents, const FeatureSpace& space, double epsilon,
                std::mt19937_64& rng, int max_chunk_len) {
  if (space.table.cols() == 0) throw std::invalid_argument("step: empty feature space");
  if (max_chunk_len < 2) throw std::invalid_argument("step: max_chunk_len must be >= 2");

  const auto state = represent_state(space.table);
  std::uniform_int_distribution<std::size_t> any_column(0, space.table.cols() - 1);
  std::uniform_int_distribution<std::size_t> any_op(0, kNumOperators - 1);

  auto compose = [&](const StepAction& a) {
    std::vector<Token> tokens = space.exprs[a.head].tokens();
    if (operator_spec(a.op).arity == 2) {
      const auto& tail = space.exprs[a.tail].tokens();
      tokens.insert(tokens.end(), tail.begin(), tail.end());
    }
    tokens.push_back(Token::op_ref(a.op));
    return tokens;
  };

  StepAction action = agents.act(state, space.table, epsilon, rng);
  std::vector<Token> tokens = compose(action);
  constexpr int kMaxRedraws = 64;
  for (int attempt = 0; static_cast<int>(tokens.size()) > max_chunk_len; ++attempt) {
    if (attempt < kMaxRedraws) {
      action = {any_column(rng), static_cast<OpId>(any_op(rng)), any_column(rng)};
    } else {
      // A unary operator on a raw column always fits.
      std::vector<std::size_t> raw;
      for (std::size_t j = 0; j < space.exprs.size(); ++j) {
        if (space.exprs[j].is_passthrough()) raw.push_back(j);
      }
      std::uniform_int_distribution<std::size_t> pick(0, raw.size() - 1);
      action = {raw[pick(rng)], OpId::Log, 0};
    }
    tokens = compose(action);
  }

  const auto head = space.table.col(action.head);
  std::vector<double> column(head.begin(), head.end());
  if (operator_spec(action.op).arity == 2) {
    const auto tail = space.table.col(action.tail);
    for (std::size_t i = 0; i < column.size(); ++i) {
      column[i] = apply_binary(action.op, column[i], tail[i]);
    }
  } else {
    for (auto& v : column) v = apply_unary(action.op, v);
  }

  StepResult result{action, FeatureExpr(std::move(tokens)), space};
  result.space.table.append_column(column);
  result.space.exprs.push_back(result.feature);
  return result;
}

void normalize_records(std::vector<TrainingRecord>& records) {
  if (records.empty()) return;
  const auto [lo, hi] = std::minmax_element(records.begin(), records.end(),
                                            [](const auto& a, const auto& b) { return a.y_raw < b.y_raw; });
  const double min = lo->y_raw, max = hi->y_raw;
  for (auto& r : records) r.y_norm = max > min ? (r.y_raw - min) / (max - min) : 0.0;
}

CollectResult collect(const Dataset& ds, const CollectorConfig& config) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  auto over_budget = [&] {
    return config.time_budget_seconds > 0.0 &&
           std::chrono::duration<double>(Clock::now() - start).count() > config.time_budget_seconds;
  };

  std::mt19937_64 rng(config.seed);
  AgentTriple agents(config, config.seed);
  std::map<std::string, double> score_cache;
  auto score = [&](const FeatureSpace& space) {
    const auto key = serialize(space.feature_set());
    if (auto it = score_cache.find(key); it != score_cache.end()) return it->second;
    const double y = score_table(ds, space.table, config.seed, config.scoring).value;
    score_cache.emplace(key, y);
    return y;
  };

  CollectResult result;
  const auto raw = FeatureSpace::raw(ds.X);
  const double y_raw = score(raw);
  result.records.push_back({raw.feature_set(), y_raw, 0.0});

  const double half = std::max(1.0, config.episodes / 2.0);
  for (int ep = 0; ep < config.episodes && !result.budget_exceeded; ++ep) {
    const double frac = std::min(1.0, ep / half);
    const double epsilon = config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac;

    FeatureSpace space = raw;
    auto state = represent_state(space.table);
    double y_prev = y_raw;
    double episode_return = 0.0;
    for (int t = 0; t < config.steps; ++t) {
      if (over_budget()) {
        result.budget_exceeded = true;
        break;
      }
      auto next = step(agents, space, epsilon, rng, config.max_chunk_len);
      const double y = score(next.space);
      const double r = reward(y, y_prev);
      const auto next_state = represent_state(next.space.table);
      agents.remember(state, space.table, next.action, r, next_state, next.space.table,
                      t + 1 == config.steps);
      agents.learn(rng);

      result.records.push_back({next.space.feature_set(), y, 0.0});
      episode_return += r;
      space = std::move(next.space);
      state = next_state;
      y_prev = y;
    }
    result.episode_returns.push_back(episode_return);
  }

  result.candidates = result.records.size();
  std::set<std::string> seen;
  std::vector<TrainingRecord> unique;
  for (auto& r : result.records) {
    if (seen.insert(serialize(r.fs)).second) unique.push_back(std::move(r));
  }
  result.records = std::move(unique);
  normalize_records(result.records);
  return result;
}

void write_corpus(const std::filesystem::path& path, const std::vector<TrainingRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::json line = {{"sequence", serialize(r.fs)}, {"y_raw", r.y_raw}, {"y_norm", r.y_norm}};
    out << line.dump() << '\n';
  }
}

std::vector<TrainingRecord> read_corpus(const std::filesystem::path& path, int n_features) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<TrainingRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    records.push_back({parse(j.at("sequence").get<std::string>(), n_features),
                       j.at("y_raw").get<double>(), j.at("y_norm").get<double>()});
  }
  return records;
}

}  // namespace difft
