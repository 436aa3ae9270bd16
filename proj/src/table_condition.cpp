#include "difft/table_condition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "difft/stats.hpp"

namespace difft {

FeatureGraph build_graph(const Table& table) {
  if (table.cols() < 1 || table.rows() < 2) {
    throw std::invalid_argument("build_graph: need at least one column and two rows");
  }
  const auto n = table.cols();
  std::vector<StatVector> stats(n);
  for (std::size_t j = 0; j < n; ++j) stats[j] = describe(table.col(j));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (stats[a] != stats[b]) return stats[a] < stats[b];
    const auto ca = table.col(a), cb = table.col(b);
    return std::lexicographical_compare(ca.begin(), ca.end(), cb.begin(), cb.end());
  });

  const auto N = static_cast<std::int64_t>(n);
  auto A = torch::eye(N, torch::kDouble);
  auto acc = A.accessor<double, 2>();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double w = std::abs(pearson(table.col(order[i]), table.col(order[j])));
      acc[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(j)] = w;
      acc[static_cast<std::int64_t>(j)][static_cast<std::int64_t>(i)] = w;
    }
  }

  auto H = torch::zeros({N, static_cast<std::int64_t>(kNumStats)}, torch::kDouble);
  auto h = H.accessor<double, 2>();
  for (std::size_t s = 0; s < kNumStats; ++s) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += stats[order[i]][s];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += std::pow(stats[order[i]][s] - mean, 2);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      h[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(s)] =
          sd > 0.0 && std::isfinite(sd) ? (stats[order[i]][s] - mean) / sd : 0.0;
    }
  }
  return {A, A.sum(1), H};
}

torch::Tensor normalize_adjacency(const torch::Tensor& A_hat) {
  auto inv_sqrt = A_hat.sum(-1).clamp_min(1e-12).rsqrt();
  return inv_sqrt.unsqueeze(-1) * A_hat * inv_sqrt.unsqueeze(-2);
}

GraphBatch batch_graphs(std::span<const FeatureGraph> graphs, torch::Dtype dtype) {
  if (graphs.empty()) throw std::invalid_argument("batch_graphs: empty batch");
  const auto B = static_cast<std::int64_t>(graphs.size());
  std::int64_t N = 0;
  for (const auto& g : graphs) N = std::max(N, g.nodes());
  GraphBatch batch;
  batch.H0 = torch::zeros({B, N, static_cast<std::int64_t>(kNumStats)}, dtype);
  batch.A_norm = torch::zeros({B, N, N}, dtype);
  batch.mask = torch::zeros({B, N}, dtype);
  using torch::indexing::Slice;
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& g = graphs[static_cast<std::size_t>(b)];
    const auto n = g.nodes();
    batch.H0.index_put_({b, Slice(0, n)}, g.H0.to(dtype));
    batch.A_norm.index_put_({b, Slice(0, n), Slice(0, n)}, normalize_adjacency(g.A_hat).to(dtype));
    batch.mask.index_put_({b, Slice(0, n)}, 1.0);
  }
  return batch;
}

GcnLayerImpl::GcnLayerImpl(int in, int out) {
  linear_ = register_module("linear", torch::nn::Linear(in, out));
}

torch::Tensor GcnLayerImpl::forward(const torch::Tensor& H, const torch::Tensor& A_norm) {
  return torch::relu(linear_(torch::matmul(A_norm, H)));
}

TableConditionImpl::TableConditionImpl(ConditionConfig config) : config_(config) {
  gcn1_ = register_module("gcn1", GcnLayer(static_cast<int>(kNumStats), config_.hidden));
  gcn2_ = register_module("gcn2", GcnLayer(config_.hidden, config_.d_g));
  project_ = register_module(
      "project", torch::nn::Sequential(torch::nn::Linear(config_.d_g, config_.d_c), torch::nn::SiLU(),
                                       torch::nn::Linear(config_.d_c, config_.d_c)));
}

ConditionEmbedding TableConditionImpl::forward(const GraphBatch& batch) {
  auto h = gcn1_->forward(batch.H0, batch.A_norm);
  h = gcn2_->forward(h, batch.A_norm);
  auto mask = batch.mask.unsqueeze(-1);
  auto g = (h * mask).sum(1) / mask.sum(1);
  return {g, project_->forward(g)};
}

ConditionEmbedding TableConditionImpl::embed(const Table& table) {
  const std::vector<FeatureGraph> one = {build_graph(table)};
  const auto dtype = parameters().front().scalar_type();
  return forward(batch_graphs(one, dtype));
}

}  // namespace difft
