#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

#include "difft/table.hpp"

namespace difft {

/// Correlation graph of a table's columns. Nodes are sorted by a canonical
/// key (statistics, then values), so column order never reaches the network.
struct FeatureGraph {
  torch::Tensor A_hat;   // [n, n] |Pearson| off the diagonal, 1 on it (double)
  torch::Tensor degree;  // [n] row sums of A_hat
  torch::Tensor H0;      // [n, 7] column statistics z-scored across columns
  std::int64_t nodes() const { return A_hat.size(0); }
};

FeatureGraph build_graph(const Table& table);

/// D^-1/2 A D^-1/2 for a [.., n, n] adjacency with positive degrees.
torch::Tensor normalize_adjacency(const torch::Tensor& A_hat);

/// Zero-padded batch of graphs.
struct GraphBatch {
  torch::Tensor H0;      // [B, N, 7]
  torch::Tensor A_norm;  // [B, N, N]
  torch::Tensor mask;    // [B, N], 1 for real nodes
};

GraphBatch batch_graphs(std::span<const FeatureGraph> graphs,
                        torch::Dtype dtype = torch::kFloat);

/// H' = ReLU(A_norm H W + b).
class GcnLayerImpl : public torch::nn::Module {
 public:
  GcnLayerImpl(int in, int out);
  torch::Tensor forward(const torch::Tensor& H, const torch::Tensor& A_norm);
  torch::nn::Linear& linear() { return linear_; }

 private:
  torch::nn::Linear linear_{nullptr};
};
TORCH_MODULE(GcnLayer);

struct ConditionConfig {
  int hidden = 64;
  int d_g = 64;
  int d_c = 128;
};

struct ConditionEmbedding {
  torch::Tensor g;  // [B, d_g]
  torch::Tensor c;  // [B, d_c]
};

class TableConditionImpl : public torch::nn::Module {
 public:
  explicit TableConditionImpl(ConditionConfig config = {});

  const ConditionConfig& config() const { return config_; }
  ConditionEmbedding forward(const GraphBatch& batch);
  ConditionEmbedding embed(const Table& table);

 private:
  ConditionConfig config_;
  GcnLayer gcn1_{nullptr}, gcn2_{nullptr};
  torch::nn::Sequential project_{nullptr};
};
TORCH_MODULE(TableCondition);

}  // namespace difft
