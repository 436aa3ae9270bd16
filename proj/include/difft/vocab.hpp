#pragma once

#include <cstdint>
#include <vector>

#include "difft/expr.hpp"

namespace difft {

/// Token ids: specials, then the operator set in OpId order, then f1..fn.
class Vocab {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kBos = 1;
  static constexpr std::int64_t kEos = 2;
  static constexpr std::int64_t kSep = 3;
  static constexpr std::int64_t kFirstOp = 4;
  static constexpr std::int64_t kFirstFeature = kFirstOp + static_cast<std::int64_t>(kNumOperators);

  explicit Vocab(int n_features);

  int n_features() const { return n_features_; }
  std::int64_t size() const { return kFirstFeature + n_features_; }

  std::int64_t encode(const Token& token) const;
  Token decode(std::int64_t id) const;

  std::vector<std::int64_t> encode(const FeatureExpr& expr) const;
  /// Chunks joined by SEP, no BOS/EOS.
  std::vector<std::int64_t> encode_flat(const FeatureSet& fs) const;

  bool operator==(const Vocab&) const = default;

 private:
  int n_features_;
};

}  // namespace difft
