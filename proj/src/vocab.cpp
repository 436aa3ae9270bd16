#include "difft/vocab.hpp"

#include <stdexcept>
#include <string>

namespace difft {

Vocab::Vocab(int n_features) : n_features_(n_features) {
  if (n_features < 1) throw std::invalid_argument("Vocab: n_features must be >= 1");
}

std::int64_t Vocab::encode(const Token& token) const {
  switch (token.kind) {
    case TokenKind::Pad: return kPad;
    case TokenKind::Bos: return kBos;
    case TokenKind::Eos: return kEos;
    case TokenKind::Sep: return kSep;
    case TokenKind::Operator: return kFirstOp + static_cast<std::int64_t>(token.op);
    case TokenKind::Feature:
      if (token.feature < 1 || token.feature > n_features_) {
        throw UnknownToken("feature index out of vocabulary: " + std::to_string(token.feature));
      }
      return kFirstFeature + token.feature - 1;
  }
  throw UnknownToken("bad token kind");
}

Token Vocab::decode(std::int64_t id) const {
  if (id < 0 || id >= size()) throw UnknownToken("token id out of range: " + std::to_string(id));
  if (id == kPad) return Token::special(TokenKind::Pad);
  if (id == kBos) return Token::special(TokenKind::Bos);
  if (id == kEos) return Token::special(TokenKind::Eos);
  if (id == kSep) return Token::special(TokenKind::Sep);
  if (id < kFirstFeature) return Token::op_ref(static_cast<OpId>(id - kFirstOp));
  return Token::feature_ref(static_cast<int>(id - kFirstFeature + 1));
}

std::vector<std::int64_t> Vocab::encode(const FeatureExpr& expr) const {
  std::vector<std::int64_t> ids;
  ids.reserve(expr.size());
  for (const auto& t : expr.tokens()) ids.push_back(encode(t));
  return ids;
}

std::vector<std::int64_t> Vocab::encode_flat(const FeatureSet& fs) const {
  std::vector<std::int64_t> ids;
  for (std::size_t t = 0; t < fs.count(); ++t) {
    if (t > 0) ids.push_back(kSep);
    const auto chunk = encode(fs.exprs()[t]);
    ids.insert(ids.end(), chunk.begin(), chunk.end());
  }
  return ids;
}

}  // namespace difft
