#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "difft/table.hpp"

namespace difft {

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

enum class OpId : std::uint8_t { Add, Sub, Mul, Div, Log, Sqrt, Square, Reciprocal, Sin, Cos };

inline constexpr std::size_t kNumOperators = 10;
inline constexpr std::string_view kOperatorSetVersion = "ops-v1";

/// Floor on |denominator| and offset inside log.
inline constexpr double kSafeEpsilon = 1e-6;
/// Every operator result is clamped into [-kValueBound, kValueBound].
inline constexpr double kValueBound = 1e100;

struct OperatorSpec {
  OpId id;
  std::string_view name;
  int arity;
  bool total;
};

std::span<const OperatorSpec> operator_set();
const OperatorSpec& operator_spec(OpId op);
std::optional<OpId> find_operator(std::string_view surface);

double apply_unary(OpId op, double x);
double apply_binary(OpId op, double a, double b);

// ---------------------------------------------------------------------------
// Tokens and expressions
// ---------------------------------------------------------------------------

enum class TokenKind : std::uint8_t { Feature, Operator, Sep, Bos, Eos, Pad };

struct Token {
  TokenKind kind = TokenKind::Pad;
  int feature = 0;  // 1-based column index, meaningful for Feature only
  OpId op = OpId::Add;

  static Token feature_ref(int index) { return {TokenKind::Feature, index, OpId::Add}; }
  static Token op_ref(OpId id) { return {TokenKind::Operator, 0, id}; }
  static Token special(TokenKind kind) { return {kind, 0, OpId::Add}; }

  std::string surface() const;

  friend bool operator==(const Token& a, const Token& b) {
    if (a.kind != b.kind) return false;
    if (a.kind == TokenKind::Feature) return a.feature == b.feature;
    if (a.kind == TokenKind::Operator) return a.op == b.op;
    return true;
  }
};

class ExprError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UnknownToken : public ExprError {
 public:
  using ExprError::ExprError;
};
class MalformedPostfix : public ExprError {
 public:
  using ExprError::ExprError;
};
class EmptyChunk : public ExprError {
 public:
  using ExprError::ExprError;
};
class IndexOutOfRange : public ExprError {
 public:
  using ExprError::ExprError;
};

/// Single left-to-right stack pass: no underflow, exactly one residual
/// operand, only Feature/Operator tokens.
bool is_valid_postfix(std::span<const Token> tokens);

/// Length of the longest prefix that is itself a valid postfix expression
/// (0 when no prefix is valid).
std::size_t longest_valid_prefix(std::span<const Token> tokens);

/// One transformed feature: a validated postfix token list.
class FeatureExpr {
 public:
  /// Throws EmptyChunk or MalformedPostfix.
  explicit FeatureExpr(std::vector<Token> tokens);

  static FeatureExpr passthrough(int feature) { return FeatureExpr({Token::feature_ref(feature)}); }

  const std::vector<Token>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }
  bool is_passthrough() const { return tokens_.size() == 1; }
  int max_feature_index() const;

  friend bool operator==(const FeatureExpr&, const FeatureExpr&) = default;

 private:
  std::vector<Token> tokens_;
};

/// Ordered collection of transformed features.
class FeatureSet {
 public:
  FeatureSet() = default;
  explicit FeatureSet(std::vector<FeatureExpr> exprs) : exprs_(std::move(exprs)) {}

  const std::vector<FeatureExpr>& exprs() const { return exprs_; }
  std::size_t count() const { return exprs_.size(); }
  bool empty() const { return exprs_.empty(); }
  void push_back(FeatureExpr e) { exprs_.push_back(std::move(e)); }
  std::size_t max_chunk_length() const;
  std::size_t total_tokens() const;

  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;

 private:
  std::vector<FeatureExpr> exprs_;
};

/// Parses "f1 f2 *, f3 log". Chunks are comma separated, tokens whitespace
/// separated. Throws UnknownToken, MalformedPostfix or EmptyChunk.
FeatureSet parse(std::string_view text, int n_features);

/// Canonical form: single space between tokens, ", " between chunks.
std::string serialize(const FeatureSet& fs);
std::string serialize(const FeatureExpr& expr);

/// Stack-machine evaluation, one output value per row. Throws IndexOutOfRange.
std::vector<double> evaluate(const FeatureExpr& expr, const Table& table);
/// Column t of the result is exprs[t] evaluated on `table`.
Table evaluate(const FeatureSet& fs, const Table& table);

FeatureExpr random_feature_expr(std::mt19937_64& rng, int n_features, int max_chunk_len);
FeatureSet random_feature_set(std::mt19937_64& rng, int n_features, int max_chunks,
                              int max_chunk_len);

// ---------------------------------------------------------------------------
// Persistence: one feature set per line after a header line.
// ---------------------------------------------------------------------------

struct FeatureSetFile {
  int n_features = 0;
  std::string operator_version;
  std::vector<FeatureSet> sets;
};

void write_feature_sets(const std::filesystem::path& path, std::span<const FeatureSet> sets,
                        int n_features);
FeatureSetFile read_feature_sets(const std::filesystem::path& path);

}  // namespace difft
