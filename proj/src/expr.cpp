#include "difft/expr.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace difft {

namespace {

constexpr std::array<OperatorSpec, kNumOperators> kOperators = {{
    {OpId::Add, "+", 2, true},
    {OpId::Sub, "-", 2, true},
    {OpId::Mul, "*", 2, true},
    {OpId::Div, "/", 2, true},
    {OpId::Log, "log", 1, true},
    {OpId::Sqrt, "sqrt", 1, true},
    {OpId::Square, "square", 1, true},
    {OpId::Reciprocal, "reciprocal", 1, true},
    {OpId::Sin, "sin", 1, true},
    {OpId::Cos, "cos", 1, true},
}};

double clamp_value(double v) { return std::clamp(v, -kValueBound, kValueBound); }

double safe_div(double a, double b) {
  const double sign = b < 0.0 ? -1.0 : 1.0;
  return a / (sign * std::max(std::abs(b), kSafeEpsilon));
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

Token parse_token(std::string_view word, int n_features) {
  if (word.size() >= 2 && word.front() == 'f') {
    int index = 0;
    const auto* begin = word.data() + 1;
    const auto* end = word.data() + word.size();
    auto [ptr, ec] = std::from_chars(begin, end, index);
    if (ec == std::errc{} && ptr == end) {
      if (index < 1 || index > n_features) {
        throw UnknownToken("feature token '" + std::string(word) + "' outside f1..f" +
                           std::to_string(n_features));
      }
      return Token::feature_ref(index);
    }
  }
  if (auto op = find_operator(word)) return Token::op_ref(*op);
  throw UnknownToken("unknown token '" + std::string(word) + "'");
}

}  // namespace

std::span<const OperatorSpec> operator_set() { return kOperators; }

const OperatorSpec& operator_spec(OpId op) { return kOperators[static_cast<std::size_t>(op)]; }

std::optional<OpId> find_operator(std::string_view surface) {
  for (const auto& spec : kOperators) {
    if (spec.name == surface) return spec.id;
  }
  if (surface == "×") return OpId::Mul;
  if (surface == "÷") return OpId::Div;
  if (surface == "−") return OpId::Sub;
  return std::nullopt;
}

double apply_unary(OpId op, double x) {
  switch (op) {
    case OpId::Log: return clamp_value(std::log(std::abs(x) + kSafeEpsilon));
    case OpId::Sqrt: return clamp_value(std::sqrt(std::abs(x)));
    case OpId::Square: return clamp_value(x * x);
    case OpId::Reciprocal: return clamp_value(safe_div(1.0, x));
    case OpId::Sin: return std::sin(x);
    case OpId::Cos: return std::cos(x);
    default: throw std::invalid_argument("binary operator applied as unary");
  }
}

double apply_binary(OpId op, double a, double b) {
  switch (op) {
    case OpId::Add: return clamp_value(a + b);
    case OpId::Sub: return clamp_value(a - b);
    case OpId::Mul: return clamp_value(a * b);
    case OpId::Div: return clamp_value(safe_div(a, b));
    default: throw std::invalid_argument("unary operator applied as binary");
  }
}

std::string Token::surface() const {
  switch (kind) {
    case TokenKind::Feature: return "f" + std::to_string(feature);
    case TokenKind::Operator: return std::string(operator_spec(op).name);
    case TokenKind::Sep: return ",";
    case TokenKind::Bos: return "<bos>";
    case TokenKind::Eos: return "<eos>";
    case TokenKind::Pad: return "<pad>";
  }
  return "?";
}

bool is_valid_postfix(std::span<const Token> tokens) {
  int depth = 0;
  for (const auto& tok : tokens) {
    if (tok.kind == TokenKind::Feature) {
      ++depth;
    } else if (tok.kind == TokenKind::Operator) {
      const int arity = operator_spec(tok.op).arity;
      if (depth < arity) return false;
      depth -= arity - 1;
    } else {
      return false;
    }
  }
  return depth == 1;
}

std::size_t longest_valid_prefix(std::span<const Token> tokens) {
  int depth = 0;
  std::size_t best = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& tok = tokens[i];
    if (tok.kind == TokenKind::Feature) {
      ++depth;
    } else if (tok.kind == TokenKind::Operator) {
      const int arity = operator_spec(tok.op).arity;
      if (depth < arity) break;
      depth -= arity - 1;
    } else {
      break;
    }
    if (depth == 1) best = i + 1;
  }
  return best;
}

FeatureExpr::FeatureExpr(std::vector<Token> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty()) throw EmptyChunk("empty feature chunk");
  if (!is_valid_postfix(tokens_)) {
    std::string text;
    for (const auto& t : tokens_) text += (text.empty() ? "" : " ") + t.surface();
    throw MalformedPostfix("malformed postfix chunk '" + text + "'");
  }
}

int FeatureExpr::max_feature_index() const {
  int best = 0;
  for (const auto& t : tokens_) {
    if (t.kind == TokenKind::Feature) best = std::max(best, t.feature);
  }
  return best;
}

std::size_t FeatureSet::max_chunk_length() const {
  std::size_t best = 0;
  for (const auto& e : exprs_) best = std::max(best, e.size());
  return best;
}

std::size_t FeatureSet::total_tokens() const {
  std::size_t total = 0;
  for (const auto& e : exprs_) total += e.size();
  return total;
}

FeatureSet parse(std::string_view text, int n_features) {
  if (n_features < 1) throw std::invalid_argument("n_features must be >= 1");
  FeatureSet fs;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    const auto chunk_text =
        trim(text.substr(start, comma == std::string_view::npos ? text.npos : comma - start));
    if (chunk_text.empty()) throw EmptyChunk("empty chunk in '" + std::string(text) + "'");

    std::vector<Token> tokens;
    std::size_t pos = 0;
    while (pos < chunk_text.size()) {
      const auto begin = chunk_text.find_first_not_of(" \t\r\n", pos);
      if (begin == std::string_view::npos) break;
      auto end = chunk_text.find_first_of(" \t\r\n", begin);
      if (end == std::string_view::npos) end = chunk_text.size();
      tokens.push_back(parse_token(chunk_text.substr(begin, end - begin), n_features));
      pos = end;
    }
    fs.push_back(FeatureExpr(std::move(tokens)));

    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fs;
}

std::string serialize(const FeatureExpr& expr) {
  std::string out;
  for (const auto& tok : expr.tokens()) {
    if (!out.empty()) out += ' ';
    out += tok.surface();
  }
  return out;
}

std::string serialize(const FeatureSet& fs) {
  std::string out;
  for (std::size_t t = 0; t < fs.count(); ++t) {
    if (t > 0) out += ", ";
    out += serialize(fs.exprs()[t]);
  }
  return out;
}

std::vector<double> evaluate(const FeatureExpr& expr, const Table& table) {
  const std::size_t rows = table.rows();
  std::vector<std::vector<double>> stack;
  for (const auto& tok : expr.tokens()) {
    if (tok.kind == TokenKind::Feature) {
      if (tok.feature < 1 || static_cast<std::size_t>(tok.feature) > table.cols()) {
        throw IndexOutOfRange("feature f" + std::to_string(tok.feature) + " exceeds table width " +
                              std::to_string(table.cols()));
      }
      auto column = table.col(static_cast<std::size_t>(tok.feature - 1));
      stack.emplace_back(column.begin(), column.end());
      continue;
    }
    const auto& spec = operator_spec(tok.op);
    if (spec.arity == 1) {
      for (auto& v : stack.back()) v = apply_unary(tok.op, v);
    } else {
      auto rhs = std::move(stack.back());
      stack.pop_back();
      auto& lhs = stack.back();
      for (std::size_t i = 0; i < rows; ++i) lhs[i] = apply_binary(tok.op, lhs[i], rhs[i]);
    }
  }
  return std::move(stack.back());
}

Table evaluate(const FeatureSet& fs, const Table& table) {
  Table out;
  for (const auto& expr : fs.exprs()) out.append_column(evaluate(expr, table));
  return out;
}

FeatureExpr random_feature_expr(std::mt19937_64& rng, int n_features, int max_chunk_len) {
  if (n_features < 1 || max_chunk_len < 1) throw std::invalid_argument("bounds must be >= 1");
  std::uniform_int_distribution<int> length_dist(1, max_chunk_len);
  std::uniform_int_distribution<int> feature_dist(1, n_features);
  std::vector<OpId> unary, binary;
  for (const auto& spec : operator_set()) (spec.arity == 1 ? unary : binary).push_back(spec.id);
  std::uniform_int_distribution<std::size_t> unary_dist(0, unary.size() - 1);
  std::uniform_int_distribution<std::size_t> binary_dist(0, binary.size() - 1);

  // Can depth `d` reach exactly one operand with `r` tokens left?
  auto reachable = [](int d, int r) { return d == 0 ? r >= 1 : r >= d - 1; };

  const int length = length_dist(rng);
  std::vector<Token> tokens;
  int depth = 0;
  for (int remaining = length; remaining > 0; --remaining) {
    enum Kind { kFeature, kUnary, kBinary };
    std::vector<Kind> legal;
    if (reachable(depth + 1, remaining - 1)) legal.push_back(kFeature);
    if (depth >= 1 && reachable(depth, remaining - 1)) legal.push_back(kUnary);
    if (depth >= 2 && reachable(depth - 1, remaining - 1)) legal.push_back(kBinary);
    std::uniform_int_distribution<std::size_t> pick(0, legal.size() - 1);
    switch (legal[pick(rng)]) {
      case kFeature:
        tokens.push_back(Token::feature_ref(feature_dist(rng)));
        ++depth;
        break;
      case kUnary:
        tokens.push_back(Token::op_ref(unary[unary_dist(rng)]));
        break;
      case kBinary:
        tokens.push_back(Token::op_ref(binary[binary_dist(rng)]));
        --depth;
        break;
    }
  }
  return FeatureExpr(std::move(tokens));
}

FeatureSet random_feature_set(std::mt19937_64& rng, int n_features, int max_chunks,
                              int max_chunk_len) {
  if (max_chunks < 1) throw std::invalid_argument("bounds must be >= 1");
  std::uniform_int_distribution<int> count_dist(1, max_chunks);
  const int count = count_dist(rng);
  FeatureSet fs;
  for (int t = 0; t < count; ++t) fs.push_back(random_feature_expr(rng, n_features, max_chunk_len));
  return fs;
}

void write_feature_sets(const std::filesystem::path& path, std::span<const FeatureSet> sets,
                        int n_features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# difft-feature-sets n_features=" << n_features << " operators=" << kOperatorSetVersion
      << '\n';
  for (const auto& fs : sets) out << serialize(fs) << '\n';
}

FeatureSetFile read_feature_sets(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  FeatureSetFile file;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# difft-feature-sets", 0) != 0) {
    throw std::runtime_error(path.string() + ": missing feature-set header line");
  }
  std::istringstream header(line.substr(std::string_view("# difft-feature-sets").size()));
  std::string field;
  while (header >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const auto key = field.substr(0, eq);
    const auto value = field.substr(eq + 1);
    if (key == "n_features") file.n_features = std::stoi(value);
    if (key == "operators") file.operator_version = value;
  }
  if (file.n_features < 1) throw std::runtime_error(path.string() + ": bad n_features in header");
  if (file.operator_version != kOperatorSetVersion) {
    throw std::runtime_error(path.string() + ": operator set '" + file.operator_version +
                             "' does not match " + std::string(kOperatorSetVersion));
  }
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    file.sets.push_back(parse(line, file.n_features));
  }
  return file;
}

}  // namespace difft
