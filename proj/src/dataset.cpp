#include "difft/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "difft/stats.hpp"

namespace difft {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n\"");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\"");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      cells.push_back(trim(cell));
      cell.clear();
    } else {
      cell += ch;
    }
  }
  cells.push_back(trim(cell));
  return cells;
}

bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "?" || cell == "NA" || cell == "na" || cell == "NaN" ||
         cell == "nan" || cell == "null";
}

std::optional<double> to_number(const std::string& cell) {
  double value = 0.0;
  const auto* begin = cell.data();
  const auto* end = cell.data() + cell.size();
  if (!cell.empty() && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc{} || ptr != end || !std::isfinite(value)) return std::nullopt;
  return value;
}

}  // namespace

std::string to_string(TaskType task) {
  return task == TaskType::Classification ? "classification" : "regression";
}

TaskType task_from_string(const std::string& text) {
  if (text == "classification" || text == "C") return TaskType::Classification;
  if (text == "regression" || text == "R") return TaskType::Regression;
  throw std::invalid_argument("unknown task '" + text + "'");
}

Dataset load_csv(const std::filesystem::path& path, std::optional<TaskType> task) {
  std::ifstream in(path);
  if (!in) throw FileNotFound("dataset not found: " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw EmptyDataset(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 2) throw EmptyDataset(path.string() + ": need at least one feature column");
  const std::size_t n_cols = header.size() - 1;

  std::vector<std::vector<std::optional<double>>> columns(n_cols);
  std::vector<std::string> targets;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                         std::to_string(header.size()) + " cells, got " +
                         std::to_string(cells.size()));
    }
    if (is_missing(cells.back())) continue;
    for (std::size_t j = 0; j < n_cols; ++j) {
      if (is_missing(cells[j])) {
        columns[j].push_back(std::nullopt);
        continue;
      }
      auto value = to_number(cells[j]);
      if (!value) {
        throw NonNumericFeature(path.string() + ":" + std::to_string(line_no) + ": column '" +
                                header[j] + "' has non-numeric value '" + cells[j] + "'");
      }
      columns[j].push_back(*value);
    }
    targets.push_back(cells.back());
  }
  if (targets.empty()) throw EmptyDataset(path.string() + ": no data rows");

  Dataset ds;
  ds.name = path.stem().string();
  ds.feature_names.assign(header.begin(), header.end() - 1);
  ds.X = Table(targets.size(), n_cols);
  for (std::size_t j = 0; j < n_cols; ++j) {
    std::vector<double> present;
    for (const auto& v : columns[j]) {
      if (v) present.push_back(*v);
    }
    double median = 0.0;
    if (!present.empty()) {
      std::sort(present.begin(), present.end());
      median = sorted_quantile(present, 0.5);
    }
    auto out = ds.X.col(j);
    for (std::size_t i = 0; i < targets.size(); ++i) out[i] = columns[j][i].value_or(median);
  }

  std::vector<std::optional<double>> numeric_targets;
  bool all_numeric = true;
  bool all_integral = true;
  for (const auto& t : targets) {
    auto v = to_number(t);
    all_numeric = all_numeric && v.has_value();
    if (v) all_integral = all_integral && std::floor(*v) == *v;
    numeric_targets.push_back(v);
  }

  if (task) {
    ds.task = *task;
  } else if (!all_numeric) {
    ds.task = TaskType::Classification;
  } else {
    std::set<double> distinct;
    for (const auto& v : numeric_targets) distinct.insert(*v);
    ds.task = (all_integral && distinct.size() <= 20) ? TaskType::Classification
                                                      : TaskType::Regression;
  }

  if (ds.task == TaskType::Regression) {
    if (!all_numeric) throw DatasetError(path.string() + ": regression target must be numeric");
    for (const auto& v : numeric_targets) ds.y.push_back(*v);
  } else if (all_numeric) {
    std::map<double, int> codes;
    for (const auto& v : numeric_targets) codes.emplace(*v, 0);
    int next = 0;
    for (auto& [value, code] : codes) code = next++;
    for (const auto& v : numeric_targets) ds.y.push_back(codes.at(*v));
    ds.n_classes = next;
  } else {
    std::map<std::string, int> codes;
    for (const auto& t : targets) codes.emplace(t, 0);
    int next = 0;
    for (auto& [label, code] : codes) code = next++;
    for (const auto& t : targets) ds.y.push_back(codes.at(t));
    ds.n_classes = next;
  }
  return ds;
}

void write_csv(const std::filesystem::path& path, const Table& X,
               const std::vector<std::string>& header, const std::vector<double>& y,
               const std::string& target_name) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto quote = [](const std::string& s) {
    return s.find(',') == std::string::npos ? s : "\"" + s + "\"";
  };
  for (std::size_t j = 0; j < X.cols(); ++j) {
    if (j > 0) out << ',';
    out << quote(j < header.size() ? header[j] : "c" + std::to_string(j + 1));
  }
  if (!y.empty()) out << ',' << quote(target_name);
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    for (std::size_t j = 0; j < X.cols(); ++j) {
      if (j > 0) out << ',';
      out << X(i, j);
    }
    if (!y.empty()) out << ',' << y[i];
    out << '\n';
  }
}

}  // namespace difft
