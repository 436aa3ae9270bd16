#include "difft/table.hpp"

#include <algorithm>
#include <stdexcept>

namespace difft {

Table::Table(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Table Table::from_columns(const std::vector<std::vector<double>>& columns) {
  if (columns.empty()) return {};
  Table t(columns.front().size(), columns.size());
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (columns[j].size() != t.rows_) throw std::invalid_argument("ragged columns");
    std::copy(columns[j].begin(), columns[j].end(), t.col(j).begin());
  }
  return t;
}

Table Table::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Table t(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != t.cols_) throw std::invalid_argument("ragged rows");
    for (std::size_t j = 0; j < t.cols_; ++j) t(i, j) = rows[i][j];
  }
  return t;
}

void Table::append_column(std::span<const double> values) {
  if (cols_ == 0 && rows_ == 0) rows_ = values.size();
  if (values.size() != rows_) throw std::invalid_argument("column length mismatch");
  data_.insert(data_.end(), values.begin(), values.end());
  ++cols_;
}

Table Table::select_rows(std::span<const std::size_t> row_ids) const {
  Table out(row_ids.size(), cols_);
  for (std::size_t j = 0; j < cols_; ++j) {
    auto src = col(j);
    auto dst = out.col(j);
    for (std::size_t i = 0; i < row_ids.size(); ++i) dst[i] = src[row_ids[i]];
  }
  return out;
}

Table Table::select_columns(std::span<const std::size_t> col_ids) const {
  Table out(rows_, col_ids.size());
  for (std::size_t j = 0; j < col_ids.size(); ++j) {
    auto src = col(col_ids[j]);
    std::copy(src.begin(), src.end(), out.col(j).begin());
  }
  return out;
}

}  // namespace difft
