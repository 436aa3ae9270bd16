#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace difft {

/// Dense column-major matrix of doubles. Columns are the natural unit for
/// feature transformation, so each column is a contiguous span.
class Table {
 public:
  Table() = default;
  Table(std::size_t rows, std::size_t cols, double fill = 0.0);

  static Table from_columns(const std::vector<std::vector<double>>& columns);
  static Table from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0 || cols_ == 0; }

  std::span<const double> col(std::size_t j) const {
    return {data_.data() + j * rows_, rows_};
  }
  std::span<double> col(std::size_t j) { return {data_.data() + j * rows_, rows_}; }

  double operator()(std::size_t r, std::size_t c) const { return data_[c * rows_ + r]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[c * rows_ + r]; }

  void append_column(std::span<const double> values);
  Table select_rows(std::span<const std::size_t> row_ids) const;
  Table select_columns(std::span<const std::size_t> col_ids) const;

  bool operator==(const Table&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

}  // namespace difft
