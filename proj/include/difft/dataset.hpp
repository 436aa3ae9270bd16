#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "difft/table.hpp"

namespace difft {

enum class TaskType { Classification, Regression };

std::string to_string(TaskType task);
TaskType task_from_string(const std::string& text);

/// A loaded table: raw features X, target y and task kind. Classification
/// targets are label-encoded to 0..n_classes-1.
struct Dataset {
  std::string name;
  Table X;
  std::vector<double> y;
  TaskType task = TaskType::Classification;
  int n_classes = 0;
  std::vector<std::string> feature_names;

  std::size_t rows() const { return X.rows(); }
  std::size_t cols() const { return X.cols(); }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class FileNotFound : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class NonNumericFeature : public DatasetError {
 public:
  using DatasetError::DatasetError;
};
class EmptyDataset : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

/// Reads a headed CSV whose last column is the target. Missing feature cells
/// ("", NA, NaN, ?) are imputed with the column median; rows with a missing
/// target are dropped. The task is inferred unless given: non-numeric or
/// integral targets with at most 20 distinct values are classification.
Dataset load_csv(const std::filesystem::path& path, std::optional<TaskType> task = std::nullopt);

/// Writes `X` (and `y` as a last column when non-empty) with a header row.
void write_csv(const std::filesystem::path& path, const Table& X,
               const std::vector<std::string>& header, const std::vector<double>& y = {},
               const std::string& target_name = "target");

}  // namespace difft
