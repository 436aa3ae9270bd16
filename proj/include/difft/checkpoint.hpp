#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace difft {

class HashMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lowercase hex SHA-256.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Named tensors in a flat binary layout: name, dtype, shape, then raw
/// little-endian data. Order follows the map, so equal contents give equal bytes.
using TensorMap = std::map<std::string, torch::Tensor>;

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_tensors(const std::filesystem::path& path);

/// Parameters and buffers of `module` under `prefix`.
void collect_state(torch::nn::Module& module, const std::string& prefix, TensorMap& out);
/// Copies matching entries into `module`; missing names or shape changes throw.
void restore_state(torch::nn::Module& module, const std::string& prefix, const TensorMap& in);

/// One stage's record: config snapshot, source revision, input and output
/// hashes, metrics.
struct Manifest {
  std::string stage;
  nlohmann::json config;
  std::map<std::string, std::string> inputs;   // file name -> sha256
  std::map<std::string, std::string> outputs;  // file name -> sha256
  nlohmann::json metrics = nlohmann::json::object();

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
};

std::string source_revision();

/// Throws HashMismatch unless `file` exists and hashes to `expected`.
void verify_hash(const std::filesystem::path& file, const std::string& expected);

}  // namespace difft
