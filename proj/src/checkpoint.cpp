#include "difft/checkpoint.hpp"

#include <array>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#ifndef DIFFT_SOURCE_REVISION
#define DIFFT_SOURCE_REVISION "unknown"
#endif

namespace difft {

namespace {

constexpr char kMagic[8] = {'D', 'F', 'T', 'T', 'E', 'N', 'S', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

std::string hex(const unsigned char* data, unsigned len) {
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(data[i]);
  return os.str();
}

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw CheckpointError("sha256 failed");
  }
  return hex(md.data(), len);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return sha256_hex(buf.str());
}

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put_u64(os, tensors.size());
  for (const auto& [name, value] : tensors) {
    auto t = value.detach().to(torch::kCPU).contiguous();
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, static_cast<std::uint64_t>(t.scalar_type()));
    put_u64(os, static_cast<std::uint64_t>(t.dim()));
    for (auto s : t.sizes()) put_u64(os, static_cast<std::uint64_t>(s));
    const auto bytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    put_u64(os, bytes);
    os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
  }
  if (!os) throw CheckpointError("write failed: " + path.string());
}

TensorMap load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kMagic)) throw CheckpointError("not a tensor file: " + path.string());
  TensorMap out;
  const auto n = get_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name(get_u64(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto dtype = static_cast<torch::ScalarType>(get_u64(is));
    std::vector<std::int64_t> shape(get_u64(is));
    for (auto& s : shape) s = static_cast<std::int64_t>(get_u64(is));
    const auto bytes = get_u64(is);
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (bytes != static_cast<std::uint64_t>(t.numel()) * t.element_size()) {
      throw CheckpointError("size mismatch for " + name);
    }
    is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
    if (!is) throw CheckpointError("truncated checkpoint");
    out.emplace(std::move(name), t);
  }
  return out;
}

void collect_state(torch::nn::Module& module, const std::string& prefix, TensorMap& out) {
  for (const auto& p : module.named_parameters()) out[prefix + p.key()] = p.value();
  for (const auto& b : module.named_buffers()) out[prefix + b.key()] = b.value();
}

void restore_state(torch::nn::Module& module, const std::string& prefix, const TensorMap& in) {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& key, torch::Tensor& dst) {
    auto it = in.find(prefix + key);
    if (it == in.end()) throw CheckpointError("checkpoint lacks " + prefix + key);
    if (it->second.sizes() != dst.sizes()) throw CheckpointError("shape mismatch for " + prefix + key);
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters()) copy(p.key(), p.value());
  for (auto& b : module.named_buffers()) copy(b.key(), b.value());
}

nlohmann::json Manifest::to_json() const {
  return {{"stage", stage},           {"source_revision", source_revision()},
          {"config", config},         {"inputs", inputs},
          {"outputs", outputs},       {"metrics", metrics}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  m.stage = j.at("stage").get<std::string>();
  m.config = j.value("config", nlohmann::json::object());
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.metrics = j.value("metrics", nlohmann::json::object());
  return m;
}

void Manifest::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os << to_json().dump(2) << '\n';
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("missing manifest " + path.string());
  return from_json(nlohmann::json::parse(is));
}

std::string source_revision() { return DIFFT_SOURCE_REVISION; }

void verify_hash(const std::filesystem::path& file, const std::string& expected) {
  const auto name = file.filename().string();
  if (!std::filesystem::exists(file)) throw HashMismatch(name + " is missing");
  const auto actual = sha256_file(file);
  if (actual != expected) {
    throw HashMismatch(name + " changed since it was recorded (" + actual.substr(0, 12) + " vs " +
                       expected.substr(0, 12) + ")");
  }
}

}  // namespace difft
