#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace ihk {

// Single-file array container: an 8-byte little-endian header length, a JSON
// header, then the raw little-endian float32 payload. The header layout is
// the safetensors one ({name: {dtype, shape, data_offsets}}, free-form
// metadata under "__metadata__"), so the files open in any tool that reads
// that format.
struct ArrayFile {
  std::vector<std::pair<std::string, torch::Tensor>> arrays;  // float32, CPU, in file order
  nlohmann::json metadata = nlohmann::json::object();

  const torch::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void add(std::string name, const torch::Tensor& t);
};

std::string encode_array_file(const ArrayFile& file);
ArrayFile decode_array_file(const std::string& bytes);

void save_array_file(const std::filesystem::path& path, const ArrayFile& file);
ArrayFile load_array_file(const std::filesystem::path& path);

// Whole-file helpers used by caching and hashing.
std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace ihk
