#include "ihk/common/module_io.hpp"

#include <stdexcept>

#include "ihk/common/hashing.hpp"

namespace ihk {

ArrayFile module_to_arrays(const torch::nn::Module& module, const nlohmann::json& config) {
  ArrayFile file;
  for (const auto& p : module.named_parameters(true)) file.add(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) file.add(b.key(), b.value());
  file.metadata["config"] = config;
  return file;
}

void load_module_arrays(torch::nn::Module& module, const ArrayFile& file) {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    if (!file.contains(name)) throw std::runtime_error("checkpoint is missing '" + name + "'");
    const auto& src = file.at(name);
    if (src.sizes() != dst.sizes()) throw std::runtime_error("checkpoint shape mismatch for '" + name + "'");
    dst.copy_(src.to(dst.scalar_type()));
  };
  for (auto& p : module.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy(b.key(), b.value());
}

void save_module(const std::filesystem::path& path, const torch::nn::Module& module, const nlohmann::json& config) {
  save_array_file(path, module_to_arrays(module, config));
}

std::string module_hash(const torch::nn::Module& module, const nlohmann::json& config) {
  return sha256_hex(encode_array_file(module_to_arrays(module, config)));
}

}  // namespace ihk
