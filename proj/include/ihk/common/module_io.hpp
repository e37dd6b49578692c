#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/common/array_file.hpp"

namespace ihk {

// Parameters and buffers of a module as named float32 arrays, with `config`
// stored under the "config" metadata key.
ArrayFile module_to_arrays(const torch::nn::Module& module, const nlohmann::json& config);
// Copies arrays into an already-constructed module of matching structure.
// Throws std::runtime_error on a missing name or a shape mismatch.
void load_module_arrays(torch::nn::Module& module, const ArrayFile& file);

void save_module(const std::filesystem::path& path, const torch::nn::Module& module, const nlohmann::json& config);

// Content hash of a module's parameters and config (hex SHA-256 of the
// encoded container), used in generation records.
std::string module_hash(const torch::nn::Module& module, const nlohmann::json& config);

}  // namespace ihk
