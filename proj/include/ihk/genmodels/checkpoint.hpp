#pragma once

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace ihk::genmodels {

struct CheckpointInfo {
  nlohmann::json config;  // model config
  int64_t step = 0;       // optimiser steps taken
  nlohmann::json extra = nlohmann::json::object();
};

// Model parameters plus, when given, the Adam moments and step counts in one
// array container, so a resumed run continues bit-identically.
void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module, const nlohmann::json& config,
                     const torch::optim::Adam* optimizer, int64_t step, const nlohmann::json& extra = {});

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Restores into an already-built module (and optimiser over its parameters).
// Throws std::runtime_error on missing or mis-shaped entries.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                               torch::optim::Adam* optimizer = nullptr);

}  // namespace ihk::genmodels
