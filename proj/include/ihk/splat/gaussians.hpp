#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "ihk/common/array_file.hpp"

namespace ihk::splat {

// Isotropic 3D Gaussians. Raw (pre-activation) parameters are stored; scales
// are exp(log_scales) and opacities sigmoid(logit_opacities).
struct GaussianSet {
  torch::Tensor means;            // M x 3, scene units
  torch::Tensor log_scales;       // M
  torch::Tensor colors;           // M x 3 in [0,1]
  torch::Tensor logit_opacities;  // M

  int64_t size() const { return means.defined() ? means.size(0) : 0; }
  torch::Tensor scales() const { return torch::exp(log_scales); }
  torch::Tensor opacities() const { return torch::sigmoid(logit_opacities); }

  // Throws std::invalid_argument on shape errors, M == 0, non-finite values
  // or colours outside [0,1].
  void validate() const;
  GaussianSet detached_clone() const;
  GaussianSet to(torch::ScalarType dtype) const;
};

ArrayFile to_array_file(const GaussianSet& g);
GaussianSet gaussians_from_array_file(const ArrayFile& file);
void save_gaussians(const std::filesystem::path& path, const GaussianSet& g);
// Validates after reading.
GaussianSet load_gaussians(const std::filesystem::path& path);

}  // namespace ihk::splat
