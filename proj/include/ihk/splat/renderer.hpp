#pragma once

#include <torch/torch.h>

#include "ihk/bodyfit/camera.hpp"
#include "ihk/splat/gaussians.hpp"

namespace ihk::splat {

inline constexpr double kMaxAlpha = 0.999;

// Orthographic splatting. Each Gaussian projects to a circle of radius
// sigma * image_scale pixels; per pixel
//   alpha_i = clamp(opacity_i * exp(-d^2 / (2 sigma_px^2)), 0, 0.999)
// and Gaussians are composited in depth order with
//   C = sum_i c_i alpha_i prod_{j nearer than i} (1 - alpha_j).
// Returns H x W x 4 premultiplied RGBA in the dtype of the Gaussians, with
// row 0 at the top of the picture. Differentiable in every field.
torch::Tensor render_ortho(const GaussianSet& g, const bodyfit::OrthoCamera& camera, int64_t height, int64_t width);

// Per-pixel compositing weights alpha_i T_i, (H*W) x M, in depth order of
// `order` (returned). Exposed for conservation checks.
torch::Tensor compositing_weights(const GaussianSet& g, const bodyfit::OrthoCamera& camera, int64_t height, int64_t width,
                                  torch::Tensor* order = nullptr);

// The four canonical views of the working volume.
torch::Tensor render_views(const GaussianSet& g, int64_t resolution);  // 4 x H x W x 4

}  // namespace ihk::splat
