#include "ihk/splat/renderer.hpp"

#include <stdexcept>

namespace ihk::splat {

namespace {

struct Projected {
  torch::Tensor xy;     // M x 2 pixels
  torch::Tensor sigma;  // M pixels
  torch::Tensor order;  // M, nearest first
};

Projected project(const GaussianSet& g, const bodyfit::OrthoCamera& camera) {
  g.validate();
  camera.validate();
  const auto dtype = g.means.scalar_type();
  auto cam = torch::matmul(g.means, camera.rotation_tensor(dtype).t());
  auto offset = torch::tensor({camera.principal_offset[0], camera.principal_offset[1]}, dtype);
  auto xy = camera.image_scale * cam.narrow(1, 0, 2) + offset;
  // Larger camera z is nearer; the stable sort keeps index order among ties.
  auto order = std::get<1>(torch::sort(cam.select(1, 2).detach(), /*stable=*/true, /*dim=*/0, /*descending=*/true));
  return {xy, g.scales() * camera.image_scale, order};
}

torch::Tensor pixel_grid(int64_t height, int64_t width, torch::ScalarType dtype) {
  auto cols = torch::arange(width, dtype);
  auto rows = torch::arange(height, dtype);
  auto x = cols.unsqueeze(0).expand({height, width});
  auto y = (static_cast<double>(height - 1) - rows).unsqueeze(1).expand({height, width});
  return torch::stack({x, y}, -1).reshape({height * width, 2});
}

// Weights for a block of pixels (P x 2), Gaussians already in depth order.
torch::Tensor block_weights(const torch::Tensor& pixels, const torch::Tensor& xy, const torch::Tensor& sigma,
                            const torch::Tensor& opacity) {
  auto diff = pixels.unsqueeze(1) - xy.unsqueeze(0);  // P x M x 2
  auto d2 = (diff * diff).sum(-1);
  auto alpha = torch::clamp(opacity.unsqueeze(0) * torch::exp(-d2 / (2.0 * (sigma * sigma).unsqueeze(0))), 0.0, kMaxAlpha);
  auto transmit = torch::cumprod(1.0 - alpha, 1);
  auto exclusive = torch::cat({torch::ones_like(transmit.narrow(1, 0, 1)), transmit.narrow(1, 0, transmit.size(1) - 1)}, 1);
  return alpha * exclusive;
}

constexpr int64_t kPixelBlock = 4096;

}  // namespace

torch::Tensor compositing_weights(const GaussianSet& g, const bodyfit::OrthoCamera& camera, int64_t height, int64_t width,
                                  torch::Tensor* order) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("render resolution must be positive");
  auto p = project(g, camera);
  if (order) *order = p.order;
  auto pixels = pixel_grid(height, width, g.means.scalar_type());
  return block_weights(pixels, p.xy.index_select(0, p.order), p.sigma.index_select(0, p.order),
                       g.opacities().index_select(0, p.order));
}

torch::Tensor render_ortho(const GaussianSet& g, const bodyfit::OrthoCamera& camera, int64_t height, int64_t width) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("render resolution must be positive");
  auto p = project(g, camera);
  auto xy = p.xy.index_select(0, p.order);
  auto sigma = p.sigma.index_select(0, p.order);
  auto opacity = g.opacities().index_select(0, p.order);
  auto colors = g.colors.index_select(0, p.order);
  auto pixels = pixel_grid(height, width, g.means.scalar_type());
  std::vector<torch::Tensor> blocks;
  for (int64_t start = 0; start < pixels.size(0); start += kPixelBlock) {
    auto w = block_weights(pixels.narrow(0, start, std::min(kPixelBlock, pixels.size(0) - start)), xy, sigma, opacity);
    blocks.push_back(torch::cat({torch::matmul(w, colors), w.sum(1, true)}, 1));
  }
  return torch::cat(blocks, 0).view({height, width, 4});
}

torch::Tensor render_views(const GaussianSet& g, int64_t resolution) {
  std::vector<torch::Tensor> views;
  for (auto v : kCanonicalViews) views.push_back(render_ortho(g, bodyfit::volume_camera(v, resolution), resolution, resolution));
  return torch::stack(views);
}

}  // namespace ihk::splat
