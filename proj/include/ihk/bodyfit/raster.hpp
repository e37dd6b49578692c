#pragma once

#include <torch/torch.h>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/bodyfit/camera.hpp"

namespace ihk::bodyfit {

struct RasterResult {
  torch::Tensor face_index;  // H x W int64, -1 for background
  torch::Tensor depth;       // H x W float64 camera-space z, -inf for background
  torch::Tensor face_normals;  // F x 3 camera-space unit normals (zero rows for skipped faces)
};

// Z-buffered triangle rasterization under an orthographic camera. A pixel is
// covered when its centre lies inside the projected triangle; the nearest
// camera-space depth (largest z) wins. Faces with zero 3D area are skipped
// with a logged warning.
RasterResult rasterize(const torch::Tensor& vertices, const torch::Tensor& faces, const OrthoCamera& camera,
                       int64_t height, int64_t width);

// Flat-shaded camera-space normal map, rgb = (n + 1) / 2, background 0.5 grey.
// Returns H x W x 3 float32.
torch::Tensor render_normal_map(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera,
                                int64_t height, int64_t width);
torch::Tensor shade_normals(const RasterResult& raster);

// Flat per-face colours (F x 3 in [0,1]) with an alpha channel; background is
// transparent. Returns H x W x 4 float32 with premultiplied colour.
torch::Tensor shade_face_colors(const RasterResult& raster, const torch::Tensor& face_colors);

}  // namespace ihk::bodyfit
