#pragma once

#include <array>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/common/views.hpp"

namespace ihk::bodyfit {

// Orthographic camera. Conventions, used everywhere in the project:
//  - column vectors, right-handed; p_cam = rotation * p_world
//  - the camera looks down its -z axis, so a larger camera-space z is nearer
//  - projected coordinates: p2d = image_scale * p_cam.xy + principal_offset,
//    x to the right and y up
//  - raster images store row i, column j at projected (x = j, y = H - 1 - i),
//    so row 0 is the top of the picture
struct OrthoCamera {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  double image_scale = 1.0;                                    // pixels per meter
  std::array<double, 2> principal_offset{0.0, 0.0};            // pixels

  // Throws std::invalid_argument unless rotation is orthonormal with det +1
  // (1e-6) and image_scale > 0.
  void validate() const;
  torch::Tensor rotation_tensor(torch::ScalarType dtype = torch::kFloat64) const;
};

// Camera orbiting the subject about +y. `yaw_degrees` = 0 is the front view
// (camera on +z looking toward -z); 90 sits on the subject's right side (-x).
OrthoCamera yaw_camera(double yaw_degrees, double image_scale, std::array<double, 2> offset);
OrthoCamera view_camera(ViewLabel view, double image_scale, std::array<double, 2> offset);

// Cameras framing the working volume [-1,1]^3 at `resolution` pixels.
OrthoCamera volume_camera(ViewLabel view, int64_t resolution);
// Fixed head-box crop: same orientation as the body camera, framing a square
// of side `box` meters centred at `center` (world coordinates).
OrthoCamera head_camera(ViewLabel view, int64_t resolution, const std::array<double, 3>& center = {0.0, 0.68, 0.0},
                        double box = 0.4);

// points: N x 3 -> N x 2. Differentiable in points.
torch::Tensor project_ortho(const torch::Tensor& points, const OrthoCamera& camera);
// Camera-space coordinates (N x 3) for the same convention.
torch::Tensor to_camera_space(const torch::Tensor& points, const OrthoCamera& camera);

nlohmann::json to_json(const OrthoCamera& camera);
OrthoCamera camera_from_json(const nlohmann::json& j);

}  // namespace ihk::bodyfit
