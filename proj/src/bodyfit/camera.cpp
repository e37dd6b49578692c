#include "ihk/bodyfit/camera.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ihk::bodyfit {

void OrthoCamera::validate() const {
  if (!(image_scale > 0.0) || !std::isfinite(image_scale)) throw std::invalid_argument("camera image_scale must be > 0");
  const auto& r = rotation;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[3 * k + i] * r[3 * k + j];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-6) throw std::invalid_argument("camera rotation is not orthonormal");
    }
  }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  if (std::abs(det - 1.0) > 1e-6) throw std::invalid_argument("camera rotation must have det +1");
}

torch::Tensor OrthoCamera::rotation_tensor(torch::ScalarType dtype) const {
  return torch::tensor(std::vector<double>(rotation.begin(), rotation.end()), torch::kFloat64).view({3, 3}).to(dtype);
}

OrthoCamera yaw_camera(double yaw_degrees, double image_scale, std::array<double, 2> offset) {
  const double a = yaw_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  OrthoCamera cam;
  // Rotation about +y by `a`: maps world +x onto camera -z when a = 90 deg.
  cam.rotation = {c, 0, s, 0, 1, 0, -s, 0, c};
  // Snap the exact quarter turns so canonical views are bit-exact permutations.
  for (auto& v : cam.rotation) {
    if (std::abs(v) < 1e-12) v = 0.0;
    if (std::abs(std::abs(v) - 1.0) < 1e-12) v = std::copysign(1.0, v);
  }
  cam.image_scale = image_scale;
  cam.principal_offset = offset;
  return cam;
}

OrthoCamera view_camera(ViewLabel view, double image_scale, std::array<double, 2> offset) {
  return yaw_camera(90.0 * static_cast<int>(view), image_scale, offset);
}

OrthoCamera volume_camera(ViewLabel view, int64_t resolution) {
  const double half = 0.5 * static_cast<double>(resolution);
  const double centre = half - 0.5;
  return view_camera(view, half, {centre, centre});
}

OrthoCamera head_camera(ViewLabel view, int64_t resolution, const std::array<double, 3>& center, double box) {
  const double scale = static_cast<double>(resolution) / box;
  auto cam = view_camera(view, scale, {0.0, 0.0});
  // Place the rotated box centre at the image centre.
  const auto& r = cam.rotation;
  const double cx = r[0] * center[0] + r[1] * center[1] + r[2] * center[2];
  const double cy = r[3] * center[0] + r[4] * center[1] + r[5] * center[2];
  const double mid = 0.5 * static_cast<double>(resolution) - 0.5;
  cam.principal_offset = {mid - scale * cx, mid - scale * cy};
  return cam;
}

torch::Tensor to_camera_space(const torch::Tensor& points, const OrthoCamera& camera) {
  if (points.dim() != 2 || points.size(1) != 3) throw std::invalid_argument("points must be N x 3");
  return torch::matmul(points, camera.rotation_tensor(points.scalar_type()).t());
}

torch::Tensor project_ortho(const torch::Tensor& points, const OrthoCamera& camera) {
  camera.validate();
  auto cam = to_camera_space(points, camera);
  auto offset = torch::tensor({camera.principal_offset[0], camera.principal_offset[1]},
                              torch::TensorOptions().dtype(points.scalar_type()));
  return camera.image_scale * cam.slice(1, 0, 2) + offset;
}

nlohmann::json to_json(const OrthoCamera& camera) {
  return {{"rotation", camera.rotation}, {"image_scale", camera.image_scale}, {"principal_offset", camera.principal_offset}};
}

OrthoCamera camera_from_json(const nlohmann::json& j) {
  OrthoCamera cam;
  cam.rotation = j.at("rotation").get<std::array<double, 9>>();
  cam.image_scale = j.at("image_scale").get<double>();
  cam.principal_offset = j.at("principal_offset").get<std::array<double, 2>>();
  cam.validate();
  return cam;
}

}  // namespace ihk::bodyfit
