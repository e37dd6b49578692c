#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace ihk::bodyfit {

// Linear-blend-skinned parametric body. All float tensors are float64.
struct BodyModel {
  torch::Tensor template_vertices;   // V x 3, meters
  torch::Tensor faces;               // F x 3, int64 vertex indices
  torch::Tensor joint_regressor;     // K x V, rows sum to 1 (output keypoints)
  torch::Tensor skeleton_regressor;  // J x V, rows sum to 1 (kinematic pivots)
  torch::Tensor skinning_weights;    // V x J, nonnegative, rows sum to 1
  torch::Tensor shape_basis;         // S x V x 3, meters per unit coefficient
  std::vector<int64_t> parents;      // J, root has parent -1
  std::vector<std::string> joint_names;     // J
  std::vector<std::string> keypoint_names;  // K
  std::vector<bool> keypoint_is_detail;     // K, face and hand keypoints

  int64_t num_vertices() const { return template_vertices.size(0); }
  int64_t num_joints() const { return static_cast<int64_t>(parents.size()); }
  int64_t num_keypoints() const { return joint_regressor.size(0); }
  int64_t num_shape() const { return shape_basis.size(0); }

  // Throws std::invalid_argument on any broken invariant.
  void validate() const;
  // Joints ordered so that every parent precedes its children.
  std::vector<int64_t> topological_order() const;
};

struct BodyParams {
  torch::Tensor pose;         // J x 3 axis-angle, radians
  torch::Tensor shape;        // S
  torch::Tensor translation;  // 3, meters
  double scale = 1.0;

  static BodyParams zeros(const BodyModel& model);
  void validate(const BodyModel& model) const;
  BodyParams detached_clone() const;
};

struct BodyOutput {
  torch::Tensor vertices;   // V x 3
  torch::Tensor keypoints;  // K x 3 (regressed from posed vertices)
  torch::Tensor pivots;     // J x 3 posed skeleton pivots
};

// Axis-angle (N x 3) -> rotation matrices (N x 3 x 3). Exactly identity at 0.
torch::Tensor rodrigues(const torch::Tensor& axis_angle);

// vertices = scale * LBS(template + shape . basis, pose) + translation.
BodyOutput forward_body(const BodyModel& model, const BodyParams& params);

void save_body_model(const std::filesystem::path& path, const BodyModel& model);
BodyModel load_body_model(const std::filesystem::path& path);

// Procedurally generated humanoid: 858 vertices, 16 joints, 20 keypoints,
// 8 shape coefficients. Rest pose faces +z with y up.
BodyModel make_toy_body_model();

// Default location of the committed fixture, if the source tree is present.
std::filesystem::path default_body_fixture_path();
// Loads the committed fixture when available, otherwise builds the model.
BodyModel toy_body_model();

nlohmann::json to_json(const BodyParams& params);
BodyParams body_params_from_json(const nlohmann::json& j);

}  // namespace ihk::bodyfit
