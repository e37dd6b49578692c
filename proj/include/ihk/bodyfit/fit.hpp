#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/bodyfit/camera.hpp"

namespace ihk::bodyfit {

struct Joints2D {
  torch::Tensor positions;  // K x 2 float64, pixels
  torch::Tensor weights;    // K float64, >= 0

  void validate(int64_t num_keypoints) const;
};

// 1.0 for body keypoints, `detail_weight` for face and hand keypoints.
torch::Tensor default_keypoint_weights(const BodyModel& model, double body_weight = 1.0, double detail_weight = 10.0);

// Projects the model keypoints, giving noise-free targets with the given weights.
Joints2D synthesize_targets(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera,
                            const torch::Tensor& weights);

// sum_k w_k |proj(J_k) - target_k|^2 + reg_weight * |pose - pose_anchor|^2.
// Differentiable in params.pose and params.translation. With no anchor the
// regulariser is taken about the zero pose.
torch::Tensor reprojection_loss(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera,
                                const Joints2D& targets, double reg_weight,
                                const std::optional<torch::Tensor>& pose_anchor = std::nullopt);

// sqrt(sum_k w_k |r_k|^2 / sum_k w_k), in pixels.
double weighted_rmse(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera, const Joints2D& targets);

struct FitConfig {
  int iterations = 200;
  double reg_weight = 0.1;  // pulls the pose toward the initial estimate
  bool optimize_translation = true;
  double initial_step = 1e-5;
  double armijo = 1e-4;
  double shrink = 0.5;
  double grow = 2.0;
  int max_backtracks = 40;
};

struct FitResult {
  BodyParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> best_loss_history;  // one entry per iteration, nonincreasing
  int accepted_steps = 0;
  bool aborted = false;
  std::string diagnostics;
};

// Gradient descent with backtracking line search on the pose (and translation
// unless disabled); shape and scale stay fixed. Deterministic for a config.
FitResult fit_pose(const BodyModel& model, const BodyParams& init, const OrthoCamera& camera, const Joints2D& targets,
                   const FitConfig& config = {});

// Keypoint files: JSON array of {name, x, y, weight} in model keypoint order.
void save_keypoints(const std::filesystem::path& path, const BodyModel& model, const Joints2D& joints);
Joints2D load_keypoints(const std::filesystem::path& path, const BodyModel& model);

}  // namespace ihk::bodyfit
