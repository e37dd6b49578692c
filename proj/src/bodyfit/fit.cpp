#include "ihk/bodyfit/fit.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ihk/common/log.hpp"

namespace ihk::bodyfit {

void Joints2D::validate(int64_t num_keypoints) const {
  if (positions.dim() != 2 || positions.size(0) != num_keypoints || positions.size(1) != 2) {
    throw std::invalid_argument("keypoint positions must be K x 2");
  }
  if (weights.dim() != 1 || weights.size(0) != num_keypoints) throw std::invalid_argument("keypoint weights must have K entries");
  if (!torch::isfinite(weights).all().item<bool>() || (weights < 0).any().item<bool>()) {
    throw std::invalid_argument("keypoint weights must be finite and nonnegative");
  }
  auto active = weights > 0;
  if (!torch::isfinite(positions.index({active})).all().item<bool>()) {
    throw std::invalid_argument("weighted keypoint positions must be finite");
  }
}

torch::Tensor default_keypoint_weights(const BodyModel& model, double body_weight, double detail_weight) {
  auto w = torch::full({model.num_keypoints()}, body_weight, torch::kFloat64);
  for (int64_t k = 0; k < model.num_keypoints(); ++k) {
    if (model.keypoint_is_detail[static_cast<std::size_t>(k)]) w[k] = detail_weight;
  }
  return w;
}

Joints2D synthesize_targets(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera,
                            const torch::Tensor& weights) {
  torch::NoGradGuard no_grad;
  return {project_ortho(forward_body(model, params).keypoints, camera), weights.to(torch::kFloat64).clone()};
}

torch::Tensor reprojection_loss(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera,
                                const Joints2D& targets, double reg_weight, const std::optional<torch::Tensor>& pose_anchor) {
  targets.validate(model.num_keypoints());
  auto proj = project_ortho(forward_body(model, params).keypoints, camera);
  // Zero-weight keypoints may carry NaN positions; mask them before the product.
  auto active = targets.weights > 0;
  auto target = torch::where(active.unsqueeze(1), targets.positions, proj.detach());
  auto data = (targets.weights * (proj - target).pow(2).sum(1)).sum();
  auto anchor = pose_anchor ? *pose_anchor : torch::zeros_like(params.pose);
  return data + reg_weight * (params.pose - anchor).pow(2).sum();
}

double weighted_rmse(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera, const Joints2D& targets) {
  torch::NoGradGuard no_grad;
  const double total = targets.weights.sum().item<double>();
  if (total <= 0.0) return 0.0;
  const double loss = reprojection_loss(model, params, camera, targets, 0.0).item<double>();
  return std::sqrt(loss / total);
}

FitResult fit_pose(const BodyModel& model, const BodyParams& init, const OrthoCamera& camera, const Joints2D& targets,
                   const FitConfig& config) {
  init.validate(model);
  targets.validate(model.num_keypoints());
  const auto anchor = init.pose.detach().clone();

  BodyParams current = init.detached_clone();
  auto evaluate = [&](const BodyParams& p) {
    torch::NoGradGuard no_grad;
    return reprojection_loss(model, p, camera, targets, config.reg_weight, anchor).item<double>();
  };
  auto gradient = [&](const BodyParams& p) {
    BodyParams q = p.detached_clone();
    q.pose.requires_grad_(true);
    if (config.optimize_translation) q.translation.requires_grad_(true);
    auto loss = reprojection_loss(model, q, camera, targets, config.reg_weight, anchor);
    loss.backward();
    auto gt = config.optimize_translation ? q.translation.grad() : torch::zeros_like(q.translation);
    return std::pair{q.pose.grad().detach(), gt.detach()};
  };

  FitResult result;
  double f = evaluate(current);
  result.initial_loss = f;
  result.params = current.detached_clone();
  result.final_loss = f;
  if (!std::isfinite(f)) {
    result.aborted = true;
    result.diagnostics = "initial loss is not finite";
    log_error("fit_pose: " + result.diagnostics);
    return result;
  }

  double step = config.initial_step;
  for (int it = 0; it < config.iterations; ++it) {
    auto [gp, gt] = gradient(current);
    const double gnorm2 = (gp.pow(2).sum() + gt.pow(2).sum()).item<double>();
    if (!std::isfinite(gnorm2)) {
      result.aborted = true;
      std::ostringstream msg;
      msg << "non-finite gradient at iteration " << it << " (loss " << f << ")";
      result.diagnostics = msg.str();
      log_error("fit_pose: " + result.diagnostics);
      break;
    }
    bool accepted = false;
    if (gnorm2 > 0.0) {
      double trial_step = step * config.grow;
      for (int bt = 0; bt < config.max_backtracks; ++bt, trial_step *= config.shrink) {
        BodyParams trial = current.detached_clone();
        trial.pose = trial.pose - trial_step * gp;
        trial.translation = trial.translation - trial_step * gt;
        const double ft = evaluate(trial);
        if (!std::isfinite(ft)) continue;  // shrink past the blow-up
        if (ft <= f - config.armijo * trial_step * gnorm2) {
          current = std::move(trial);
          f = ft;
          step = trial_step;
          accepted = true;
          ++result.accepted_steps;
          break;
        }
      }
    }
    if (accepted && f < result.final_loss) {
      result.final_loss = f;
      result.params = current.detached_clone();
    }
    result.best_loss_history.push_back(result.final_loss);
    if (!accepted) {
      // No descent step exists at this resolution: converged.
      for (int rest = it + 1; rest < config.iterations; ++rest) result.best_loss_history.push_back(result.final_loss);
      break;
    }
  }
  return result;
}

}  // namespace ihk::bodyfit
