#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/diffusion/schedule.hpp"
#include "ihk/genmodels/conditions.hpp"
#include "ihk/mvattention/denoiser.hpp"
#include "ihk/splat/generator.hpp"

namespace ihk::genmodels {

struct GenSchnellConfig {
  int64_t steps = 50;
  int64_t k_consistent = 10;  // leading steps that use the splat renders
  bool ancestral = false;     // DDIM (eta = 0) unless set
  int64_t latent_resolution = 32;
  bool clip_x0 = true;

  void validate() const;
};

nlohmann::json to_json(const GenSchnellConfig& c);
GenSchnellConfig gen_schnell_config_from_json(const nlohmann::json& j);

// Epsilon prediction for one subject: body and head latents are 4 x C x h x w,
// `model_t` is the training-schedule timestep.
using EpsPredictor =
    std::function<std::pair<torch::Tensor, torch::Tensor>(const torch::Tensor& x_body, const torch::Tensor& x_head,
                                                          int64_t model_t)>;

EpsPredictor denoiser_predictor(mvattention::Denoiser& denoiser, const ConditionLatents& conditions);

struct StepTrace {
  int64_t index = 0;    // position in the inference schedule, counting down
  int64_t model_t = 0;  // training timestep
  bool consistent = false;
  double consistency_mse = 0.0;  // |render - x0_pred|^2 over body views (0 without a generator)
  double x_rms = 0.0;
};

nlohmann::json to_json(const StepTrace& s);

// Everything a step computed, for harnesses.
struct StepState {
  int64_t index = 0;
  torch::Tensor x_body, x_head;    // state entering the step
  torch::Tensor eps_body, eps_head;
  torch::Tensor x0_body, x0_head;  // 2D predictions
  torch::Tensor x0_render;         // splat re-render of the body views (undefined without a generator)
};
using StepObserver = std::function<void(const StepState&)>;

struct MvdSampleResult {
  torch::Tensor body, head;                // final latents, 4 x C x h x w
  std::vector<torch::Tensor> trajectory;   // body state before every step, then the final state
  std::vector<torch::Tensor> head_trajectory;
  std::vector<StepTrace> trace;
  std::optional<splat::GaussianSet> gaussians;  // splat of the last step
};

// Plain multi-view sampling on the 2D predictions only.
MvdSampleResult sample_mvd(const EpsPredictor& predict, const diffusion::NoiseSchedule& schedule,
                           const GenSchnellConfig& config, uint64_t seed, int64_t channels = 4);

// Consistent reverse sampling. Every step decodes the body predictions into
// Gaussians and renders the 4 views; for the first k_consistent steps those
// renders replace the body x0 prediction in the update. Head views always
// use their 2D prediction. Throws std::runtime_error naming the step if the
// latents become non-finite.
MvdSampleResult gen_schnell(const EpsPredictor& predict, splat::SplatGenerator& generator,
                            const diffusion::NoiseSchedule& schedule, const GenSchnellConfig& config, uint64_t seed,
                            const StepObserver& observer = {});

MvdSampleResult gen_schnell(const ConditionBundle& bundle, mvattention::Denoiser& denoiser,
                            splat::SplatGenerator& generator, const diffusion::NoiseSchedule& schedule,
                            const GenSchnellConfig& config);

// Splat renders of the 4 body views as latents (4 x 4 x R x R in [-1,1]).
torch::Tensor render_latents(const splat::GaussianSet& g, int64_t resolution);

}  // namespace ihk::genmodels
