#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <ATen/core/Generator.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/diffusion/schedule.hpp"
#include "ihk/genmodels/conditions.hpp"
#include "ihk/genmodels/flow_model.hpp"
#include "ihk/genmodels/toy_data.hpp"
#include "ihk/mvattention/denoiser.hpp"
#include "ihk/splat/generator.hpp"

namespace ihk::genmodels {

struct ToyDataConfig {
  int64_t count = 4;
  uint64_t seed = 0;
  int64_t image_resolution = 128;
  int64_t latent_resolution = 32;
  int64_t text_dim = 32;
};

// One subject with everything the trainers need.
struct ToySample {
  ToyIdentity identity;
  ConditionBundle bundle;     // image resolution
  ConditionLatents latents;   // latent resolution
  torch::Tensor body_views;   // 4 x 4 x h x w latents
  torch::Tensor head_views;   // 4 x 4 x h x w latents
  torch::Tensor front_image;  // image resolution, H x W x 4
};

std::vector<ToySample> make_toy_dataset(const bodyfit::BodyModel& model, const ToyDataConfig& config);

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch = 2;
  double lr = 1e-3;
  uint64_t seed = 0;
  int64_t steps_per_epoch = 50;
  double grad_clip = 1.0;
  int64_t log_every = 0;  // 0 = quiet

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainLog {
  std::vector<double> losses;        // per step
  std::vector<double> epoch_losses;  // mean over each complete epoch
  int64_t skipped_steps = 0;         // non-finite gradients
  bool all_finite = true;
};

// Randomness of step `step` depends only on (seed, step), so a run resumed
// from a checkpoint repeats the uninterrupted run exactly.
at::Generator step_generator(uint64_t seed, int64_t step);

class MvdTrainer {
 public:
  MvdTrainer(mvattention::Denoiser net, diffusion::NoiseSchedule schedule, TrainConfig config);

  // One optimiser step on the summed body + head epsilon MSE. Returns the loss.
  double step(const std::vector<ToySample>& data);
  TrainLog train(const std::vector<ToySample>& data, int64_t steps);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  mvattention::Denoiser net;
  torch::optim::Adam optimizer;
  int64_t steps_done = 0;

 private:
  diffusion::NoiseSchedule schedule_;
  TrainConfig config_;
  bool last_finite_ = true;
};

TrainLog train_mvd(const std::vector<ToySample>& data, mvattention::Denoiser& denoiser,
                   const diffusion::NoiseSchedule& schedule, const TrainConfig& config);

// Per-pixel epsilon MSE averaged over body and head views, on stratified
// timesteps with fixed noise.
double evaluate_mvd_eps_mse(const std::vector<ToySample>& data, mvattention::Denoiser& denoiser,
                            const diffusion::NoiseSchedule& schedule, int64_t draws_per_sample = 16, uint64_t seed = 7);

struct FlowExample {
  torch::Tensor target;  // C x R x R latent
  FlowConditions cond;   // batch of 1
};

std::vector<FlowExample> hres_examples(const std::vector<ToySample>& data, const FlowModelConfig& config);
std::vector<FlowExample> tryoff_examples(const std::vector<ToySample>& data, const FlowModelConfig& config);

class FlowTrainer {
 public:
  FlowTrainer(FlowModel net, TrainConfig config);

  double step(const std::vector<FlowExample>& data);
  TrainLog train(const std::vector<FlowExample>& data, int64_t steps);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  FlowModel net;
  torch::optim::Adam optimizer;
  int64_t steps_done = 0;

 private:
  TrainConfig config_;
  bool last_finite_ = true;
};

TrainLog train_flow(const std::vector<FlowExample>& data, FlowModel& model, const TrainConfig& config);

// Mean PSNR of Euler samples against the training targets.
double evaluate_flow_psnr(FlowModel& model, const std::vector<FlowExample>& data, int steps, uint64_t seed = 0);

// Single-scene generator fit on one subject's body views. Returns the PSNR
// of the re-rendered views against the targets after training.
struct GeneratorFit {
  std::vector<double> losses;
  double psnr = 0.0;
};
GeneratorFit fit_generator(splat::SplatGenerator& generator, const ToySample& sample, int64_t steps, double lr,
                           uint64_t seed = 0);

// Round-robin generator training over every subject; returns the mean PSNR.
GeneratorFit train_generator(splat::SplatGenerator& generator, const std::vector<ToySample>& data, int64_t steps,
                             double lr, uint64_t seed = 0);

// Inputs used by fit_generator: clean body views and a fixed noised copy.
std::pair<torch::Tensor, torch::Tensor> generator_inputs(const ToySample& sample, uint64_t seed);
torch::Tensor generator_targets(const ToySample& sample);

}  // namespace ihk::genmodels
