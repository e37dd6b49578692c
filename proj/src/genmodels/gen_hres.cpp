#include "ihk/genmodels/gen_hres.hpp"

#include <stdexcept>

#include "ihk/bodyfit/camera.hpp"
#include "ihk/common/hashing.hpp"
#include "ihk/common/module_io.hpp"
#include "ihk/genmodels/toy_data.hpp"

namespace ihk::genmodels {

FlowConditions hres_conditions(const ConditionBundle& bundle, const FlowModelConfig& config, int64_t patch) {
  bundle.validate(bundle.resolution());
  if (bundle.resolution() % config.resolution != 0) {
    throw std::invalid_argument("bundle resolution is not a multiple of the model resolution");
  }
  FlowConditions c;
  c.aligned = downsample_image(bundle.body_normal_maps[0], config.resolution).unsqueeze(0);
  if (c.aligned.size(1) != config.aligned_channels) throw std::invalid_argument("aligned channel count mismatch");
  if (config.reference_dim > 0) {
    auto [tokens, positions] = patch_tokens(downsample_image(bundle.cloth_image, config.resolution), patch, kReferenceOffset);
    if (tokens.size(1) != config.reference_dim) throw std::invalid_argument("reference token size mismatch");
    c.reference_tokens = tokens.unsqueeze(0);
    c.reference_positions = positions;
  }
  c.text = bundle.text_tokens.to(torch::kFloat32).unsqueeze(0);
  return c;
}

std::string tryoff_instruction(const std::string& garment) { return "Please extract " + garment + " for this person"; }

FlowConditions tryoff_conditions(const torch::Tensor& person_image, const std::string& garment,
                                 const FlowModelConfig& config) {
  FlowConditions c;
  c.aligned = downsample_image(person_image, config.resolution).unsqueeze(0);
  if (c.aligned.size(1) != config.aligned_channels) throw std::invalid_argument("aligned channel count mismatch");
  c.text = hash_text_embedding(tryoff_instruction(garment), config.text_dim).unsqueeze(0);
  return c;
}

torch::Tensor sample_flow_image(FlowModel& model, const FlowConditions& cond, int steps, uint64_t seed,
                                diffusion::FlowTrace* trace) {
  torch::NoGradGuard no_grad;
  const auto& c = model->config();
  auto v = [&](const torch::Tensor& x, double t) { return model(x, torch::full({x.size(0)}, t), cond); };
  auto x = diffusion::flow_sample(v, {1, c.channels, c.resolution, c.resolution}, steps, seed, torch::kFloat32, trace);
  return latent_to_image(x.squeeze(0));
}

HResResult gen_hres(const ConditionBundle& bundle, FlowModel& model, int steps) {
  const auto cond = hres_conditions(bundle, model->config());
  diffusion::FlowTrace trace;
  HResResult out;
  out.image = sample_flow_image(model, cond, steps, bundle.seed, &trace);
  const auto config = to_json(model->config());
  nlohmann::json cameras = nlohmann::json::object();
  for (auto v : kCanonicalViews) {
    cameras[std::string(to_string(v))] = bodyfit::to_json(bodyfit::volume_camera(v, model->config().resolution));
  }
  out.record = {{"kind", "gen_hres"},
                {"seed", bundle.seed},
                {"steps", steps},
                {"resolution", model->config().resolution},
                {"config_hash", sha256_hex(config.dump())},
                {"checkpoint_hash", module_hash(*model, config)},
                {"caption", bundle.caption},
                {"trace", {{"times", trace.times}, {"x_rms", trace.x_norm}}},
                {"handoff",
                 {{"body_params", bundle.body_params ? bodyfit::to_json(*bundle.body_params) : nlohmann::json()},
                  {"cameras", cameras}}}};
  return out;
}

}  // namespace ihk::genmodels
