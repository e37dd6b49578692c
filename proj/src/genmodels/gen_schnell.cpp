#include "ihk/genmodels/gen_schnell.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <stdexcept>

#include "ihk/splat/renderer.hpp"

namespace ihk::genmodels {

using diffusion::NoiseSchedule;

void GenSchnellConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (k_consistent < 0 || k_consistent > steps) throw std::invalid_argument("k_consistent must lie in [0, steps]");
  if (latent_resolution <= 0) throw std::invalid_argument("latent_resolution must be positive");
}

nlohmann::json to_json(const GenSchnellConfig& c) {
  return {{"steps", c.steps},
          {"k_consistent", c.k_consistent},
          {"ancestral", c.ancestral},
          {"latent_resolution", c.latent_resolution},
          {"clip_x0", c.clip_x0}};
}

GenSchnellConfig gen_schnell_config_from_json(const nlohmann::json& j) {
  GenSchnellConfig c;
  c.steps = j.value("steps", c.steps);
  c.k_consistent = j.value("k_consistent", c.k_consistent);
  c.ancestral = j.value("ancestral", c.ancestral);
  c.latent_resolution = j.value("latent_resolution", c.latent_resolution);
  c.clip_x0 = j.value("clip_x0", c.clip_x0);
  c.validate();
  return c;
}

nlohmann::json to_json(const StepTrace& s) {
  return {{"index", s.index},
          {"model_t", s.model_t},
          {"consistent", s.consistent},
          {"consistency_mse", s.consistency_mse},
          {"x_rms", s.x_rms}};
}

EpsPredictor denoiser_predictor(mvattention::Denoiser& denoiser, const ConditionLatents& conditions) {
  return [&denoiser, conditions](const torch::Tensor& xb, const torch::Tensor& xh, int64_t model_t) {
    torch::NoGradGuard no_grad;
    auto t = torch::full({1}, model_t, torch::kInt64);
    auto text = conditions.text.defined() ? conditions.text.unsqueeze(0) : torch::Tensor();
    auto [eb, eh] = denoiser(xb.unsqueeze(0), xh.unsqueeze(0), conditions.body.unsqueeze(0),
                             conditions.head.unsqueeze(0), text, t);
    return std::make_pair(eb.squeeze(0), eh.squeeze(0));
  };
}

torch::Tensor render_latents(const splat::GaussianSet& g, int64_t resolution) {
  return splat::render_views(g, resolution).permute({0, 3, 1, 2}) * 2.0 - 1.0;
}

namespace {

struct Sampler {
  NoiseSchedule schedule;
  GenSchnellConfig config;
  at::Generator rng;
};

Sampler make_sampler(const NoiseSchedule& base, const GenSchnellConfig& config, uint64_t seed) {
  config.validate();
  return {diffusion::respace(base, config.steps), config, at::make_generator<at::CPUGeneratorImpl>(seed)};
}

torch::Tensor initial_state(Sampler& s, int64_t channels) {
  const auto r = s.config.latent_resolution;
  return torch::randn({4, channels, r, r}, s.rng);
}

torch::Tensor x0_from(const torch::Tensor& x, const torch::Tensor& eps, int64_t i, const Sampler& s) {
  auto x0 = diffusion::predict_x0(x, eps, i, s.schedule);
  return s.config.clip_x0 ? x0.clamp(-1.0, 1.0) : x0;
}

// One update from index i to i - 1 given the x0 the step should trust.
torch::Tensor advance(const torch::Tensor& x, const torch::Tensor& x0, int64_t i, Sampler& s) {
  if (s.config.ancestral) {
    auto noise = torch::randn(x.sizes(), s.rng);
    return diffusion::ancestral_step(x, x0, i, noise, s.schedule);
  }
  auto eps = diffusion::eps_from_x0(x, x0, i, s.schedule);
  return diffusion::ddim_step(x, x0, eps, i, i - 1, s.schedule);
}

void check_finite(const torch::Tensor& x, int64_t index) {
  if (!torch::isfinite(x).all().item<bool>()) {
    throw std::runtime_error("non-finite latents at inference step " + std::to_string(index));
  }
}

double rms(const torch::Tensor& x) { return x.pow(2).mean().sqrt().item<double>(); }

}  // namespace

MvdSampleResult sample_mvd(const EpsPredictor& predict, const NoiseSchedule& schedule, const GenSchnellConfig& config,
                           uint64_t seed, int64_t channels) {
  auto s = make_sampler(schedule, config, seed);
  MvdSampleResult out;
  auto xb = initial_state(s, channels);
  auto xh = initial_state(s, channels);
  for (int64_t i = s.schedule.size() - 1; i >= 0; --i) {
    out.trajectory.push_back(xb);
    out.head_trajectory.push_back(xh);
    const auto model_t = s.schedule.timesteps[static_cast<std::size_t>(i)];
    auto [eb, eh] = predict(xb, xh, model_t);
    auto x0b = x0_from(xb, eb, i, s);
    auto x0h = x0_from(xh, eh, i, s);
    xb = advance(xb, x0b, i, s);
    xh = advance(xh, x0h, i, s);
    check_finite(xb, i);
    check_finite(xh, i);
    out.trace.push_back({i, model_t, false, 0.0, rms(xb)});
  }
  out.trajectory.push_back(xb);
  out.head_trajectory.push_back(xh);
  out.body = xb;
  out.head = xh;
  return out;
}

MvdSampleResult gen_schnell(const EpsPredictor& predict, splat::SplatGenerator& generator, const NoiseSchedule& schedule,
                            const GenSchnellConfig& config, uint64_t seed, const StepObserver& observer) {
  torch::NoGradGuard no_grad;
  auto s = make_sampler(schedule, config, seed);
  const auto channels = generator->config().latent_channels;
  if (generator->config().latent_resolution != config.latent_resolution) {
    throw std::invalid_argument("generator and sampler latent resolutions differ");
  }
  MvdSampleResult out;
  auto xb = initial_state(s, channels);
  auto xh = initial_state(s, channels);
  const int64_t n = s.schedule.size();
  for (int64_t i = n - 1; i >= 0; --i) {
    out.trajectory.push_back(xb);
    out.head_trajectory.push_back(xh);
    const auto model_t = s.schedule.timesteps[static_cast<std::size_t>(i)];
    auto [eb, eh] = predict(xb, xh, model_t);
    auto x0b = x0_from(xb, eb, i, s);
    auto x0h = x0_from(xh, eh, i, s);

    auto gaussians = generator(x0b, xb);
    auto rendered = render_latents(gaussians, config.latent_resolution);
    const bool consistent = (n - 1 - i) < config.k_consistent;
    if (observer) observer({i, xb, xh, eb, eh, x0b, x0h, rendered});

    StepTrace st{i, model_t, consistent, (rendered - x0b).pow(2).mean().item<double>(), 0.0};
    xb = advance(xb, consistent ? rendered : x0b, i, s);
    xh = advance(xh, x0h, i, s);
    check_finite(xb, i);
    check_finite(xh, i);
    st.x_rms = rms(xb);
    out.trace.push_back(st);
    if (i == 0) out.gaussians = gaussians.detached_clone();
  }
  out.trajectory.push_back(xb);
  out.head_trajectory.push_back(xh);
  out.body = xb;
  out.head = xh;
  return out;
}

MvdSampleResult gen_schnell(const ConditionBundle& bundle, mvattention::Denoiser& denoiser,
                            splat::SplatGenerator& generator, const NoiseSchedule& schedule,
                            const GenSchnellConfig& config) {
  const auto latents = encode_condition_bundle(bundle, config.latent_resolution);
  return gen_schnell(denoiser_predictor(denoiser, latents), generator, schedule, config, bundle.seed);
}

}  // namespace ihk::genmodels
