#include "ihk/genmodels/training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <stdexcept>

#include "ihk/common/image_io.hpp"
#include "ihk/common/log.hpp"
#include "ihk/genmodels/checkpoint.hpp"
#include "ihk/genmodels/gen_hres.hpp"
#include "ihk/splat/renderer.hpp"

namespace ihk::genmodels {

std::vector<ToySample> make_toy_dataset(const bodyfit::BodyModel& model, const ToyDataConfig& config) {
  if (config.count <= 0) throw std::invalid_argument("dataset needs at least one subject");
  std::vector<ToySample> out;
  for (int64_t k = 0; k < config.count; ++k) {
    ToySample s;
    s.identity = sample_identity(model, config.seed + static_cast<uint64_t>(k));
    const auto res = config.image_resolution;
    s.front_image = render_color(model, s.identity, part_camera(BodyPart::body, ViewLabel::front, res), res);
    s.bundle = make_condition_bundle(model, s.identity.params, render_cloth(s.identity, res), s.identity.describe(),
                                     s.identity.seed, res, config.text_dim);
    s.latents = encode_condition_bundle(s.bundle, config.latent_resolution);
    auto to_latents = [&](BodyPart part) {
      auto imgs = render_color_views(model, s.identity, part, res);
      std::vector<torch::Tensor> v;
      for (int64_t i = 0; i < 4; ++i) v.push_back(image_to_latent(imgs[i], config.latent_resolution));
      return torch::stack(v);
    };
    s.body_views = to_latents(BodyPart::body);
    s.head_views = to_latents(BodyPart::head);
    out.push_back(std::move(s));
  }
  return out;
}

void TrainConfig::validate() const {
  if (steps < 0 || batch <= 0 || !(lr >= 0.0) || steps_per_epoch <= 0) throw std::invalid_argument("bad train config");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},   {"batch", c.batch},
          {"lr", c.lr},         {"seed", c.seed},
          {"steps_per_epoch", c.steps_per_epoch}, {"grad_clip", c.grad_clip},
          {"log_every", c.log_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

at::Generator step_generator(uint64_t seed, int64_t step) {
  return at::make_generator<at::CPUGeneratorImpl>(seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(step) + 1);
}

namespace {

// Clips, checks and applies the gradients. Returns false (without stepping)
// when any gradient is non-finite.
bool apply_gradients(torch::nn::Module& net, torch::optim::Adam& opt, double clip) {
  auto params = net.parameters();
  for (const auto& p : params) {
    if (p.grad().defined() && !torch::isfinite(p.grad()).all().item<bool>()) {
      opt.zero_grad();
      return false;
    }
  }
  if (clip > 0.0) torch::nn::utils::clip_grad_norm_(params, clip);
  opt.step();
  return true;
}

void record(TrainLog& log, double loss, bool finite, int64_t step, const TrainConfig& config, const char* what) {
  log.losses.push_back(loss);
  if (!finite) {
    log.all_finite = false;
    ++log.skipped_steps;
  }
  const auto n = static_cast<int64_t>(log.losses.size());
  if (n % config.steps_per_epoch == 0) {
    double sum = 0.0;
    for (int64_t i = n - config.steps_per_epoch; i < n; ++i) sum += log.losses[static_cast<std::size_t>(i)];
    log.epoch_losses.push_back(sum / static_cast<double>(config.steps_per_epoch));
  }
  if (config.log_every > 0 && (step + 1) % config.log_every == 0) {
    log_info(std::string(what) + " step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
  }
}

}  // namespace

MvdTrainer::MvdTrainer(mvattention::Denoiser net_, diffusion::NoiseSchedule schedule, TrainConfig config)
    : net(std::move(net_)),
      optimizer(net->parameters(), torch::optim::AdamOptions(config.lr)),
      schedule_(std::move(schedule)),
      config_(config) {
  config_.validate();
  schedule_.validate();
  if (schedule_.size() != net->config().num_train_steps) throw std::invalid_argument("schedule length != denoiser steps");
}

double MvdTrainer::step(const std::vector<ToySample>& data) {
  if (data.empty()) throw std::invalid_argument("empty training set");
  auto gen = step_generator(config_.seed, steps_done);
  const auto b = config_.batch;
  auto idx = torch::randint(static_cast<int64_t>(data.size()), {b}, gen, torch::kInt64);
  auto t = torch::randint(schedule_.size(), {b}, gen, torch::kInt64);
  std::vector<torch::Tensor> xb, xh, cb, ch, text;
  int64_t longest = 0;
  for (int64_t i = 0; i < b; ++i) longest = std::max(longest, data[static_cast<std::size_t>(idx[i].item<int64_t>())].latents.text.size(0));
  for (int64_t i = 0; i < b; ++i) {
    const auto& s = data[static_cast<std::size_t>(idx[i].item<int64_t>())];
    xb.push_back(s.body_views);
    xh.push_back(s.head_views);
    cb.push_back(s.latents.body);
    ch.push_back(s.latents.head);
    auto tt = s.latents.text;
    if (tt.size(0) < longest) tt = torch::cat({tt, torch::zeros({longest - tt.size(0), tt.size(1)})});
    text.push_back(tt);
  }
  auto x0b = torch::stack(xb), x0h = torch::stack(xh);
  auto eb = torch::randn(x0b.sizes(), gen), eh = torch::randn(x0h.sizes(), gen);
  auto xtb = diffusion::q_sample(x0b, t, eb, schedule_);
  auto xth = diffusion::q_sample(x0h, t, eh, schedule_);

  net->train();
  optimizer.zero_grad();
  auto [pb, ph] = net(xtb, xth, torch::stack(cb), torch::stack(ch), torch::stack(text), t);
  auto loss = diffusion::mvd_loss(pb, ph, eb, eh);
  loss.backward();
  last_finite_ = std::isfinite(loss.item<double>()) && apply_gradients(*net, optimizer, config_.grad_clip);
  ++steps_done;
  return loss.item<double>();
}

TrainLog MvdTrainer::train(const std::vector<ToySample>& data, int64_t steps) {
  TrainLog log;
  for (int64_t i = 0; i < steps; ++i) {
    const auto s = steps_done;
    const double loss = step(data);
    record(log, loss, last_finite_, s, config_, "mvd");
  }
  return log;
}

void MvdTrainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, *net, to_json(net->config()), &optimizer, steps_done, {{"kind", "mvd"}, {"train", to_json(config_)}});
}

void MvdTrainer::load(const std::filesystem::path& path) {
  steps_done = load_checkpoint(path, *net, &optimizer).step;
}

TrainLog train_mvd(const std::vector<ToySample>& data, mvattention::Denoiser& denoiser,
                   const diffusion::NoiseSchedule& schedule, const TrainConfig& config) {
  MvdTrainer trainer(denoiser, schedule, config);
  return trainer.train(data, config.steps);
}

double evaluate_mvd_eps_mse(const std::vector<ToySample>& data, mvattention::Denoiser& denoiser,
                            const diffusion::NoiseSchedule& schedule, int64_t draws_per_sample, uint64_t seed) {
  torch::NoGradGuard no_grad;
  denoiser->eval();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  double total = 0.0;
  for (const auto& s : data) {
    const auto n = draws_per_sample;
    std::vector<int64_t> ts;
    for (int64_t k = 0; k < n; ++k) {
      ts.push_back(static_cast<int64_t>((static_cast<double>(k) + 0.5) * static_cast<double>(schedule.size()) /
                                        static_cast<double>(n)));
    }
    auto t = torch::tensor(ts, torch::kInt64);
    auto x0b = s.body_views.unsqueeze(0).expand({n, -1, -1, -1, -1});
    auto x0h = s.head_views.unsqueeze(0).expand({n, -1, -1, -1, -1});
    auto eb = torch::randn(x0b.sizes(), gen), eh = torch::randn(x0h.sizes(), gen);
    auto cb = s.latents.body.unsqueeze(0).expand({n, -1, -1, -1, -1});
    auto ch = s.latents.head.unsqueeze(0).expand({n, -1, -1, -1, -1});
    auto text = s.latents.text.unsqueeze(0).expand({n, -1, -1});
    auto [pb, ph] = denoiser(diffusion::q_sample(x0b, t, eb, schedule), diffusion::q_sample(x0h, t, eh, schedule), cb, ch,
                             text, t);
    total += 0.5 * diffusion::mvd_loss(pb, ph, eb, eh).item<double>();
  }
  return total / static_cast<double>(data.size());
}

std::vector<FlowExample> hres_examples(const std::vector<ToySample>& data, const FlowModelConfig& config) {
  std::vector<FlowExample> out;
  for (const auto& s : data) out.push_back({image_to_latent(s.front_image, config.resolution), hres_conditions(s.bundle, config)});
  return out;
}

std::vector<FlowExample> tryoff_examples(const std::vector<ToySample>& data, const FlowModelConfig& config) {
  std::vector<FlowExample> out;
  for (const auto& s : data) {
    out.push_back({image_to_latent(s.bundle.cloth_image, config.resolution),
                   tryoff_conditions(s.front_image, s.identity.garment_label(), config)});
  }
  return out;
}

FlowTrainer::FlowTrainer(FlowModel net_, TrainConfig config)
    : net(std::move(net_)), optimizer(net->parameters(), torch::optim::AdamOptions(config.lr)), config_(config) {
  config_.validate();
}

double FlowTrainer::step(const std::vector<FlowExample>& data) {
  if (data.empty()) throw std::invalid_argument("empty training set");
  auto gen = step_generator(config_.seed, steps_done);
  const auto b = config_.batch;
  auto idx = torch::randint(static_cast<int64_t>(data.size()), {b}, gen, torch::kInt64);
  auto t = torch::rand({b}, gen);
  std::vector<torch::Tensor> targets;
  std::vector<FlowConditions> conds;
  for (int64_t i = 0; i < b; ++i) {
    const auto& ex = data[static_cast<std::size_t>(idx[i].item<int64_t>())];
    targets.push_back(ex.target);
    conds.push_back(ex.cond);
  }
  auto target = torch::stack(targets);
  auto eps = torch::randn(target.sizes(), gen);
  auto x_t = diffusion::flow_interpolate(target, eps, t);
  net->train();
  optimizer.zero_grad();
  auto loss = diffusion::flow_matching_loss(net(x_t, t, FlowConditions::stack(conds)), eps, target);
  loss.backward();
  last_finite_ = std::isfinite(loss.item<double>()) && apply_gradients(*net, optimizer, config_.grad_clip);
  ++steps_done;
  return loss.item<double>();
}

TrainLog FlowTrainer::train(const std::vector<FlowExample>& data, int64_t steps) {
  TrainLog log;
  for (int64_t i = 0; i < steps; ++i) {
    const auto s = steps_done;
    const double loss = step(data);
    record(log, loss, last_finite_, s, config_, "flow");
  }
  return log;
}

void FlowTrainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, *net, to_json(net->config()), &optimizer, steps_done, {{"kind", "flow"}, {"train", to_json(config_)}});
}

void FlowTrainer::load(const std::filesystem::path& path) { steps_done = load_checkpoint(path, *net, &optimizer).step; }

TrainLog train_flow(const std::vector<FlowExample>& data, FlowModel& model, const TrainConfig& config) {
  FlowTrainer trainer(model, config);
  return trainer.train(data, config.steps);
}

double evaluate_flow_psnr(FlowModel& model, const std::vector<FlowExample>& data, int steps, uint64_t seed) {
  model->eval();
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto img = sample_flow_image(model, data[i].cond, steps, seed + i);
    total += psnr(img, latent_to_image(data[i].target));
  }
  return total / static_cast<double>(data.size());
}

std::pair<torch::Tensor, torch::Tensor> generator_inputs(const ToySample& sample, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto noise = torch::randn(sample.body_views.sizes(), gen);
  return {sample.body_views, std::sqrt(0.5) * sample.body_views + std::sqrt(0.5) * noise};
}

torch::Tensor generator_targets(const ToySample& sample) {
  std::vector<torch::Tensor> v;
  for (int64_t i = 0; i < 4; ++i) v.push_back(latent_to_image(sample.body_views[i]));
  return torch::stack(v);
}

GeneratorFit fit_generator(splat::SplatGenerator& generator, const ToySample& sample, int64_t steps, double lr,
                           uint64_t seed) {
  auto [pred, x_t] = generator_inputs(sample, seed);
  auto targets = generator_targets(sample);
  torch::optim::Adam opt(generator->parameters(), torch::optim::AdamOptions(lr));
  GeneratorFit fit;
  for (int64_t i = 0; i < steps; ++i) fit.losses.push_back(splat::generator_train_step(generator, opt, targets, pred, x_t).loss);
  torch::NoGradGuard no_grad;
  auto renders = splat::render_views(generator(pred, x_t), targets.size(1));
  fit.psnr = psnr(renders, targets);
  return fit;
}

GeneratorFit train_generator(splat::SplatGenerator& generator, const std::vector<ToySample>& data, int64_t steps,
                             double lr, uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("empty training set");
  std::vector<std::pair<torch::Tensor, torch::Tensor>> inputs;
  std::vector<torch::Tensor> targets;
  for (std::size_t i = 0; i < data.size(); ++i) {
    inputs.push_back(generator_inputs(data[i], seed + i));
    targets.push_back(generator_targets(data[i]));
  }
  torch::optim::Adam opt(generator->parameters(), torch::optim::AdamOptions(lr));
  GeneratorFit fit;
  for (int64_t s = 0; s < steps; ++s) {
    const auto i = static_cast<std::size_t>(s) % data.size();
    fit.losses.push_back(splat::generator_train_step(generator, opt, targets[i], inputs[i].first, inputs[i].second).loss);
  }
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto renders = splat::render_views(generator(inputs[i].first, inputs[i].second), targets[i].size(1));
    fit.psnr += psnr(renders, targets[i]) / static_cast<double>(data.size());
  }
  return fit;
}

}  // namespace ihk::genmodels
