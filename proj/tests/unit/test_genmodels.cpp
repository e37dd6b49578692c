#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/diffusion/schedule.hpp"
#include "ihk/genmodels/checkpoint.hpp"
#include "ihk/genmodels/conditions.hpp"
#include "ihk/genmodels/gen_hres.hpp"
#include "ihk/genmodels/gen_schnell.hpp"
#include "ihk/genmodels/training.hpp"

using namespace ihk;
using namespace ihk::genmodels;

namespace {

const bodyfit::BodyModel& body() {
  static const bodyfit::BodyModel m = bodyfit::toy_body_model();
  return m;
}

ToyDataConfig small_data() {
  ToyDataConfig c;
  c.count = 2;
  c.image_resolution = 64;
  c.latent_resolution = 16;
  return c;
}

const std::vector<ToySample>& dataset() {
  static const auto d = make_toy_dataset(body(), small_data());
  return d;
}

mvattention::DenoiserConfig small_denoiser() {
  mvattention::DenoiserConfig c;
  c.base_channels = 16;
  c.channel_mults = {1, 2};
  c.num_train_steps = 100;
  return c;
}

splat::GeneratorConfig small_generator() {
  splat::GeneratorConfig c;
  c.latent_resolution = 16;
  c.features = 16;
  return c;
}

FlowModelConfig small_flow() {
  FlowModelConfig c;
  c.resolution = 16;
  c.base_channels = 16;
  return c;
}

// Returns the exact noise that produced x from `x0` under the base schedule.
EpsPredictor oracle_predictor(const torch::Tensor& x0b, const torch::Tensor& x0h, const diffusion::NoiseSchedule& s) {
  return [=](const torch::Tensor& xb, const torch::Tensor& xh, int64_t t) {
    const double ab = s.alpha_bar.at(static_cast<std::size_t>(t));
    return std::make_pair((xb - std::sqrt(ab) * x0b) / std::sqrt(1 - ab), (xh - std::sqrt(ab) * x0h) / std::sqrt(1 - ab));
  };
}

bool same_trajectory(const MvdSampleResult& a, const MvdSampleResult& b) {
  if (a.trajectory.size() != b.trajectory.size()) return false;
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    if (!torch::equal(a.trajectory[i], b.trajectory[i]) || !torch::equal(a.head_trajectory[i], b.head_trajectory[i])) {
      return false;
    }
  }
  return true;
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  return out;
}

}  // namespace

TEST_CASE("hash text embedding is deterministic and word based") {
  auto a = hash_text_embedding("A woman in a Red shirt");
  auto b = hash_text_embedding("a woman in a red shirt!");
  CHECK(a.sizes() == torch::IntArrayRef({6, 32}));
  CHECK(torch::equal(a, b));
  CHECK(torch::equal(a[1], hash_text_embedding("woman")[0]));
  CHECK_FALSE(torch::equal(a[1], a[5]));
  CHECK(hash_text_embedding("").size(0) == 0);
  CHECK(hash_text_embedding(std::string(400, 'a') + " b c", 32, 2).size(0) == 2);
  CHECK(tokenize("It's 2 pm") == std::vector<std::string>{"it", "s", "2", "pm"});
}

TEST_CASE("condition latents stack normal map and reference channels") {
  const auto& s = dataset()[0];
  CHECK(s.latents.body.sizes() == torch::IntArrayRef({4, 8, 16, 16}));
  CHECK(s.latents.head.sizes() == torch::IntArrayRef({4, 8, 16, 16}));
  CHECK(s.latents.channels() + 4 == small_denoiser().input_channels());
  CHECK(s.latents.body.min().item<double>() >= 0.0);
  CHECK(s.latents.body.max().item<double>() <= 1.0);
  CHECK(s.latents.aligned_offset == 0);
  CHECK(s.latents.reference_offset == -48);
  CHECK(s.latents.reference_positions.select(1, 1).max().item<double>() < 0);
  // every view shares the same reference channels
  CHECK(torch::equal(s.latents.body[0].slice(0, 4), s.latents.body[3].slice(0, 4)));
  CHECK(s.body_views.sizes() == torch::IntArrayRef({4, 4, 16, 16}));
  CHECK(s.body_views.min().item<double>() >= -1.0);
}

TEST_CASE("zeroed bundle encodes to zero conditions") {
  auto z = encode_condition_bundle(zeroed(dataset()[0].bundle), 16);
  CHECK(z.body.abs().max().item<double>() == 0.0);
  CHECK(z.head.abs().max().item<double>() == 0.0);
  CHECK(z.text.abs().max().item<double>() == 0.0);
}

TEST_CASE("resolution mismatches are rejected") {
  const auto& b = dataset()[0].bundle;
  CHECK_THROWS_AS(encode_condition_bundle(b, 24), std::invalid_argument);
  auto bad = b;
  bad.cloth_image = torch::zeros({32, 32, 4});
  CHECK_THROWS_AS(bad.validate(64), std::invalid_argument);
  CHECK_THROWS_AS(encode_condition_bundle(bad, 16), std::invalid_argument);
}

TEST_CASE("consistent sampling with zero consistent steps matches plain sampling") {
  torch::manual_seed(3);
  mvattention::Denoiser net(small_denoiser());
  splat::SplatGenerator gen(small_generator());
  auto sched = diffusion::make_schedule(100);
  GenSchnellConfig cfg;
  cfg.steps = 8;
  cfg.k_consistent = 0;
  cfg.latent_resolution = 16;
  auto predict = denoiser_predictor(net, dataset()[0].latents);
  auto plain = sample_mvd(predict, sched, cfg, 11);
  auto schnell = gen_schnell(predict, gen, sched, cfg, 11);
  CHECK(same_trajectory(plain, schnell));
  CHECK(schnell.gaussians.has_value());
  for (const auto& st : schnell.trace) CHECK_FALSE(st.consistent);

  SUBCASE("ancestral stepping too") {
    cfg.ancestral = true;
    CHECK(same_trajectory(sample_mvd(predict, sched, cfg, 5), gen_schnell(predict, gen, sched, cfg, 5)));
  }
}

TEST_CASE("gen_schnell is seed deterministic and honours k_consistent") {
  torch::manual_seed(4);
  mvattention::Denoiser net(small_denoiser());
  splat::SplatGenerator gen(small_generator());
  auto sched = diffusion::make_schedule(100);
  GenSchnellConfig cfg;
  CHECK(cfg.k_consistent == 10);
  cfg.steps = 12;
  cfg.latent_resolution = 16;
  auto bundle = dataset()[1].bundle;
  auto a = gen_schnell(bundle, net, gen, sched, cfg);
  auto b = gen_schnell(bundle, net, gen, sched, cfg);
  CHECK(same_trajectory(a, b));
  CHECK(torch::equal(a.gaussians->means, b.gaussians->means));
  bundle.seed += 1;
  CHECK_FALSE(torch::equal(gen_schnell(bundle, net, gen, sched, cfg).body, a.body));

  REQUIRE(a.trace.size() == 12);
  for (std::size_t k = 0; k < a.trace.size(); ++k) {
    CHECK(a.trace[k].consistent == (k < 10));
    CHECK(a.trace[k].index == static_cast<int64_t>(11 - k));
  }
  CHECK(a.trace.front().model_t == 99);
  CHECK(a.trace.back().model_t == 0);
  // consistency changes the trajectory
  cfg.k_consistent = 0;
  bundle.seed -= 1;
  CHECK_FALSE(torch::equal(gen_schnell(bundle, net, gen, sched, cfg).body, a.body));

  cfg.k_consistent = 13;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("x0 inversion holds at every step with the true noise") {
  auto sched = diffusion::make_schedule(1000);
  const auto& s = dataset()[0];
  auto x0b = s.body_views, x0h = s.head_views;
  torch::manual_seed(5);
  splat::SplatGenerator gen(small_generator());
  GenSchnellConfig cfg;
  cfg.steps = 25;
  cfg.latent_resolution = 16;
  for (int64_t k : {0, 10}) {
    cfg.k_consistent = k;
    int64_t seen = 0;
    double worst_body = 0.0, worst_head = 0.0;
    auto res = gen_schnell(oracle_predictor(x0b, x0h, sched), gen, sched, cfg, 9, [&](const StepState& st) {
      ++seen;
      worst_head = std::max(worst_head, (st.x0_head - x0h).abs().max().item<double>());
      worst_body = std::max(worst_body, (st.x0_body - x0b).abs().max().item<double>());
    });
    CHECK(seen == 25);
    CHECK(worst_head < 2e-3);
    CHECK(worst_body < 2e-3);
    if (k == 0) CHECK((res.body - x0b).abs().max().item<double>() < 2e-3);
  }
}

TEST_CASE("flow model shapes and determinism") {
  torch::manual_seed(6);
  auto cfg = small_flow();
  FlowModel fm(cfg);
  auto ex = hres_examples(dataset(), cfg);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].target.sizes() == torch::IntArrayRef({4, 16, 16}));
  CHECK(ex[0].cond.aligned.sizes() == torch::IntArrayRef({1, 4, 16, 16}));
  CHECK(ex[0].cond.reference_tokens.size(2) == cfg.reference_dim);
  auto cond = FlowConditions::stack({ex[0].cond, ex[1].cond});
  auto x = torch::randn({2, 4, 16, 16});
  auto v = fm(x, torch::tensor({0.2f, 0.7f}), cond);
  CHECK(v.sizes() == x.sizes());
  auto v1 = fm(x.slice(0, 1, 2), torch::tensor({0.7f}), cond.select(1));
  CHECK((v1[0] - v[1]).abs().max().item<double>() < 1e-5);

  auto a = sample_flow_image(fm, ex[0].cond, 4, 2);
  CHECK(torch::equal(a, sample_flow_image(fm, ex[0].cond, 4, 2)));
  CHECK(a.sizes() == torch::IntArrayRef({16, 16, 4}));

  auto t = tryoff_examples(dataset(), cfg);
  CHECK(t[0].target.sizes() == torch::IntArrayRef({4, 16, 16}));
  CHECK(tryoff_instruction("the red t-shirt") == "Please extract the red t-shirt for this person");
  CHECK_THROWS_AS(fm(x, torch::tensor({0.2f, 0.7f}), FlowConditions{}), std::exception);
}

TEST_CASE("gen_hres record carries the handoff") {
  torch::manual_seed(7);
  FlowModel fm(small_flow());
  auto r = gen_hres(dataset()[0].bundle, fm, 3);
  CHECK(r.image.sizes() == torch::IntArrayRef({16, 16, 4}));
  CHECK(r.record["kind"] == "gen_hres");
  CHECK(r.record["resolution"] == 16);
  CHECK(r.record["steps"] == 3);
  CHECK(r.record["seed"] == dataset()[0].bundle.seed);
  CHECK(r.record["checkpoint_hash"].get<std::string>().size() == 64);
  CHECK(r.record["handoff"]["cameras"].size() == 4);
  CHECK(r.record["handoff"]["body_params"].is_object());
  CHECK(r.record["trace"]["times"].size() == 3);
  CHECK(torch::equal(r.image, gen_hres(dataset()[0].bundle, fm, 3).image));
}

TEST_CASE("resumed training matches an uninterrupted run") {
  auto sched = diffusion::make_schedule(100);
  TrainConfig tc;
  tc.batch = 1;
  torch::manual_seed(8);
  MvdTrainer full(mvattention::Denoiser(small_denoiser()), sched, tc);
  torch::manual_seed(8);
  MvdTrainer first(mvattention::Denoiser(small_denoiser()), sched, tc);
  full.train(dataset(), 4);
  first.train(dataset(), 2);
  const auto path = std::filesystem::temp_directory_path() / "ihk_resume.safetensors";
  first.save(path);
  CHECK(read_checkpoint_info(path).step == 2);
  torch::manual_seed(99);
  MvdTrainer resumed(mvattention::Denoiser(small_denoiser()), sched, tc);
  resumed.load(path);
  CHECK(resumed.steps_done == 2);
  resumed.train(dataset(), 2);
  auto a = snapshot(*full.net), b = snapshot(*resumed.net);
  REQUIRE(a.size() == b.size());
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) same = same && torch::equal(a[i], b[i]);
  CHECK(same);

  mvattention::DenoiserConfig other = small_denoiser();
  other.base_channels = 8;
  mvattention::Denoiser wrong(other);
  CHECK_THROWS_AS(load_checkpoint(path, *wrong), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("toy training lowers the losses") {
  auto sched = diffusion::make_schedule(100);
  TrainConfig tc;
  tc.steps_per_epoch = 10;
  tc.lr = 2e-3;
  torch::manual_seed(9);
  mvattention::Denoiser net(small_denoiser());
  const double before = evaluate_mvd_eps_mse(dataset(), net, sched, 4);
  auto log = train_mvd(dataset(), net, sched, [&] { auto c = tc; c.steps = 50; return c; }());
  CHECK(log.all_finite);
  CHECK(log.epoch_losses.size() == 5);
  CHECK(evaluate_mvd_eps_mse(dataset(), net, sched, 4) < before);

  torch::manual_seed(10);
  FlowModel fm(small_flow());
  auto flog = train_flow(hres_examples(dataset(), small_flow()), fm, [&] { auto c = tc; c.steps = 40; return c; }());
  CHECK(flog.epoch_losses.back() < flog.epoch_losses.front());

  torch::manual_seed(11);
  splat::SplatGenerator gen(small_generator());
  auto fit = fit_generator(gen, dataset()[0], 15, 3e-3, 0);
  CHECK(fit.losses.back() < fit.losses.front());
  CHECK(std::isfinite(fit.psnr));
}
