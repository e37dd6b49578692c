#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "ihk/bodyfit/camera.hpp"
#include "ihk/common/image_io.hpp"
#include "ihk/splat/generator.hpp"
#include "ihk/splat/renderer.hpp"
#include "support/oracles.hpp"

using namespace ihk;
using namespace ihk::splat;

namespace {

bodyfit::OrthoCamera pixel_camera(double scale, double ox, double oy) {
  bodyfit::OrthoCamera cam;
  cam.image_scale = scale;
  cam.principal_offset = {ox, oy};
  return cam;
}

GaussianSet single(double x, double y, double z, double sigma, double opacity, torch::ScalarType dt = torch::kFloat64) {
  return GaussianSet{torch::tensor({{x, y, z}}, dt), torch::tensor({std::log(sigma)}, dt),
                     torch::tensor({{0.9, 0.4, 0.1}}, dt), torch::tensor({std::log(opacity / (1 - opacity))}, dt)};
}

GaussianSet concat(const GaussianSet& a, const GaussianSet& b) {
  return {torch::cat({a.means, b.means}), torch::cat({a.log_scales, b.log_scales}), torch::cat({a.colors, b.colors}),
          torch::cat({a.logit_opacities, b.logit_opacities})};
}

using oracle::random_scene;

}  // namespace

TEST_CASE("a single Gaussian renders a centred, radially symmetric footprint") {
  auto g = single(0, 0, 0, 1.7, 0.99);
  auto img = render_ortho(g, pixel_camera(1.0, 4.0, 4.0), 9, 9);
  auto alpha = img.select(2, 3);
  CHECK(alpha.argmax().item<int64_t>() == 4 * 9 + 4);
  double worst = 0;
  for (int i = 0; i < 9; ++i) {
    for (int j = 0; j < 9; ++j) {
      const int di = i - 4, dj = j - 4;
      const double a = alpha[i][j].item<double>();
      for (auto [ri, rj] : {std::pair{dj, -di}, {-di, -dj}, {-dj, di}, {di, -dj}, {dj, di}}) {
        worst = std::max(worst, std::abs(a - alpha[4 + ri][4 + rj].item<double>()));
      }
    }
  }
  CHECK(worst < 1e-6);
  CHECK(alpha[4][4].item<double>() == doctest::Approx(0.99).epsilon(1e-12));
}

TEST_CASE("rendering is clamped and premultiplied") {
  auto g = single(0, 0, 0, 2.0, 1.0 - 1e-9);
  auto img = render_ortho(g, pixel_camera(1.0, 4.0, 4.0), 9, 9);
  CHECK(img[4][4][3].item<double>() == doctest::Approx(kMaxAlpha).epsilon(1e-12));
  CHECK(img[4][4][0].item<double>() == doctest::Approx(0.9 * kMaxAlpha).epsilon(1e-12));
}

TEST_CASE("disjoint Gaussians composite to the sum of their renders") {
  auto cam = pixel_camera(1.0, 0.0, 0.0);
  auto a = single(4, 4, 0.3, 0.8, 0.7), b = single(20, 14, -0.2, 0.8, 0.6);
  auto both = render_ortho(concat(a, b), cam, 20, 26);
  auto sum = render_ortho(a, cam, 20, 26) + render_ortho(b, cam, 20, 26);
  CHECK((both - sum).abs().max().item<double>() < 1e-12);
}

TEST_CASE("nearer Gaussians occlude farther ones") {
  auto cam = pixel_camera(1.0, 4.0, 4.0);
  auto near = single(0, 0, 1.0, 1.5, 0.95);
  auto far = single(0, 0, -1.0, 1.5, 0.95);
  far.colors = torch::tensor({{0.0, 0.0, 1.0}}, torch::kFloat64);
  auto img = render_ortho(concat(far, near), cam, 9, 9);
  // Front colour weight 0.95, back weight 0.95 * 0.05.
  CHECK(img[4][4][0].item<double>() == doctest::Approx(0.9 * 0.95).epsilon(1e-9));
  CHECK(img[4][4][2].item<double>() == doctest::Approx(0.1 * 0.95 + 0.95 * 0.05).epsilon(1e-9));
}

TEST_CASE("compositing weights never exceed one per pixel") {
  std::mt19937 rng(3);
  for (int s = 0; s < 10; ++s) {
    auto g = random_scene(64, rng);
    g.logit_opacities = g.logit_opacities + 4.0;
    auto w = compositing_weights(g, bodyfit::volume_camera(ViewLabel::front, 16), 16, 16);
    CHECK((w >= 0).all().item<bool>());
    CHECK(w.sum(1).max().item<double>() <= 1.0 + 1e-9);
  }
}

TEST_CASE("equal-depth disjoint Gaussians commute") {
  auto cam = pixel_camera(1.0, 0.0, 0.0);
  auto a = single(3, 3, 0.0, 0.7, 0.8), b = single(12, 9, 0.0, 0.7, 0.5), c = single(3, 12, 0.0, 0.6, 0.4);
  auto ab = render_ortho(concat(concat(a, b), c), cam, 16, 16);
  auto ba = render_ortho(concat(concat(c, b), a), cam, 16, 16);
  CHECK((ab - ba).abs().max().item<double>() < 1e-12);
}

TEST_CASE("renderer gradients match central finite differences") {
  std::mt19937 rng(17);
  const double h = 1e-6;
  double worst = 0;
  for (int scene = 0; scene < 10; ++scene) {
    auto g = random_scene(1 + scene % 8, rng);
    const auto cam = bodyfit::volume_camera(kCanonicalViews[scene % 4], 16);
    auto probe = torch::randn({16, 16, 4}, torch::kFloat64);
    std::vector<torch::Tensor*> fields{&g.means, &g.colors, &g.logit_opacities, &g.log_scales};
    for (auto* f : fields) f->set_requires_grad(true);
    auto loss = (render_ortho(g, cam, 16, 16) * probe).sum();
    loss.backward();
    for (auto* f : fields) {
      auto analytic = f->grad().clone().view(-1);
      auto numeric = torch::zeros_like(analytic);
      auto flat = f->detach().view(-1);
      for (int64_t k = 0; k < flat.numel(); ++k) {
        torch::NoGradGuard no_grad;
        const double orig = flat[k].item<double>();
        flat[k] = orig + h;
        const double up = (render_ortho(g, cam, 16, 16) * probe).sum().item<double>();
        flat[k] = orig - h;
        const double down = (render_ortho(g, cam, 16, 16) * probe).sum().item<double>();
        flat[k] = orig;
        numeric[k] = (up - down) / (2 * h);
      }
      const double rel = (analytic - numeric).norm().item<double>() / std::max(numeric.norm().item<double>(), 1e-8);
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("Gaussian sets round-trip and are validated on import") {
  std::mt19937 rng(4);
  auto g = random_scene(5, rng).to(torch::kFloat32);
  auto path = std::filesystem::temp_directory_path() / "ihk_gaussians.safetensors";
  save_gaussians(path, g);
  auto back = load_gaussians(path);
  CHECK(torch::equal(back.means, g.means));
  CHECK(torch::equal(back.colors, g.colors));
  auto file = to_array_file(g);
  file.arrays[2].second = file.arrays[2].second + 2.0;  // colours out of range
  save_array_file(path, file);
  CHECK_THROWS_AS(load_gaussians(path), std::invalid_argument);
  std::filesystem::remove(path);

  GaussianSet empty{torch::zeros({0, 3}), torch::zeros({0}), torch::zeros({0, 3}), torch::zeros({0})};
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
}

namespace {

GeneratorConfig small_generator() {
  GeneratorConfig c;
  c.latent_resolution = 16;
  c.features = 32;
  c.heads = 2;
  c.initial_scale = 0.1;
  return c;
}

}  // namespace

TEST_CASE("the generator is deterministic, bounded and checks its views") {
  torch::manual_seed(1);
  SplatGenerator gen(small_generator());
  {
    torch::NoGradGuard g;
    gen->head->weight.normal_(0, 2.0);
  }
  auto pred = torch::randn({4, 4, 16, 16}), xt = torch::randn({4, 4, 16, 16});
  auto a = gen(pred, xt), b = gen(pred, xt);
  CHECK(a.size() == 4 * 8 * 8);
  CHECK(torch::equal(a.means, b.means));
  CHECK(torch::equal(a.colors, b.colors));
  CHECK(a.means.abs().max().item<double>() <= 1.0);
  a.validate();

  auto views = mvattention::canonical_view_set(pred, BodyPart::body);
  CHECK(torch::equal(splat_generator(views, xt, gen).means, a.means));
  auto three = mvattention::canonical_view_set(pred.narrow(0, 0, 3), BodyPart::body);
  CHECK_THROWS_AS(splat_generator(three, xt, gen), std::invalid_argument);
  auto head = mvattention::canonical_view_set(pred, BodyPart::head);
  CHECK_THROWS_AS(splat_generator(head, xt, gen), std::invalid_argument);

  {
    torch::NoGradGuard g;
    gen->head->bias.fill_(-1e4);
  }
  auto tiny = gen(pred, xt);
  CHECK(tiny.log_scales.min().item<double>() >= std::log(0.1) - 3.0 - 1e-5);
}

TEST_CASE("generator training steps") {
  torch::manual_seed(2);
  std::mt19937 rng(9);
  SplatGenerator gen(small_generator());
  auto scene = random_scene(40, rng).to(torch::kFloat32);
  torch::Tensor targets;
  {
    torch::NoGradGuard g;
    targets = render_views(scene, 16);
  }
  auto pred = targets.permute({0, 3, 1, 2}) * 2 - 1;
  auto xt = torch::randn({4, 4, 16, 16});

  SUBCASE("a zero learning rate leaves parameters unchanged") {
    torch::optim::Adam opt(gen->parameters(), torch::optim::AdamOptions(0.0));
    std::vector<torch::Tensor> before;
    for (const auto& p : gen->parameters()) before.push_back(p.detach().clone());
    auto step = generator_train_step(gen, opt, targets, pred, xt);
    CHECK(std::isfinite(step.loss));
    CHECK_FALSE(step.skipped);
    auto params = gen->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(torch::equal(params[i], before[i]));
  }
  SUBCASE("loss decreases while fitting one scene") {
    torch::optim::Adam opt(gen->parameters(), torch::optim::AdamOptions(3e-3));
    const double start = generator_loss(gen, targets, pred, xt);
    double last = start;
    for (int i = 0; i < 100; ++i) last = generator_train_step(gen, opt, targets, pred, xt).loss;
    CHECK(last < 0.5 * start);
  }
  SUBCASE("loss vanishes exactly on its own renders") {
    torch::Tensor own;
    {
      torch::NoGradGuard g;
      own = render_views(gen(pred, xt), 16);
    }
    CHECK(generator_loss(gen, own, pred, xt) == 0.0);
    CHECK(generator_loss(gen, targets, pred, xt) > 0.0);
  }
}
