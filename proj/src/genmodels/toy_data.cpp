#include "ihk/genmodels/toy_data.hpp"

#include <random>
#include <stdexcept>

#include "ihk/bodyfit/raster.hpp"

namespace ihk::genmodels {

namespace {

const std::vector<NamedColor> kSkin{{"fair", {0.95, 0.80, 0.70}},
                                    {"light", {0.90, 0.72, 0.58}},
                                    {"tan", {0.76, 0.57, 0.42}},
                                    {"brown", {0.55, 0.38, 0.26}},
                                    {"dark", {0.36, 0.24, 0.17}}};
const std::vector<NamedColor> kHair{{"black", {0.08, 0.07, 0.07}}, {"brown", {0.38, 0.24, 0.13}},
                                    {"blonde", {0.90, 0.78, 0.45}}, {"red", {0.65, 0.22, 0.10}},
                                    {"grey", {0.62, 0.62, 0.64}}};
const std::vector<NamedColor> kGarment{{"red", {0.85, 0.12, 0.12}},   {"blue", {0.15, 0.30, 0.85}},
                                       {"green", {0.15, 0.62, 0.25}}, {"yellow", {0.95, 0.85, 0.15}},
                                       {"white", {0.95, 0.95, 0.95}}, {"black", {0.10, 0.10, 0.12}},
                                       {"orange", {0.95, 0.50, 0.10}}, {"purple", {0.50, 0.20, 0.70}},
                                       {"pink", {0.95, 0.55, 0.70}},  {"teal", {0.10, 0.60, 0.60}}};
const std::vector<NamedColor> kBottom{{"navy", {0.10, 0.14, 0.35}},  {"black", {0.08, 0.08, 0.09}},
                                      {"grey", {0.50, 0.50, 0.52}},  {"khaki", {0.74, 0.67, 0.48}},
                                      {"brown", {0.45, 0.30, 0.18}}, {"white", {0.92, 0.92, 0.90}}};
const std::vector<NamedColor> kShoes{{"white", {0.96, 0.96, 0.96}}, {"black", {0.06, 0.06, 0.06}},
                                     {"brown", {0.40, 0.25, 0.12}}, {"red", {0.80, 0.10, 0.10}}};
const std::vector<std::string> kTops{"tank top", "t-shirt", "long-sleeve shirt"};
const std::vector<std::string> kBottoms{"shorts", "trousers"};

// Joint indices of the toy skeleton.
enum Joint : int64_t {
  kPelvis, kSpine, kNeck, kHead, kLShoulder, kLElbow, kLWrist, kRShoulder, kRElbow, kRWrist,
  kLHip, kLKnee, kLAnkle, kRHip, kRKnee, kRAnkle
};

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

torch::Tensor box_filter(const torch::Tensor& image, int64_t factor) {
  if (factor == 1) return image;
  return torch::avg_pool2d(image.permute({2, 0, 1}).unsqueeze(0), factor).squeeze(0).permute({1, 2, 0}).contiguous();
}

}  // namespace

std::string ToyIdentity::garment_label() const {
  return (striped ? "striped " : "") + top.name + " " + top_type;
}

std::string ToyIdentity::describe() const {
  const double girth = params.shape[1].item<double>();
  const std::string build = girth > 0.4 ? "broad" : (girth < -0.4 ? "slim" : "average");
  const double abduct = -params.pose[kLShoulder][2].item<double>();
  const std::string stance = abduct > 1.0 ? "held slightly away from the body" : "relaxed at the sides";
  std::string s = "A person of " + build + " build with " + skin.name + " skin and short " + hair.name +
                  " hair, wearing a " + (striped ? "striped " : "plain ") + top.name + " " + top_type;
  if (striped) s += " with " + stripe.name + " stripes";
  s += ", " + bottom.name + " " + bottom_type + " and " + shoes.name + " shoes, standing upright with arms " + stance +
       ", photographed from the front against a clean empty studio background.";
  return s;
}

nlohmann::json to_json(const ToyIdentity& id) {
  auto c = [](const NamedColor& n) { return nlohmann::json{{"name", n.name}, {"rgb", n.rgb}}; };
  return {{"seed", id.seed},          {"params", bodyfit::to_json(id.params)}, {"skin", c(id.skin)},
          {"hair", c(id.hair)},       {"top", c(id.top)},                      {"stripe", c(id.stripe)},
          {"bottom", c(id.bottom)},   {"shoes", c(id.shoes)},                  {"top_type", id.top_type},
          {"bottom_type", id.bottom_type}, {"striped", id.striped}};
}

ToyIdentity sample_identity(const bodyfit::BodyModel& model, uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E5ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  ToyIdentity id;
  id.seed = seed;
  id.skin = pick(kSkin, rng);
  id.hair = pick(kHair, rng);
  id.top = pick(kGarment, rng);
  do {
    id.stripe = pick(kGarment, rng);
  } while (id.stripe.name == id.top.name);
  id.bottom = pick(kBottom, rng);
  id.shoes = pick(kShoes, rng);
  id.top_type = pick(kTops, rng);
  id.bottom_type = pick(kBottoms, rng);
  id.striped = uni(rng) < 0.4;

  auto p = bodyfit::BodyParams::zeros(model);
  auto pose = p.pose.accessor<double, 2>();
  // Arms hang in a loose A-pose; small variation elsewhere.
  const double abduct = 0.9 + 0.25 * gauss(rng);
  pose[kLShoulder][2] = -abduct;
  pose[kRShoulder][2] = abduct;
  pose[kLShoulder][0] = 0.15 * gauss(rng);
  pose[kRShoulder][0] = 0.15 * gauss(rng);
  pose[kLElbow][1] = 0.25 * std::abs(gauss(rng));
  pose[kRElbow][1] = -0.25 * std::abs(gauss(rng));
  for (auto j : {kLHip, kRHip}) pose[j][0] = 0.12 * gauss(rng);
  pose[kLHip][2] = -0.06 - 0.05 * std::abs(gauss(rng));
  pose[kRHip][2] = 0.06 + 0.05 * std::abs(gauss(rng));
  for (auto j : {kLKnee, kRKnee}) pose[j][0] = 0.2 * std::abs(gauss(rng));
  pose[kSpine][0] = 0.05 * gauss(rng);
  pose[kHead][1] = 0.15 * gauss(rng);
  auto shape = p.shape.accessor<double, 1>();
  for (int64_t s = 0; s < model.num_shape(); ++s) shape[s] = 0.6 * std::clamp(gauss(rng), -2.0, 2.0);
  id.params = p;
  return id;
}

torch::Tensor face_colors(const bodyfit::BodyModel& model, const ToyIdentity& id) {
  const auto nf = model.faces.size(0);
  auto out = torch::empty({nf, 3}, torch::kFloat64);
  auto faces = model.faces.accessor<int64_t, 2>();
  auto verts = model.template_vertices.accessor<double, 2>();
  auto skin_w = model.skinning_weights.accessor<double, 2>();
  const bool short_sleeve = id.top_type == "t-shirt";
  const bool long_sleeve = id.top_type == "long-sleeve shirt";
  const bool trousers = id.bottom_type == "trousers";
  for (int64_t f = 0; f < nf; ++f) {
    double cy = 0.0, cz = 0.0;
    std::vector<double> w(static_cast<std::size_t>(model.num_joints()), 0.0);
    for (int k = 0; k < 3; ++k) {
      const auto v = faces[f][k];
      cy += verts[v][1] / 3.0;
      cz += verts[v][2] / 3.0;
      for (int64_t j = 0; j < model.num_joints(); ++j) w[static_cast<std::size_t>(j)] += skin_w[v][j];
    }
    const auto joint = static_cast<int64_t>(std::max_element(w.begin(), w.end()) - w.begin());
    const Color* c = &id.skin.rgb;
    auto top_color = [&]() -> const Color* {
      if (id.striped && static_cast<int64_t>(std::floor(cy / 0.08)) % 2 != 0) return &id.stripe.rgb;
      return &id.top.rgb;
    };
    switch (joint) {
      case kHead:
      case kNeck:
        if (cy > 0.74 || (cy > 0.6 && cz < -0.02)) c = &id.hair.rgb;
        else if (joint == kNeck && cy < 0.5) c = top_color();
        break;
      case kPelvis:
      case kSpine:
        c = cy > -0.02 ? top_color() : &id.bottom.rgb;
        break;
      case kLShoulder:
      case kRShoulder:
        if (short_sleeve || long_sleeve) c = top_color();
        break;
      case kLElbow:
      case kRElbow:
        if (long_sleeve) c = top_color();
        break;
      case kLHip:
      case kRHip:
        c = &id.bottom.rgb;
        break;
      case kLKnee:
      case kRKnee:
        if (trousers) c = &id.bottom.rgb;
        break;
      case kLAnkle:
      case kRAnkle:
        c = &id.shoes.rgb;
        break;
      default:
        break;
    }
    for (int k = 0; k < 3; ++k) out[f][k] = (*c)[static_cast<std::size_t>(k)];
  }
  return out;
}

torch::Tensor render_color(const bodyfit::BodyModel& model, const ToyIdentity& id, const bodyfit::OrthoCamera& camera,
                           int64_t resolution, int64_t supersample) {
  torch::NoGradGuard no_grad;
  auto cam = camera;
  cam.image_scale *= static_cast<double>(supersample);
  const double s = static_cast<double>(supersample);
  cam.principal_offset = {camera.principal_offset[0] * s + 0.5 * (s - 1), camera.principal_offset[1] * s + 0.5 * (s - 1)};
  const auto body = bodyfit::forward_body(model, id.params);
  const auto n = resolution * supersample;
  auto raster = bodyfit::rasterize(body.vertices, model.faces, cam, n, n);
  // Simple view-facing shading keeps the 3D shape readable.
  auto facing = raster.face_normals.select(1, 2).clamp_min(0.0).unsqueeze(1);
  auto shaded = face_colors(model, id) * (0.6 + 0.4 * facing);
  return box_filter(bodyfit::shade_face_colors(raster, shaded), supersample);
}

torch::Tensor render_normals_with_coverage(const bodyfit::BodyModel& model, const bodyfit::BodyParams& params,
                                           const bodyfit::OrthoCamera& camera, int64_t resolution,
                                           int64_t supersample) {
  torch::NoGradGuard no_grad;
  auto cam = camera;
  const double s = static_cast<double>(supersample);
  cam.image_scale *= s;
  cam.principal_offset = {camera.principal_offset[0] * s + 0.5 * (s - 1), camera.principal_offset[1] * s + 0.5 * (s - 1)};
  const auto body = bodyfit::forward_body(model, params);
  const auto n = resolution * supersample;
  auto raster = bodyfit::rasterize(body.vertices, model.faces, cam, n, n);
  auto rgb = bodyfit::shade_normals(raster);
  auto alpha = (raster.face_index >= 0).to(torch::kFloat32).unsqueeze(-1);
  return box_filter(torch::cat({rgb, alpha}, -1), supersample);
}

bodyfit::OrthoCamera part_camera(BodyPart part, ViewLabel v, int64_t resolution) {
  return part == BodyPart::body ? bodyfit::volume_camera(v, resolution) : bodyfit::head_camera(v, resolution);
}

torch::Tensor render_color_views(const bodyfit::BodyModel& model, const ToyIdentity& id, BodyPart part,
                                 int64_t resolution) {
  std::vector<torch::Tensor> out;
  for (auto v : kCanonicalViews) out.push_back(render_color(model, id, part_camera(part, v, resolution), resolution));
  return torch::stack(out);
}

torch::Tensor render_normal_views(const bodyfit::BodyModel& model, const bodyfit::BodyParams& params, BodyPart part,
                                  int64_t resolution) {
  std::vector<torch::Tensor> out;
  for (auto v : kCanonicalViews) {
    out.push_back(render_normals_with_coverage(model, params, part_camera(part, v, resolution), resolution));
  }
  return torch::stack(out);
}

torch::Tensor render_cloth(const ToyIdentity& id, int64_t resolution) {
  const int64_t ss = 4, n = resolution * ss;
  auto img = torch::zeros({n, n, 4}, torch::kFloat32);
  auto a = img.accessor<float, 3>();
  const double sleeve = id.top_type == "t-shirt" ? 0.35 : (id.top_type == "long-sleeve shirt" ? 0.8 : 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      // Garment frame: x in [-1,1] left to right, y in [-1,1] bottom to top.
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
      const double y = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0;
      const double ax = std::abs(x);
      bool inside = ax < 0.42 && y > -0.8 && y < 0.62;
      if (inside && y > 0.45 && ax < 0.16 + 0.5 * (0.62 - y)) inside = false;  // neckline
      if (!inside && sleeve > 0.0 && ax >= 0.42) {
        // Sleeves slope down and out from the shoulder.
        const double along = (ax - 0.42) / 0.55;
        const double top = 0.62 - 0.9 * (ax - 0.42);
        inside = along <= sleeve && along >= 0.0 && y < top && y > top - 0.28;
      }
      if (id.top_type == "tank top" && inside && y > 0.2 && ax > 0.3) inside = false;  // arm holes
      if (!inside) continue;
      const bool stripe = id.striped && static_cast<int64_t>(std::floor((y + 1.0) / 0.16)) % 2 != 0;
      const auto& c = stripe ? id.stripe.rgb : id.top.rgb;
      for (int k = 0; k < 3; ++k) a[i][j][k] = static_cast<float>(c[static_cast<std::size_t>(k)]);
      a[i][j][3] = 1.0f;
    }
  }
  return box_filter(img, ss);
}

torch::Tensor downsample_image(const torch::Tensor& image, int64_t latent_resolution) {
  if (!image.defined() || image.dim() != 3) throw std::invalid_argument("image must be H x W x C");
  const auto h = image.size(0), w = image.size(1);
  if (latent_resolution <= 0 || h != w || h % latent_resolution != 0) {
    throw std::invalid_argument("image resolution " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not a multiple of latent resolution " + std::to_string(latent_resolution));
  }
  auto chw = image.to(torch::kFloat32).permute({2, 0, 1}).unsqueeze(0);
  auto pooled = h == latent_resolution ? chw : torch::avg_pool2d(chw, h / latent_resolution);
  return pooled.squeeze(0).contiguous();
}

torch::Tensor image_to_latent(const torch::Tensor& image, int64_t latent_resolution) {
  return downsample_image(image, latent_resolution) * 2.0 - 1.0;
}

torch::Tensor latent_to_image(const torch::Tensor& latent) {
  if (!latent.defined() || latent.dim() != 3) throw std::invalid_argument("latent must be C x h x w");
  return ((latent.to(torch::kFloat32) + 1.0) * 0.5).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous();
}

}  // namespace ihk::genmodels
