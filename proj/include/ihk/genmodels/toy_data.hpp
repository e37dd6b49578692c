#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/bodyfit/camera.hpp"
#include "ihk/common/views.hpp"

namespace ihk::genmodels {

using Color = std::array<double, 3>;

struct NamedColor {
  std::string name;
  Color rgb;
};

// A procedurally dressed subject of the toy body.
struct ToyIdentity {
  uint64_t seed = 0;
  bodyfit::BodyParams params;
  NamedColor skin, hair, top, stripe, bottom, shoes;
  std::string top_type;     // "tank top", "t-shirt", "long-sleeve shirt"
  std::string bottom_type;  // "shorts", "trousers"
  bool striped = false;

  // Short garment name used in try-off instructions, e.g. "striped red t-shirt".
  std::string garment_label() const;
  // Detailed (~40 word) description of the subject.
  std::string describe() const;
};

nlohmann::json to_json(const ToyIdentity& id);

ToyIdentity sample_identity(const bodyfit::BodyModel& model, uint64_t seed);

// Per-face colours (F x 3) of a dressed identity, before shading.
torch::Tensor face_colors(const bodyfit::BodyModel& model, const ToyIdentity& id);

// Shaded colour render, H x W x 4 premultiplied RGBA in [0,1], rendered at
// `supersample` times the resolution and box-filtered down.
torch::Tensor render_color(const bodyfit::BodyModel& model, const ToyIdentity& id, const bodyfit::OrthoCamera& camera,
                           int64_t resolution, int64_t supersample = 2);
// Normal map with coverage: rgb = (n + 1) / 2 (0.5 grey background), alpha = coverage.
torch::Tensor render_normals_with_coverage(const bodyfit::BodyModel& model, const bodyfit::BodyParams& params,
                                           const bodyfit::OrthoCamera& camera, int64_t resolution,
                                           int64_t supersample = 2);

// Camera of view `v` for a part: the working volume for the body, the head box for the head.
bodyfit::OrthoCamera part_camera(BodyPart part, ViewLabel v, int64_t resolution);

// 4 x H x W x 4 stacks over the canonical views.
torch::Tensor render_color_views(const bodyfit::BodyModel& model, const ToyIdentity& id, BodyPart part,
                                 int64_t resolution);
torch::Tensor render_normal_views(const bodyfit::BodyModel& model, const bodyfit::BodyParams& params, BodyPart part,
                                  int64_t resolution);

// Flat-lay picture of the identity's top garment, H x W x 4 premultiplied.
torch::Tensor render_cloth(const ToyIdentity& id, int64_t resolution);

// Image (H x W x C) -> C x h x w box-filtered copy; H must be a multiple of h.
// Throws std::invalid_argument otherwise.
torch::Tensor downsample_image(const torch::Tensor& image, int64_t latent_resolution);
// Image (H x W x C in [0,1]) -> latent (C x h x w in [-1,1]) by box filtering;
// H must be a multiple of h. Throws std::invalid_argument otherwise.
torch::Tensor image_to_latent(const torch::Tensor& image, int64_t latent_resolution);
// Latent (C x h x w) -> image (h x w x C), clamped to [0,1].
torch::Tensor latent_to_image(const torch::Tensor& latent);

}  // namespace ihk::genmodels
