#include "ihk/genmodels/conditions.hpp"

#include <cctype>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "ihk/genmodels/toy_data.hpp"

namespace ihk::genmodels {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

// Box-Muller over raw engine output, so the vectors do not depend on the
// standard library's distribution implementations.
std::vector<float> bucket_vector(uint64_t bucket, int64_t dim) {
  std::mt19937_64 eng(bucket * 0xD1B54A32D192ED03ULL + 17);
  auto unit = [&] { return (static_cast<double>(eng() >> 11) + 0.5) * (1.0 / 9007199254740992.0); };
  std::vector<float> v(static_cast<std::size_t>(dim));
  for (int64_t i = 0; i < dim; i += 2) {
    const double r = std::sqrt(-2.0 * std::log(unit()));
    const double th = 2.0 * std::numbers::pi * unit();
    v[static_cast<std::size_t>(i)] = static_cast<float>(r * std::cos(th));
    if (i + 1 < dim) v[static_cast<std::size_t>(i + 1)] = static_cast<float>(r * std::sin(th));
  }
  return v;
}

void check_image(const torch::Tensor& t, int64_t dims, int64_t resolution, const char* what) {
  if (!t.defined() || t.dim() != dims || t.size(dims - 1) != 4 || t.size(dims - 3) != resolution ||
      t.size(dims - 2) != resolution) {
    throw std::invalid_argument(std::string(what) + " must be " + std::to_string(resolution) + "x" +
                                std::to_string(resolution) + " RGBA");
  }
}

}  // namespace

torch::Tensor hash_text_embedding(const std::string& text, int64_t dim, int64_t max_tokens, int64_t vocab) {
  if (dim <= 0 || max_tokens < 0 || vocab <= 0) throw std::invalid_argument("bad text embedding sizes");
  const auto words = tokenize(text);
  const auto n = std::min<int64_t>(static_cast<int64_t>(words.size()), max_tokens);
  auto out = torch::zeros({n, dim}, torch::kFloat32);
  for (int64_t i = 0; i < n; ++i) {
    const auto v = bucket_vector(fnv1a(words[static_cast<std::size_t>(i)]) % static_cast<uint64_t>(vocab), dim);
    out[i] = torch::tensor(v);
  }
  return out;
}

void ConditionBundle::validate(int64_t resolution) const {
  check_image(cloth_image, 3, resolution, "cloth image");
  check_image(body_normal_maps, 4, resolution, "body normal maps");
  check_image(head_normal_maps, 4, resolution, "head normal maps");
  if (body_normal_maps.size(0) != 4 || head_normal_maps.size(0) != 4) throw std::invalid_argument("4 views required");
  if (!text_tokens.defined() || text_tokens.dim() != 2) throw std::invalid_argument("text tokens must be L x D");
}

ConditionBundle make_condition_bundle(const bodyfit::BodyModel& model, const bodyfit::BodyParams& params,
                                      const torch::Tensor& cloth_image, const std::string& caption, uint64_t seed,
                                      int64_t resolution, int64_t text_dim) {
  ConditionBundle b;
  b.caption = caption;
  b.text_tokens = hash_text_embedding(caption, text_dim);
  b.body_normal_maps = render_normal_views(model, params, BodyPart::body, resolution);
  b.head_normal_maps = render_normal_views(model, params, BodyPart::head, resolution);
  b.cloth_image = cloth_image.to(torch::kFloat32);
  b.seed = seed;
  b.body_params = params.detached_clone();
  b.validate(resolution);
  return b;
}

ConditionBundle zeroed(const ConditionBundle& bundle) {
  auto b = bundle;
  b.text_tokens = torch::zeros_like(bundle.text_tokens);
  b.body_normal_maps = torch::zeros_like(bundle.body_normal_maps);
  b.head_normal_maps = torch::zeros_like(bundle.head_normal_maps);
  b.cloth_image = torch::zeros_like(bundle.cloth_image);
  return b;
}

std::pair<torch::Tensor, torch::Tensor> patch_tokens(const torch::Tensor& latent, int64_t patch, int64_t offset) {
  if (latent.dim() != 3 || latent.size(1) % patch != 0 || latent.size(2) % patch != 0) {
    throw std::invalid_argument("latent size must be a multiple of the patch size");
  }
  const auto c = latent.size(0), gh = latent.size(1) / patch, gw = latent.size(2) / patch;
  auto tokens = latent.view({c, gh, patch, gw, patch}).permute({1, 3, 0, 2, 4}).reshape({gh * gw, c * patch * patch});
  auto rows = torch::arange(gh, torch::kFloat32).unsqueeze(1).expand({gh, gw});
  auto cols = torch::arange(gw, torch::kFloat32).unsqueeze(0).expand({gh, gw}) + static_cast<double>(offset);
  return {tokens.contiguous(), torch::stack({rows, cols}, -1).reshape({gh * gw, 2})};
}

ConditionLatents encode_condition_bundle(const ConditionBundle& bundle, int64_t latent_resolution, int64_t patch) {
  bundle.validate(bundle.resolution());
  if (bundle.resolution() % latent_resolution != 0) {
    throw std::invalid_argument("bundle resolution " + std::to_string(bundle.resolution()) +
                                " is not a multiple of latent resolution " + std::to_string(latent_resolution));
  }
  // Conditions keep the [0,1] image scale, so a zeroed bundle gives zero channels.
  auto pool = [&](const torch::Tensor& image) { return downsample_image(image, latent_resolution); };
  auto views = [&](const torch::Tensor& maps) {
    std::vector<torch::Tensor> v;
    for (int64_t i = 0; i < maps.size(0); ++i) v.push_back(pool(maps[i]));
    return torch::stack(v);
  };
  ConditionLatents out;
  auto reference = pool(bundle.cloth_image);
  auto ref4 = reference.unsqueeze(0).expand({4, -1, -1, -1});
  out.body = torch::cat({views(bundle.body_normal_maps), ref4}, 1).contiguous();
  out.head = torch::cat({views(bundle.head_normal_maps), ref4}, 1).contiguous();
  out.text = bundle.text_tokens.to(torch::kFloat32);
  std::tie(out.reference_tokens, out.reference_positions) = patch_tokens(reference, patch, kReferenceOffset);
  return out;
}

}  // namespace ihk::genmodels
