#include "ihk/splat/gaussians.hpp"

#include <stdexcept>

namespace ihk::splat {

void GaussianSet::validate() const {
  if (!means.defined() || means.dim() != 2 || means.size(1) != 3) throw std::invalid_argument("means must be M x 3");
  const auto m = means.size(0);
  if (m == 0) throw std::invalid_argument("a Gaussian set needs at least one Gaussian");
  if (!log_scales.defined() || log_scales.dim() != 1 || log_scales.size(0) != m) {
    throw std::invalid_argument("log_scales must have M entries");
  }
  if (!colors.defined() || colors.dim() != 2 || colors.size(0) != m || colors.size(1) != 3) {
    throw std::invalid_argument("colors must be M x 3");
  }
  if (!logit_opacities.defined() || logit_opacities.dim() != 1 || logit_opacities.size(0) != m) {
    throw std::invalid_argument("logit_opacities must have M entries");
  }
  for (const auto* t : {&means, &log_scales, &colors, &logit_opacities}) {
    if (!torch::isfinite(t->detach()).all().item<bool>()) throw std::invalid_argument("Gaussian parameters must be finite");
  }
  if (colors.min().item<double>() < 0.0 || colors.max().item<double>() > 1.0) {
    throw std::invalid_argument("Gaussian colors must lie in [0,1]");
  }
  const auto s = scales().detach();
  const auto o = opacities().detach();
  if (!(s > 0).all().item<bool>()) throw std::invalid_argument("Gaussian scales must be positive");
  if (!((o > 0) & (o < 1)).all().item<bool>()) throw std::invalid_argument("Gaussian opacities must lie in (0,1)");
}

GaussianSet GaussianSet::detached_clone() const {
  return {means.detach().clone(), log_scales.detach().clone(), colors.detach().clone(), logit_opacities.detach().clone()};
}

GaussianSet GaussianSet::to(torch::ScalarType dtype) const {
  return {means.to(dtype), log_scales.to(dtype), colors.to(dtype), logit_opacities.to(dtype)};
}

ArrayFile to_array_file(const GaussianSet& g) {
  ArrayFile f;
  f.add("means", g.means.detach());
  f.add("log_scales", g.log_scales.detach());
  f.add("colors", g.colors.detach());
  f.add("logit_opacities", g.logit_opacities.detach());
  f.metadata["kind"] = "gaussian_set";
  f.metadata["count"] = g.size();
  return f;
}

GaussianSet gaussians_from_array_file(const ArrayFile& file) {
  GaussianSet g{file.at("means").clone(), file.at("log_scales").clone(), file.at("colors").clone(),
                file.at("logit_opacities").clone()};
  g.validate();
  return g;
}

void save_gaussians(const std::filesystem::path& path, const GaussianSet& g) {
  g.validate();
  save_array_file(path, to_array_file(g));
}

GaussianSet load_gaussians(const std::filesystem::path& path) { return gaussians_from_array_file(load_array_file(path)); }

}  // namespace ihk::splat
