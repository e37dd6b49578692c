#include "ihk/bodyfit/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ihk/common/log.hpp"

namespace ihk::bodyfit {

RasterResult rasterize(const torch::Tensor& vertices, const torch::Tensor& faces, const OrthoCamera& camera,
                       int64_t height, int64_t width) {
  camera.validate();
  auto verts = vertices.detach().to(torch::kFloat64);
  auto cam = to_camera_space(verts, camera).contiguous();
  auto px = project_ortho(verts, camera).contiguous();
  auto f = faces.to(torch::kInt64).contiguous();
  const auto nf = f.size(0);

  RasterResult out;
  out.face_index = torch::full({height, width}, -1, torch::kInt64);
  out.depth = torch::full({height, width}, -std::numeric_limits<double>::infinity(), torch::kFloat64);
  out.face_normals = torch::zeros({nf, 3}, torch::kFloat64);
  auto fid = out.face_index.accessor<int64_t, 2>();
  auto zbuf = out.depth.accessor<double, 2>();
  auto normals = out.face_normals.accessor<double, 2>();
  auto c = cam.accessor<double, 2>();
  auto p = px.accessor<double, 2>();
  auto fa = f.accessor<int64_t, 2>();

  int64_t skipped = 0;
  for (int64_t i = 0; i < nf; ++i) {
    const int64_t a = fa[i][0], b = fa[i][1], d = fa[i][2];
    const double e1[3] = {c[b][0] - c[a][0], c[b][1] - c[a][1], c[b][2] - c[a][2]};
    const double e2[3] = {c[d][0] - c[a][0], c[d][1] - c[a][1], c[d][2] - c[a][2]};
    double n[3] = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]};
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    if (!(len > 1e-14)) {
      ++skipped;
      continue;
    }
    for (int k = 0; k < 3; ++k) normals[i][k] = n[k] / len;

    const double x0 = p[a][0], y0 = p[a][1], x1 = p[b][0], y1 = p[b][1], x2 = p[d][0], y2 = p[d][1];
    const double area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
    if (area == 0.0) continue;  // edge-on, covers no pixel centre
    const double xmin = std::min({x0, x1, x2}), xmax = std::max({x0, x1, x2});
    const double ymin = std::min({y0, y1, y2}), ymax = std::max({y0, y1, y2});
    const auto j0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(xmin)));
    const auto j1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::floor(xmax)));
    const auto y_lo = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(ymin)));
    const auto y_hi = std::min<int64_t>(height - 1, static_cast<int64_t>(std::floor(ymax)));
    for (int64_t y = y_lo; y <= y_hi; ++y) {
      const int64_t row = height - 1 - y;
      for (int64_t x = j0; x <= j1; ++x) {
        const double w0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) / area;
        const double w1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) / area;
        const double w2 = ((x0 - x) * (y1 - y) - (x1 - x) * (y0 - y)) / area;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double z = w0 * c[a][2] + w1 * c[b][2] + w2 * c[d][2];
        if (z > zbuf[row][x]) {
          zbuf[row][x] = z;
          fid[row][x] = i;
        }
      }
    }
  }
  if (skipped > 0) log_warn("rasterize: skipped " + std::to_string(skipped) + " zero-area face(s)");
  return out;
}

torch::Tensor shade_normals(const RasterResult& raster) {
  const auto h = raster.face_index.size(0), w = raster.face_index.size(1);
  auto img = torch::full({h, w, 3}, 0.5, torch::kFloat32);
  auto mask = raster.face_index >= 0;
  if (mask.any().item<bool>()) {
    auto ids = raster.face_index.index({mask});
    auto n = raster.face_normals.index_select(0, ids).to(torch::kFloat32);
    img.index_put_({mask}, (n + 1.0) * 0.5);
  }
  return img;
}

torch::Tensor shade_face_colors(const RasterResult& raster, const torch::Tensor& face_colors) {
  const auto h = raster.face_index.size(0), w = raster.face_index.size(1);
  auto img = torch::zeros({h, w, 4}, torch::kFloat32);
  auto mask = raster.face_index >= 0;
  if (mask.any().item<bool>()) {
    auto ids = raster.face_index.index({mask});
    auto rgb = face_colors.to(torch::kFloat32).index_select(0, ids);
    img.index_put_({mask}, torch::cat({rgb, torch::ones({rgb.size(0), 1})}, 1));
  }
  return img;
}

torch::Tensor render_normal_map(const BodyModel& model, const BodyParams& params, const OrthoCamera& camera,
                                int64_t height, int64_t width) {
  torch::NoGradGuard no_grad;
  const auto body = forward_body(model, params);
  return shade_normals(rasterize(body.vertices, model.faces, camera, height, width));
}

}  // namespace ihk::bodyfit
