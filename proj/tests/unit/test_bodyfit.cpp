#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/bodyfit/camera.hpp"
#include "ihk/bodyfit/fit.hpp"
#include "ihk/bodyfit/raster.hpp"
#include "support/oracles.hpp"

using namespace ihk;
using namespace ihk::bodyfit;

namespace {

const BodyModel& model() {
  static const BodyModel m = toy_body_model();
  return m;
}

using oracle::to_eigen;

// Forward kinematics written independently: every joint's global transform is
// rebuilt from scratch by walking its ancestor chain with 4x4 matrices.
Eigen::MatrixXd oracle_keypoints(const BodyModel& m, const BodyParams& p) {
  const int nv = static_cast<int>(m.num_vertices());
  const int nj = static_cast<int>(m.num_joints());
  Eigen::MatrixXd shaped = to_eigen(m.template_vertices);
  auto basis = m.shape_basis.contiguous();
  for (int s = 0; s < m.num_shape(); ++s) shaped += p.shape[s].item<double>() * to_eigen(basis[s]);
  const Eigen::MatrixXd pivots = to_eigen(m.skeleton_regressor) * shaped;
  auto local = [&](int j) {
    Eigen::Vector3d aa(p.pose[j][0].item<double>(), p.pose[j][1].item<double>(), p.pose[j][2].item<double>());
    Eigen::Matrix3d r = aa.norm() > 0 ? Eigen::AngleAxisd(aa.norm(), aa.normalized()).toRotationMatrix()
                                      : Eigen::Matrix3d::Identity();
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    t.topLeftCorner<3, 3>() = r;
    const int parent = static_cast<int>(m.parents[j]);
    Eigen::Vector3d offset = pivots.row(j).transpose();
    if (parent >= 0) offset -= pivots.row(parent).transpose();
    t.topRightCorner<3, 1>() = offset;
    return t;
  };
  std::vector<Eigen::Matrix4d> skin(nj);
  for (int j = 0; j < nj; ++j) {
    std::vector<int> chain;
    for (int k = j; k >= 0; k = static_cast<int>(m.parents[k])) chain.push_back(k);
    Eigen::Matrix4d g = Eigen::Matrix4d::Identity();
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) g = g * local(*it);
    Eigen::Matrix4d unrest = Eigen::Matrix4d::Identity();
    unrest.topRightCorner<3, 1>() = -pivots.row(j).transpose();
    skin[j] = g * unrest;
  }
  const Eigen::MatrixXd w = to_eigen(m.skinning_weights);
  Eigen::MatrixXd verts(nv, 3);
  const Eigen::Vector3d trans(p.translation[0].item<double>(), p.translation[1].item<double>(),
                              p.translation[2].item<double>());
  for (int v = 0; v < nv; ++v) {
    Eigen::Matrix4d blend = Eigen::Matrix4d::Zero();
    for (int j = 0; j < nj; ++j) blend += w(v, j) * skin[j];
    Eigen::Vector4d h(shaped(v, 0), shaped(v, 1), shaped(v, 2), 1.0);
    verts.row(v) = (p.scale * (blend * h).head<3>() + trans).transpose();
  }
  return to_eigen(m.joint_regressor) * verts;
}

BodyParams random_params(std::mt19937& rng, double pose_sigma = 0.3) { return oracle::random_body_params(model(), rng, pose_sigma); }

OrthoCamera fit_camera() { return view_camera(ViewLabel::front, 100.0, {64.0, 64.0}); }

}  // namespace

TEST_CASE("toy body model satisfies its invariants") {
  const auto& m = model();
  CHECK_NOTHROW(m.validate());
  CHECK(m.num_joints() == 16);
  CHECK(m.num_keypoints() == 20);
  CHECK(m.num_shape() == 8);
  CHECK(m.num_vertices() > 700);
  CHECK(m.num_vertices() < 1000);
  CHECK(m.parents[0] == -1);
}

TEST_CASE("committed fixture matches the procedural generator to float32 precision") {
  const auto path = default_body_fixture_path();
  REQUIRE(std::filesystem::exists(path));
  const auto loaded = load_body_model(path);
  const auto built = make_toy_body_model();
  CHECK((loaded.template_vertices - built.template_vertices).abs().max().item<double>() < 1e-6);
  CHECK((loaded.skinning_weights - built.skinning_weights).abs().max().item<double>() < 1e-6);
  CHECK(torch::equal(loaded.faces, built.faces));
  CHECK(loaded.parents == built.parents);
  CHECK(loaded.keypoint_names == built.keypoint_names);
}

TEST_CASE("model validation rejects broken invariants") {
  auto m = make_toy_body_model();
  SUBCASE("cycle") {
    m.parents[1] = 3;
    CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  }
  SUBCASE("regressor rows") {
    m.joint_regressor[0][0] += 0.1;
    CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  }
  SUBCASE("negative skinning weight") {
    m.skinning_weights[0][0] = -0.5;
    m.skinning_weights[0][1] += 0.5;
    CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  }
}

TEST_CASE("forward_body: zero pose reproduces the template exactly") {
  auto out = forward_body(model(), BodyParams::zeros(model()));
  CHECK(torch::equal(out.vertices, model().template_vertices));
}

TEST_CASE("forward_body: one-hot shape adds exactly that basis vector") {
  auto p = BodyParams::zeros(model());
  p.shape[0] = 1.0;
  auto out = forward_body(model(), p);
  CHECK(torch::equal(out.vertices, model().template_vertices + model().shape_basis[0]));
}

TEST_CASE("forward_body: keypoints match the independent forward-kinematics oracle") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_params(rng);
    const auto got = to_eigen(forward_body(model(), p).keypoints);
    const auto want = oracle_keypoints(model(), p);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("forward_body: dimension mismatch is rejected") {
  auto p = BodyParams::zeros(model());
  p.pose = torch::zeros({3, 3}, torch::kFloat64);
  CHECK_THROWS_AS(forward_body(model(), p), std::invalid_argument);
  p = BodyParams::zeros(model());
  p.scale = 0.0;
  CHECK_THROWS_AS(forward_body(model(), p), std::invalid_argument);
}

TEST_CASE("project_ortho drops depth") {
  OrthoCamera cam;
  auto pt = torch::tensor({{0.3, -0.2, 5.0}}, torch::kFloat64);
  auto out = project_ortho(pt, cam);
  CHECK(out[0][0].item<double>() == 0.3);
  CHECK(out[0][1].item<double>() == -0.2);
  auto moved = project_ortho(pt + torch::tensor({{0.0, 0.0, 100.0}}, torch::kFloat64), cam);
  CHECK(torch::equal(out, moved));
}

TEST_CASE("project_ortho is invariant along a rotated camera's view axis") {
  auto cam = yaw_camera(33.0, 80.0, {10.0, -4.0});
  auto r = cam.rotation_tensor();
  auto view_axis = r[2];  // camera z expressed in world coordinates
  auto pts = torch::randn({10, 3}, torch::kFloat64);
  auto a = project_ortho(pts, cam);
  auto b = project_ortho(pts + 7.5 * view_axis, cam);
  CHECK((a - b).abs().max().item<double>() < 1e-9);
}

TEST_CASE("90 degree yaw camera agrees with a hand matrix multiply") {
  auto cam = yaw_camera(90.0, 2.0, {1.0, 3.0});
  // R_y(90): rows (0 0 1), (0 1 0), (-1 0 0); world +x goes to camera -z.
  const double hand[3][3] = {{0, 0, 1}, {0, 1, 0}, {-1, 0, 0}};
  for (int i = 0; i < 9; ++i) CHECK(cam.rotation[i] == hand[i / 3][i % 3]);
  auto pts = torch::tensor({{1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}, {0.2, -0.7, 0.4}}, torch::kFloat64);
  auto out = project_ortho(pts, cam);
  for (int n = 0; n < 3; ++n) {
    double p[3] = {pts[n][0].item<double>(), pts[n][1].item<double>(), pts[n][2].item<double>()};
    const double x = hand[0][0] * p[0] + hand[0][1] * p[1] + hand[0][2] * p[2];
    const double y = hand[1][0] * p[0] + hand[1][1] * p[1] + hand[1][2] * p[2];
    CHECK(out[n][0].item<double>() == doctest::Approx(2.0 * x + 1.0));
    CHECK(out[n][1].item<double>() == doctest::Approx(2.0 * y + 3.0));
  }
  // (1,0,0) lands on the depth axis: same image position as the origin.
  CHECK(out[0][0].item<double>() == doctest::Approx(1.0));
}

TEST_CASE("invalid cameras are rejected") {
  OrthoCamera cam;
  cam.image_scale = -1.0;
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
  cam = OrthoCamera{};
  cam.rotation = {1, 0, 0, 0, 1, 0, 0, 0, -1};  // reflection
  CHECK_THROWS_AS(cam.validate(), std::invalid_argument);
}

TEST_CASE("normal map: a camera-facing triangle is (0.5, 0.5, 1)") {
  auto verts = torch::tensor({{1.0, 1.0, 0.0}, {14.0, 1.0, 0.0}, {1.0, 14.0, 0.0}}, torch::kFloat64);
  auto faces = torch::tensor({{0, 1, 2}}, torch::kInt64);
  auto img = shade_normals(rasterize(verts, faces, OrthoCamera{}, 16, 16));
  // Pixel at projected (3, 3) -> row 16 - 1 - 3 = 12, column 3.
  auto px = img[12][3];
  CHECK(px[0].item<float>() == doctest::Approx(0.5));
  CHECK(px[1].item<float>() == doctest::Approx(0.5));
  CHECK(px[2].item<float>() == doctest::Approx(1.0));
  // Outside the triangle stays background grey.
  CHECK(img[0][15][2].item<float>() == doctest::Approx(0.5));
}

TEST_CASE("normal map: empty mesh gives a uniform background") {
  auto img = shade_normals(rasterize(torch::zeros({0, 3}, torch::kFloat64), torch::zeros({0, 3}, torch::kInt64),
                                     OrthoCamera{}, 8, 8));
  CHECK(torch::allclose(img, torch::full({8, 8, 3}, 0.5f)));
}

TEST_CASE("normal map: zero-area faces are skipped") {
  auto verts = torch::tensor({{1.0, 1.0, 0.0}, {5.0, 5.0, 0.0}, {3.0, 3.0, 0.0}}, torch::kFloat64);
  auto r = rasterize(verts, torch::tensor({{0, 1, 2}}, torch::kInt64), OrthoCamera{}, 8, 8);
  CHECK((r.face_index == -1).all().item<bool>());
}

TEST_CASE("normal map: nearest of two stacked triangles wins (per-pixel ray oracle)") {
  // Back triangle: large, z = -1, tilted; front triangle: smaller, z in [0, 0.5].
  auto verts = torch::tensor({{0.0, 0.0, -1.0}, {15.0, 0.0, -1.5}, {0.0, 15.0, -0.5},
                              {2.0, 2.0, 0.0}, {12.0, 3.0, 0.5}, {3.0, 12.0, 0.2}},
                             torch::kFloat64);
  auto faces = torch::tensor({{0, 1, 2}, {3, 4, 5}}, torch::kInt64);
  auto r = rasterize(verts, faces, OrthoCamera{}, 16, 16);
  // Oracle: cast a ray along -z through every pixel centre, intersect both
  // planes, keep the hit with the largest z.
  auto ray_hit = [&](int f, double x, double y, double& z) {
    double v[3][3];
    for (int k = 0; k < 3; ++k)
      for (int c = 0; c < 3; ++c) v[k][c] = verts[faces[f][k].item<int64_t>()][c].item<double>();
    const double d = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
    const double l1 = ((x - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (y - v[0][1])) / d;
    const double l2 = ((v[1][0] - v[0][0]) * (y - v[0][1]) - (x - v[0][0]) * (v[1][1] - v[0][1])) / d;
    if (l1 < 0 || l2 < 0 || l1 + l2 > 1) return false;
    z = v[0][2] + l1 * (v[1][2] - v[0][2]) + l2 * (v[2][2] - v[0][2]);
    return true;
  };
  int overlaps = 0;
  for (int row = 0; row < 16; ++row) {
    for (int col = 0; col < 16; ++col) {
      const double x = col, y = 15 - row;
      int best = -1;
      double best_z = -1e300, z = 0;
      int hits = 0;
      for (int f = 0; f < 2; ++f) {
        if (ray_hit(f, x, y, z)) {
          ++hits;
          if (z > best_z) best_z = z, best = f;
        }
      }
      if (hits == 2) ++overlaps;
      CHECK(r.face_index[row][col].item<int64_t>() == best);
    }
  }
  CHECK(overlaps > 20);
}

TEST_CASE("render_normal_map shades the toy body with a grey background") {
  auto img = render_normal_map(model(), BodyParams::zeros(model()), volume_camera(ViewLabel::front, 32), 32, 32);
  CHECK(img.sizes() == torch::IntArrayRef({32, 32, 3}));
  CHECK(img.min().item<float>() >= 0.0f);
  CHECK(img.max().item<float>() <= 1.0f);
  CHECK(torch::allclose(img[0][0], torch::full({3}, 0.5f)));
  // Chest pixel faces the camera.
  CHECK(img[12][16][2].item<float>() > 0.9f);
}

TEST_CASE("reprojection loss: zero at own targets, regulariser only with zero weights") {
  std::mt19937 rng(11);
  const auto p = random_params(rng);
  const auto cam = fit_camera();
  auto targets = synthesize_targets(model(), p, cam, default_keypoint_weights(model()));
  CHECK(reprojection_loss(model(), p, cam, targets, 0.0).item<double>() < 1e-18);

  auto anchor = p.pose + 0.1;
  targets.weights.zero_();
  targets.positions += 5.0;
  const double reg = 0.7 * (p.pose - anchor).pow(2).sum().item<double>();
  CHECK(reprojection_loss(model(), p, cam, targets, 0.7, anchor).item<double>() == doctest::Approx(reg).epsilon(1e-12));
}

TEST_CASE("reprojection loss gradient matches central finite differences") {
  std::mt19937 rng(19);
  const auto cam = fit_camera();
  for (int trial = 0; trial < 20; ++trial) {
    const auto truth = random_params(rng);
    auto p = truth.detached_clone();
    p.pose += 0.1 * torch::randn_like(p.pose);
    const auto targets = synthesize_targets(model(), truth, cam, default_keypoint_weights(model()));
    const auto anchor = truth.pose.clone();

    auto q = p.detached_clone();
    q.pose.requires_grad_(true);
    reprojection_loss(model(), q, cam, targets, 0.3, anchor).backward();
    auto analytic = q.pose.grad().flatten();

    auto numeric = torch::zeros_like(analytic);
    const double h = 1e-6;
    for (int64_t i = 0; i < analytic.numel(); ++i) {
      auto plus = p.detached_clone(), minus = p.detached_clone();
      plus.pose.view(-1)[i] += h;
      minus.pose.view(-1)[i] -= h;
      numeric[i] = (reprojection_loss(model(), plus, cam, targets, 0.3, anchor).item<double>() -
                    reprojection_loss(model(), minus, cam, targets, 0.3, anchor).item<double>()) /
                   (2 * h);
    }
    const double rel = (analytic - numeric).norm().item<double>() / std::max(numeric.norm().item<double>(), 1e-12);
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("fit_pose recovers a perturbed pose") {
  std::mt19937 rng(23);
  const auto cam = fit_camera();
  for (int trial = 0; trial < 3; ++trial) {
    const auto truth = random_params(rng);
    const auto targets = synthesize_targets(model(), truth, cam, default_keypoint_weights(model()));
    auto init = truth.detached_clone();
    init.pose += 0.05 * torch::randn_like(init.pose);
    const auto res = fit_pose(model(), init, cam, targets);
    CHECK_FALSE(res.aborted);
    CHECK(res.final_loss <= res.initial_loss);
    CHECK(weighted_rmse(model(), res.params, cam, targets) < 0.5);
    for (std::size_t i = 1; i < res.best_loss_history.size(); ++i) {
      CHECK(res.best_loss_history[i] <= res.best_loss_history[i - 1]);
    }
    CHECK(torch::equal(res.params.shape, init.shape));
  }
}

TEST_CASE("fit_pose leaves an optimal init unchanged") {
  std::mt19937 rng(29);
  const auto cam = fit_camera();
  const auto truth = random_params(rng);
  const auto targets = synthesize_targets(model(), truth, cam, default_keypoint_weights(model()));
  const auto res = fit_pose(model(), truth, cam, targets);
  CHECK(std::abs(res.final_loss - res.initial_loss) < 1e-10);
  CHECK(torch::allclose(res.params.pose, truth.pose, 0.0, 1e-12));
}

TEST_CASE("fit_pose is deterministic") {
  std::mt19937 rng(31);
  const auto cam = fit_camera();
  const auto truth = random_params(rng);
  const auto targets = synthesize_targets(model(), truth, cam, default_keypoint_weights(model()));
  auto init = truth.detached_clone();
  init.pose += 0.05;
  FitConfig cfg;
  cfg.iterations = 30;
  const auto a = fit_pose(model(), init, cam, targets, cfg);
  const auto b = fit_pose(model(), init, cam, targets, cfg);
  CHECK(torch::equal(a.params.pose, b.params.pose));
  CHECK(a.best_loss_history == b.best_loss_history);
}

TEST_CASE("detail keypoint weighting shrinks face and hand residuals") {
  std::mt19937 rng(37);
  std::normal_distribution<double> noise(0.0, 2.0);
  const auto cam = fit_camera();
  const auto truth = random_params(rng);
  auto weighted = synthesize_targets(model(), truth, cam, default_keypoint_weights(model()));
  for (int64_t k = 0; k < weighted.positions.size(0); ++k)
    for (int c = 0; c < 2; ++c) weighted.positions[k][c] += noise(rng);
  auto uniform = weighted;
  uniform.weights = torch::ones_like(weighted.weights);
  auto init = truth.detached_clone();
  init.pose += 0.05 * torch::randn_like(init.pose);

  auto detail_residual = [&](const BodyParams& p) {
    auto proj = project_ortho(forward_body(model(), p).keypoints, cam);
    auto r = (proj - weighted.positions).pow(2).sum(1);
    double total = 0.0;
    for (int64_t k = 0; k < r.size(0); ++k)
      if (model().keypoint_is_detail[k]) total += r[k].item<double>();
    return total;
  };
  const auto fw = fit_pose(model(), init, cam, weighted);
  const auto fu = fit_pose(model(), init, cam, uniform);
  CHECK(detail_residual(fw.params) < detail_residual(fu.params));
}

TEST_CASE("fit_pose aborts on a non-finite loss and returns the init") {
  const auto cam = fit_camera();
  auto init = BodyParams::zeros(model());
  auto targets = synthesize_targets(model(), init, cam, default_keypoint_weights(model()));
  targets.positions.fill_(1e200);
  const auto res = fit_pose(model(), init, cam, targets);
  CHECK(res.aborted);
  CHECK_FALSE(res.diagnostics.empty());
  CHECK(torch::equal(res.params.pose, init.pose));
}

TEST_CASE("keypoint files round trip and reject unknown names") {
  const auto cam = fit_camera();
  const auto targets = synthesize_targets(model(), BodyParams::zeros(model()), cam, default_keypoint_weights(model()));
  const auto path = std::filesystem::temp_directory_path() / "ihk_keypoints_test.json";
  save_keypoints(path, model(), targets);
  const auto back = load_keypoints(path, model());
  CHECK(torch::allclose(back.positions, targets.positions));
  CHECK(torch::equal(back.weights, targets.weights));
  std::ofstream(path) << R"([{"name": "tail", "x": 1, "y": 2, "weight": 1}])";
  CHECK_THROWS_AS(load_keypoints(path, model()), std::invalid_argument);
  std::filesystem::remove(path);
}
