#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "ihk/bodyfit/body_model.hpp"

namespace ihk::bodyfit {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 operator+(Vec3 a, Vec3 b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 operator*(double s, Vec3 a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(Vec3 a, Vec3 b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(Vec3 a, Vec3 b) { return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]}; }
Vec3 normalized(Vec3 a) { return (1.0 / std::sqrt(dot(a, a))) * a; }

enum Joint : int {
  kPelvis, kSpine, kNeck, kHead,
  kLShoulder, kLElbow, kLWrist, kRShoulder, kRElbow, kRWrist,
  kLHip, kLKnee, kLAnkle, kRHip, kRKnee, kRAnkle, kNumJoints
};

const std::array<int64_t, kNumJoints> kParents{-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14};
const std::array<const char*, kNumJoints> kJointNames{
    "pelvis", "spine", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle"};

// Rest pivots: A-pose, arms 45 degrees down, subject faces +z, left is +x.
std::array<Vec3, kNumJoints> rest_pivots() {
  const double d = std::sqrt(0.5);
  const Vec3 arm_dir{d, -d, 0.0};
  std::array<Vec3, kNumJoints> p{};
  p[kPelvis] = {0.0, 0.0, 0.0};
  p[kSpine] = {0.0, 0.22, 0.0};
  p[kNeck] = {0.0, 0.50, 0.0};
  p[kHead] = {0.0, 0.57, 0.0};
  p[kLShoulder] = {0.17, 0.46, 0.0};
  p[kLElbow] = p[kLShoulder] + 0.28 * arm_dir;
  p[kLWrist] = p[kLElbow] + 0.25 * arm_dir;
  p[kLHip] = {0.09, -0.05, 0.0};
  p[kLKnee] = {0.09, -0.45, 0.0};
  p[kLAnkle] = {0.09, -0.85, 0.0};
  auto mirror = [](Vec3 v) { return Vec3{-v[0], v[1], v[2]}; };
  p[kRShoulder] = mirror(p[kLShoulder]);
  p[kRElbow] = mirror(p[kLElbow]);
  p[kRWrist] = mirror(p[kLWrist]);
  p[kRHip] = mirror(p[kLHip]);
  p[kRKnee] = mirror(p[kLKnee]);
  p[kRAnkle] = mirror(p[kLAnkle]);
  return p;
}

enum class Region { torso, head, arm, leg, hand, foot };

struct Anchor {
  double s;
  int joint;
};

struct Part {
  Vec3 a, b;
  double radius_u, radius_w;
  std::vector<Anchor> anchors;  // skinning weights along the axis, piecewise linear
  Region region;
};

constexpr int kRings = 8;
constexpr int kSegments = 8;

struct Builder {
  std::vector<Vec3> verts;
  std::vector<std::array<int64_t, 3>> faces;
  std::vector<std::array<double, kNumJoints>> weights;
  std::vector<Region> region;
  std::vector<Vec3> radial;      // vertex minus its axis point
  std::vector<Vec3> axis_dir;    // part axis
  std::vector<double> axis_pos;  // distance along the axis from `a`
  std::vector<Vec3> part_start;

  void add(const Part& part) {
    const Vec3 axis = part.b - part.a;
    const double len = std::sqrt(dot(axis, axis));
    const Vec3 d = (1.0 / len) * axis;
    Vec3 u = cross(d, Vec3{0, 0, 1});
    if (dot(u, u) < 1e-8) u = cross(d, Vec3{1, 0, 0});
    u = normalized(u);
    const Vec3 w = cross(u, d);
    const auto base = static_cast<int64_t>(verts.size());

    auto push = [&](Vec3 p, double s, Vec3 centre) {
      verts.push_back(p);
      std::array<double, kNumJoints> wt{};
      const auto& an = part.anchors;
      if (s <= an.front().s) {
        wt[an.front().joint] = 1.0;
      } else if (s >= an.back().s) {
        wt[an.back().joint] = 1.0;
      } else {
        for (std::size_t i = 0; i + 1 < an.size(); ++i) {
          if (s >= an[i].s && s <= an[i + 1].s) {
            const double f = (s - an[i].s) / (an[i + 1].s - an[i].s);
            wt[an[i].joint] += 1.0 - f;
            wt[an[i + 1].joint] += f;
            break;
          }
        }
      }
      weights.push_back(wt);
      region.push_back(part.region);
      radial.push_back(p - centre);
      axis_dir.push_back(d);
      axis_pos.push_back(s * len);
      part_start.push_back(part.a);
    };

    push(part.a, 0.0, part.a);
    for (int r = 1; r <= kRings; ++r) {
      const double s = static_cast<double>(r) / (kRings + 1);
      const double profile = std::pow(std::sin(std::numbers::pi * s), 0.35);
      const Vec3 centre = part.a + (s * len) * d;
      for (int k = 0; k < kSegments; ++k) {
        const double phi = 2.0 * std::numbers::pi * k / kSegments;
        const Vec3 p = centre + (profile * part.radius_u * std::cos(phi)) * u + (profile * part.radius_w * std::sin(phi)) * w;
        push(p, s, centre);
      }
    }
    push(part.b, 1.0, part.b);
    const int64_t south = base, north = base + 1 + kRings * kSegments;
    auto ring = [&](int r, int k) { return base + 1 + (r - 1) * kSegments + (k % kSegments); };

    std::vector<std::array<int64_t, 3>> local;
    for (int k = 0; k < kSegments; ++k) {
      local.push_back({south, ring(1, k + 1), ring(1, k)});
      local.push_back({north, ring(kRings, k), ring(kRings, k + 1)});
    }
    for (int r = 1; r < kRings; ++r) {
      for (int k = 0; k < kSegments; ++k) {
        local.push_back({ring(r, k), ring(r, k + 1), ring(r + 1, k + 1)});
        local.push_back({ring(r, k), ring(r + 1, k + 1), ring(r + 1, k)});
      }
    }
    // Orient every face outward from the part axis.
    for (auto f : local) {
      const Vec3 p0 = verts[f[0]], p1 = verts[f[1]], p2 = verts[f[2]];
      const Vec3 n = cross(p1 - p0, p2 - p0);
      const Vec3 c = (1.0 / 3.0) * (p0 + p1 + p2);
      const double t = dot(c - part.a, d);
      const Vec3 out = c - (part.a + t * d);
      if (dot(n, out) < 0.0) std::swap(f[1], f[2]);
      faces.push_back(f);
    }
  }
};

// Row of a regressor averaging the `count` vertices nearest to `target`
// with inverse-distance weights.
std::vector<double> nearest_average(const std::vector<Vec3>& verts, Vec3 target, int count,
                                    const std::vector<Region>& region, Region only, bool restrict) {
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t i = 0; i < verts.size(); ++i) {
    if (restrict && region[i] != only) continue;
    const Vec3 diff = verts[i] - target;
    dist.emplace_back(std::sqrt(dot(diff, diff)), i);
  }
  std::partial_sort(dist.begin(), dist.begin() + count, dist.end());
  std::vector<double> row(verts.size(), 0.0);
  double total = 0.0;
  for (int i = 0; i < count; ++i) {
    const double w = 1.0 / (dist[i].first + 0.01);
    row[dist[i].second] = w;
    total += w;
  }
  for (auto& w : row) w /= total;
  return row;
}

}  // namespace

BodyModel make_toy_body_model() {
  const auto piv = rest_pivots();
  auto extend = [](Vec3 from, Vec3 to, double len) { return to + len * normalized(to - from); };

  std::vector<Part> parts;
  parts.push_back({{0.0, -0.10, 0.0}, {0.0, 0.52, 0.0}, 0.15, 0.10,
                   {{0.0, kPelvis}, {0.3, kPelvis}, {0.55, kSpine}, {0.95, kSpine}, {1.0, kNeck}}, Region::torso});
  parts.push_back({{0.0, 0.52, 0.0}, {0.0, 0.82, 0.0}, 0.10, 0.11, {{0.0, kNeck}, {0.2, kHead}}, Region::head});
  for (int side = 0; side < 2; ++side) {
    const int sh = side == 0 ? kLShoulder : kRShoulder;
    const int el = sh + 1, wr = sh + 2;
    parts.push_back({piv[sh], piv[el], 0.05, 0.05, {{0.0, sh}, {0.75, sh}, {1.0, el}}, Region::arm});
    parts.push_back({piv[el], piv[wr], 0.04, 0.04, {{0.0, el}, {0.75, el}, {1.0, wr}}, Region::arm});
    parts.push_back({piv[wr], extend(piv[el], piv[wr], 0.12), 0.04, 0.02, {{0.0, wr}}, Region::hand});
    const int hip = side == 0 ? kLHip : kRHip;
    const int kn = hip + 1, an = hip + 2;
    parts.push_back({piv[hip], piv[kn], 0.075, 0.075, {{0.0, hip}, {0.75, hip}, {1.0, kn}}, Region::leg});
    parts.push_back({piv[kn], piv[an], 0.055, 0.055, {{0.0, kn}, {0.75, kn}, {1.0, an}}, Region::leg});
    parts.push_back({piv[an], piv[an] + Vec3{0.0, -0.05, 0.14}, 0.04, 0.03, {{0.0, an}}, Region::foot});
  }

  Builder b;
  for (const auto& p : parts) b.add(p);
  const auto nv = static_cast<int64_t>(b.verts.size());

  BodyModel m;
  auto verts = torch::empty({nv, 3}, torch::kFloat64);
  auto skin = torch::empty({nv, kNumJoints}, torch::kFloat64);
  for (int64_t i = 0; i < nv; ++i) {
    for (int c = 0; c < 3; ++c) verts[i][c] = b.verts[i][c];
    for (int j = 0; j < kNumJoints; ++j) skin[i][j] = b.weights[i][j];
  }
  m.template_vertices = verts;
  m.skinning_weights = skin;
  auto faces = torch::empty({static_cast<int64_t>(b.faces.size()), 3}, torch::kInt64);
  for (std::size_t f = 0; f < b.faces.size(); ++f) {
    for (int c = 0; c < 3; ++c) faces[static_cast<int64_t>(f)][c] = b.faces[f][c];
  }
  m.faces = faces;
  m.parents.assign(kParents.begin(), kParents.end());
  m.joint_names.assign(kJointNames.begin(), kJointNames.end());

  auto to_row_tensor = [](const std::vector<std::vector<double>>& rows) {
    auto t = torch::empty({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows.front().size())}, torch::kFloat64);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      t[static_cast<int64_t>(r)] = torch::tensor(rows[r], torch::kFloat64);
    }
    return t;
  };

  std::vector<std::vector<double>> skeleton;
  for (int j = 0; j < kNumJoints; ++j) skeleton.push_back(nearest_average(b.verts, piv[j], 8, b.region, Region::torso, false));
  m.skeleton_regressor = to_row_tensor(skeleton);

  struct Keypoint {
    const char* name;
    Vec3 at;
    Region region;
    bool detail;
  };
  const Vec3 lhand_tip = extend(piv[kLElbow], piv[kLWrist], 0.12);
  const Vec3 rhand_tip = extend(piv[kRElbow], piv[kRWrist], 0.12);
  const std::vector<Keypoint> keypoints{
      {"nose", {0.0, 0.68, 0.12}, Region::head, true},
      {"l_eye", {0.04, 0.71, 0.10}, Region::head, true},
      {"r_eye", {-0.04, 0.71, 0.10}, Region::head, true},
      {"l_ear", {0.10, 0.68, 0.0}, Region::head, true},
      {"r_ear", {-0.10, 0.68, 0.0}, Region::head, true},
      {"neck", piv[kNeck], Region::torso, false},
      {"l_shoulder", piv[kLShoulder], Region::arm, false},
      {"l_elbow", piv[kLElbow], Region::arm, false},
      {"l_wrist", piv[kLWrist], Region::hand, true},
      {"r_shoulder", piv[kRShoulder], Region::arm, false},
      {"r_elbow", piv[kRElbow], Region::arm, false},
      {"r_wrist", piv[kRWrist], Region::hand, true},
      {"l_hip", piv[kLHip], Region::leg, false},
      {"l_knee", piv[kLKnee], Region::leg, false},
      {"l_ankle", piv[kLAnkle], Region::leg, false},
      {"r_hip", piv[kRHip], Region::leg, false},
      {"r_knee", piv[kRKnee], Region::leg, false},
      {"r_ankle", piv[kRAnkle], Region::leg, false},
      {"l_hand_tip", lhand_tip, Region::hand, true},
      {"r_hand_tip", rhand_tip, Region::hand, true},
  };
  std::vector<std::vector<double>> kp_rows;
  for (const auto& k : keypoints) {
    const bool surface = k.region == Region::head || k.region == Region::hand;
    kp_rows.push_back(nearest_average(b.verts, k.at, surface ? 4 : 8, b.region, k.region, surface));
    m.keypoint_names.emplace_back(k.name);
    m.keypoint_is_detail.push_back(k.detail);
  }
  m.joint_regressor = to_row_tensor(kp_rows);

  // Shape basis: eight smooth displacement fields.
  constexpr int kShape = 8;
  auto basis = torch::zeros({kShape, nv, 3}, torch::kFloat64);
  auto acc = basis.accessor<double, 3>();
  const double shoulder_y = piv[kLShoulder][1];
  const double hip_y = piv[kLHip][1];
  for (int64_t i = 0; i < nv; ++i) {
    const Vec3 v = b.verts[i];
    const Vec3 rad = b.radial[i];
    const Region r = b.region[i];
    const bool is_arm = r == Region::arm || r == Region::hand;
    const bool is_leg = r == Region::leg || r == Region::foot;
    // 0: overall height
    acc[0][i][1] = 0.06 * v[1];
    // 1: limb and torso girth
    if (r != Region::head) {
      for (int c = 0; c < 3; ++c) acc[1][i][c] = 0.15 * rad[c];
    }
    // 2: torso width
    if (r == Region::torso) acc[2][i][0] = 0.2 * rad[0];
    // 3: belly
    if (r == Region::torso && rad[2] > 0.0) {
      acc[3][i][2] = 0.04 * std::exp(-std::pow((v[1] - 0.12) / 0.15, 2.0));
    }
    // 4: arm length, arms slide outward along their own direction
    if (is_arm) {
      const double side = v[0] > 0 ? 1.0 : -1.0;
      const Vec3 sh = piv[side > 0 ? kLShoulder : kRShoulder];
      const Vec3 diff = v - sh;
      const double t = std::sqrt(dot(diff, diff));
      const Vec3 dir = normalized(piv[side > 0 ? kLWrist : kRWrist] - sh);
      for (int c = 0; c < 3; ++c) acc[4][i][c] = 0.12 * t * dir[c];
    }
    // 5: leg length
    if (is_leg) acc[5][i][1] = 0.08 * (v[1] - hip_y);
    // 6: shoulder width
    if (is_arm || (r == Region::torso && v[1] > shoulder_y - 0.08)) {
      acc[6][i][0] = (v[0] > 0 ? 1.0 : -1.0) * 0.03 * (is_arm ? 1.0 : std::min(1.0, std::abs(v[0]) / 0.15));
    }
    // 7: head size
    if (r == Region::head) {
      const Vec3 c{0.0, 0.67, 0.0};
      for (int k = 0; k < 3; ++k) acc[7][i][k] = 0.12 * (v[k] - c[k]);
    }
  }
  m.shape_basis = basis;
  m.validate();
  return m;
}

}  // namespace ihk::bodyfit
