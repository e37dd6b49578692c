#include "ihk/bodyfit/body_model.hpp"

#include <cmath>
#include <stdexcept>

#include "ihk/common/array_file.hpp"

#ifndef IHK_SOURCE_DIR
#define IHK_SOURCE_DIR ""
#endif

namespace ihk::bodyfit {

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

void check_rows_sum_to_one(const torch::Tensor& m, const char* what) {
  const double err = (m.sum(1) - 1.0).abs().max().item<double>();
  if (err > 1e-6) throw std::invalid_argument(std::string(what) + " rows must sum to 1");
}

std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

}  // namespace

void BodyModel::validate() const {
  const auto v = template_vertices.size(0);
  const auto j = num_joints();
  if (template_vertices.dim() != 2 || template_vertices.size(1) != 3) throw std::invalid_argument("template must be V x 3");
  if (faces.dim() != 2 || faces.size(1) != 3) throw std::invalid_argument("faces must be F x 3");
  if (faces.numel() > 0 && (faces.min().item<int64_t>() < 0 || faces.max().item<int64_t>() >= v)) {
    throw std::invalid_argument("face index out of range");
  }
  if (joint_regressor.dim() != 2 || joint_regressor.size(1) != v) throw std::invalid_argument("joint_regressor must be K x V");
  if (skeleton_regressor.dim() != 2 || skeleton_regressor.size(0) != j || skeleton_regressor.size(1) != v) {
    throw std::invalid_argument("skeleton_regressor must be J x V");
  }
  if (skinning_weights.dim() != 2 || skinning_weights.size(0) != v || skinning_weights.size(1) != j) {
    throw std::invalid_argument("skinning_weights must be V x J");
  }
  if (shape_basis.dim() != 3 || shape_basis.size(1) != v || shape_basis.size(2) != 3) {
    throw std::invalid_argument("shape_basis must be S x V x 3");
  }
  check_rows_sum_to_one(joint_regressor, "joint_regressor");
  check_rows_sum_to_one(skeleton_regressor, "skeleton_regressor");
  check_rows_sum_to_one(skinning_weights, "skinning_weights");
  if (skinning_weights.min().item<double>() < 0.0) throw std::invalid_argument("skinning weights must be nonnegative");
  if (static_cast<int64_t>(keypoint_names.size()) != num_keypoints() ||
      static_cast<int64_t>(keypoint_is_detail.size()) != num_keypoints()) {
    throw std::invalid_argument("keypoint metadata does not match joint_regressor");
  }
  (void)topological_order();
}

std::vector<int64_t> BodyModel::topological_order() const {
  const auto j = num_joints();
  int roots = 0;
  for (auto p : parents) {
    if (p == -1) ++roots;
    else if (p < 0 || p >= j) throw std::invalid_argument("kinematic parent out of range");
  }
  if (roots != 1) throw std::invalid_argument("kinematic tree needs exactly one root with parent -1");
  std::vector<int64_t> order;
  std::vector<int> state(static_cast<std::size_t>(j), 0);  // 0 new, 1 visiting, 2 done
  std::function<void(int64_t)> visit = [&](int64_t n) {
    if (state[n] == 2) return;
    if (state[n] == 1) throw std::invalid_argument("kinematic parents contain a cycle");
    state[n] = 1;
    if (parents[n] >= 0) visit(parents[n]);
    state[n] = 2;
    order.push_back(n);
  };
  for (int64_t n = 0; n < j; ++n) visit(n);
  return order;
}

BodyParams BodyParams::zeros(const BodyModel& model) {
  return {torch::zeros({model.num_joints(), 3}, kF64), torch::zeros({model.num_shape()}, kF64), torch::zeros({3}, kF64),
          1.0};
}

void BodyParams::validate(const BodyModel& model) const {
  if (!(scale > 0.0)) throw std::invalid_argument("body scale must be > 0");
  if (pose.dim() != 2 || pose.size(0) != model.num_joints() || pose.size(1) != 3) {
    throw std::invalid_argument("pose must be J x 3");
  }
  if (shape.dim() != 1 || shape.size(0) != model.num_shape()) throw std::invalid_argument("shape must have S entries");
  if (translation.dim() != 1 || translation.size(0) != 3) throw std::invalid_argument("translation must have 3 entries");
  if (!torch::isfinite(pose).all().item<bool>()) throw std::invalid_argument("pose must be finite");
}

BodyParams BodyParams::detached_clone() const {
  return {pose.detach().clone(), shape.detach().clone(), translation.detach().clone(), scale};
}

torch::Tensor rodrigues(const torch::Tensor& axis_angle) {
  const auto n = axis_angle.size(0);
  // The epsilon keeps the gradient finite at zero; the skew term vanishes
  // there so the matrix is still exactly the identity.
  auto angle = torch::sqrt((axis_angle * axis_angle).sum(1, true) + 1e-24);  // N x 1
  auto x = axis_angle.select(1, 0), y = axis_angle.select(1, 1), z = axis_angle.select(1, 2);
  auto zero = torch::zeros_like(x);
  auto skew = torch::stack({zero, -z, y, z, zero, -x, -y, x, zero}, 1).view({n, 3, 3});
  auto a = (torch::sin(angle) / angle).view({n, 1, 1});
  auto b = ((1.0 - torch::cos(angle)) / (angle * angle)).view({n, 1, 1});
  auto eye = torch::eye(3, axis_angle.options()).expand({n, 3, 3});
  return eye + a * skew + b * torch::matmul(skew, skew);
}

BodyOutput forward_body(const BodyModel& model, const BodyParams& params) {
  params.validate(model);
  const auto nj = model.num_joints();
  auto shaped = model.template_vertices + torch::einsum("s,svc->vc", {params.shape, model.shape_basis});
  auto rest_pivots = torch::matmul(model.skeleton_regressor, shaped);  // J x 3
  auto local = rodrigues(params.pose);

  // Skinning transform of joint j: x -> G_j x + a_j, built so that a zero
  // pose gives G = I and a = 0 bit-exactly.
  std::vector<torch::Tensor> global_rot(static_cast<std::size_t>(nj)), offset(static_cast<std::size_t>(nj));
  for (auto j : model.topological_order()) {
    auto pivot = rest_pivots[j];
    auto local_shift = pivot - torch::matmul(local[j], pivot);
    const auto p = model.parents[static_cast<std::size_t>(j)];
    if (p < 0) {
      global_rot[j] = local[j];
      offset[j] = local_shift;
    } else {
      global_rot[j] = torch::matmul(global_rot[p], local[j]);
      offset[j] = torch::matmul(global_rot[p], local_shift) + offset[p];
    }
  }
  auto rot = torch::stack(global_rot);   // J x 3 x 3
  auto shift = torch::stack(offset);     // J x 3
  auto eye = torch::eye(3, rot.options());

  // Per-joint displacement of every vertex, blended by the skinning weights.
  auto delta = torch::einsum("jab,vb->vja", {rot - eye, shaped}) + shift.unsqueeze(0);  // V x J x 3
  auto posed = shaped + torch::einsum("vj,vja->va", {model.skinning_weights, delta});

  auto pivot_delta = torch::einsum("jab,jb->ja", {rot - eye, rest_pivots}) + shift;

  BodyOutput out;
  out.vertices = params.scale * posed + params.translation;
  out.keypoints = torch::matmul(model.joint_regressor, out.vertices);
  out.pivots = params.scale * (rest_pivots + pivot_delta) + params.translation;
  return out;
}

void save_body_model(const std::filesystem::path& path, const BodyModel& model) {
  model.validate();
  ArrayFile file;
  file.add("template_vertices", model.template_vertices);
  file.add("faces", model.faces.to(torch::kFloat32));
  file.add("joint_regressor", model.joint_regressor);
  file.add("skeleton_regressor", model.skeleton_regressor);
  file.add("skinning_weights", model.skinning_weights);
  file.add("shape_basis", model.shape_basis);
  file.add("kinematic_parents", torch::tensor(model.parents, torch::kInt64).to(torch::kFloat32));
  std::vector<int> detail(model.keypoint_is_detail.begin(), model.keypoint_is_detail.end());
  file.metadata = {{"format", "ihk-body-model/1"},
                   {"joint_names", model.joint_names},
                   {"keypoint_names", model.keypoint_names},
                   {"keypoint_is_detail", detail}};
  save_array_file(path, file);
}

BodyModel load_body_model(const std::filesystem::path& path) {
  const auto file = load_array_file(path);
  BodyModel m;
  m.template_vertices = file.at("template_vertices").to(torch::kFloat64);
  m.faces = file.at("faces").round().to(torch::kInt64);
  // Stored as float32; renormalise so row sums hold in float64.
  auto renorm = [](torch::Tensor t) {
    t = t.to(torch::kFloat64);
    return t / t.sum(1, true);
  };
  m.joint_regressor = renorm(file.at("joint_regressor"));
  m.skeleton_regressor = renorm(file.at("skeleton_regressor"));
  m.skinning_weights = renorm(file.at("skinning_weights"));
  m.shape_basis = file.at("shape_basis").to(torch::kFloat64);
  auto parents = file.at("kinematic_parents").round().to(torch::kInt64).contiguous();
  m.parents.assign(parents.data_ptr<int64_t>(), parents.data_ptr<int64_t>() + parents.numel());
  m.joint_names = file.metadata.at("joint_names").get<std::vector<std::string>>();
  m.keypoint_names = file.metadata.at("keypoint_names").get<std::vector<std::string>>();
  for (int d : file.metadata.at("keypoint_is_detail").get<std::vector<int>>()) m.keypoint_is_detail.push_back(d != 0);
  m.validate();
  return m;
}

std::filesystem::path default_body_fixture_path() {
  return std::filesystem::path(IHK_SOURCE_DIR) / "fixtures" / "toy_body.safetensors";
}

BodyModel toy_body_model() {
  const auto path = default_body_fixture_path();
  if (!path.empty() && std::filesystem::exists(path)) return load_body_model(path);
  return make_toy_body_model();
}

nlohmann::json to_json(const BodyParams& params) {
  return {{"pose", to_vec(params.pose)},
          {"shape", to_vec(params.shape)},
          {"translation", to_vec(params.translation)},
          {"scale", params.scale}};
}

BodyParams body_params_from_json(const nlohmann::json& j) {
  BodyParams p;
  auto pose = j.at("pose").get<std::vector<double>>();
  if (pose.size() % 3 != 0) throw std::invalid_argument("pose length must be a multiple of 3");
  p.pose = torch::tensor(pose, kF64).view({static_cast<int64_t>(pose.size() / 3), 3});
  p.shape = torch::tensor(j.at("shape").get<std::vector<double>>(), kF64);
  p.translation = torch::tensor(j.at("translation").get<std::vector<double>>(), kF64);
  p.scale = j.at("scale").get<double>();
  return p;
}

}  // namespace ihk::bodyfit
