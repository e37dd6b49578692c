#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ihk/bodyfit/fit.hpp"
#include "ihk/common/array_file.hpp"

namespace ihk::bodyfit {

void save_keypoints(const std::filesystem::path& path, const BodyModel& model, const Joints2D& joints) {
  joints.validate(model.num_keypoints());
  nlohmann::json arr = nlohmann::json::array();
  for (int64_t k = 0; k < model.num_keypoints(); ++k) {
    arr.push_back({{"name", model.keypoint_names[static_cast<std::size_t>(k)]},
                   {"x", joints.positions[k][0].item<double>()},
                   {"y", joints.positions[k][1].item<double>()},
                   {"weight", joints.weights[k].item<double>()}});
  }
  write_file_bytes(path, arr.dump(2) + "\n");
}

Joints2D load_keypoints(const std::filesystem::path& path, const BodyModel& model) {
  const auto arr = nlohmann::json::parse(read_file_bytes(path));
  if (!arr.is_array()) throw std::invalid_argument("keypoint file must hold a JSON array");
  const auto k = model.num_keypoints();
  Joints2D out{torch::full({k, 2}, std::numeric_limits<double>::quiet_NaN(), torch::kFloat64),
               torch::zeros({k}, torch::kFloat64)};
  for (const auto& e : arr) {
    const auto name = e.at("name").get<std::string>();
    const auto it = std::find(model.keypoint_names.begin(), model.keypoint_names.end(), name);
    if (it == model.keypoint_names.end()) throw std::invalid_argument("unknown keypoint '" + name + "'");
    const auto idx = static_cast<int64_t>(it - model.keypoint_names.begin());
    out.positions[idx][0] = e.at("x").get<double>();
    out.positions[idx][1] = e.at("y").get<double>();
    out.weights[idx] = e.value("weight", 1.0);
  }
  out.validate(k);
  return out;
}

}  // namespace ihk::bodyfit
