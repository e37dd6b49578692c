#include "ihk/genmodels/checkpoint.hpp"

#include <stdexcept>

#include "ihk/common/array_file.hpp"
#include "ihk/common/module_io.hpp"

namespace ihk::genmodels {

namespace {

std::vector<torch::Tensor> optimizer_params(const torch::optim::Adam& opt) {
  std::vector<torch::Tensor> out;
  for (const auto& g : opt.param_groups()) {
    for (const auto& p : g.params()) out.push_back(p);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module, const nlohmann::json& config,
                     const torch::optim::Adam* optimizer, int64_t step, const nlohmann::json& extra) {
  auto file = module_to_arrays(module, config);
  file.metadata["step"] = step;
  file.metadata["extra"] = extra.is_null() ? nlohmann::json::object() : extra;
  if (optimizer) {
    std::vector<int64_t> steps;
    const auto params = optimizer_params(*optimizer);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto it = optimizer->state().find(params[i].unsafeGetTensorImpl());
      if (it == optimizer->state().end()) {
        steps.push_back(0);
        continue;
      }
      const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
      steps.push_back(st.step());
      file.add("adam." + std::to_string(i) + ".exp_avg", st.exp_avg());
      file.add("adam." + std::to_string(i) + ".exp_avg_sq", st.exp_avg_sq());
    }
    file.metadata["adam_steps"] = steps;
  }
  save_array_file(path, file);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  const auto file = load_array_file(path);
  CheckpointInfo info;
  info.config = file.metadata.value("config", nlohmann::json::object());
  info.step = file.metadata.value("step", int64_t{0});
  info.extra = file.metadata.value("extra", nlohmann::json::object());
  return info;
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                               torch::optim::Adam* optimizer) {
  const auto file = load_array_file(path);
  load_module_arrays(module, file);
  CheckpointInfo info;
  info.config = file.metadata.value("config", nlohmann::json::object());
  info.step = file.metadata.value("step", int64_t{0});
  info.extra = file.metadata.value("extra", nlohmann::json::object());
  if (optimizer) {
    if (!file.metadata.contains("adam_steps")) throw std::runtime_error("checkpoint holds no optimiser state");
    const auto steps = file.metadata.at("adam_steps").get<std::vector<int64_t>>();
    const auto params = optimizer_params(*optimizer);
    if (steps.size() != params.size()) throw std::runtime_error("optimiser parameter count mismatch");
    auto& state = optimizer->state();
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.erase(params[i].unsafeGetTensorImpl());
      if (steps[i] == 0) continue;
      const auto avg = "adam." + std::to_string(i) + ".exp_avg";
      const auto sq = "adam." + std::to_string(i) + ".exp_avg_sq";
      if (!file.contains(avg) || !file.contains(sq)) throw std::runtime_error("checkpoint is missing " + avg);
      if (file.at(avg).sizes() != params[i].sizes()) throw std::runtime_error("optimiser state shape mismatch");
      auto st = std::make_unique<torch::optim::AdamParamState>();
      st->step(steps[i]);
      st->exp_avg(file.at(avg).clone().to(params[i].scalar_type()));
      st->exp_avg_sq(file.at(sq).clone().to(params[i].scalar_type()));
      state[params[i].unsafeGetTensorImpl()] = std::move(st);
    }
  }
  return info;
}

}  // namespace ihk::genmodels
