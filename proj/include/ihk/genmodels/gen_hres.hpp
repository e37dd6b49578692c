#pragma once

#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ihk/diffusion/flow.hpp"
#include "ihk/genmodels/conditions.hpp"
#include "ihk/genmodels/flow_model.hpp"

namespace ihk::genmodels {

// Full-body generation conditions: front normal map (aligned, offset 0),
// garment reference tokens (offset -48) and the caption.
FlowConditions hres_conditions(const ConditionBundle& bundle, const FlowModelConfig& config, int64_t patch = 4);

// Try-off conditions: the dressed-person image (aligned) and the instruction
// "Please extract {garment} for this person".
std::string tryoff_instruction(const std::string& garment);
FlowConditions tryoff_conditions(const torch::Tensor& person_image, const std::string& garment,
                                 const FlowModelConfig& config);

// Euler sampling of a flow model for one sample. Returns R x R x C image in [0,1].
torch::Tensor sample_flow_image(FlowModel& model, const FlowConditions& cond, int steps, uint64_t seed,
                                diffusion::FlowTrace* trace = nullptr);

struct HResResult {
  torch::Tensor image;     // R x R x 4 premultiplied RGBA
  nlohmann::json record;   // generation record plus the mesh-carving handoff
};

HResResult gen_hres(const ConditionBundle& bundle, FlowModel& model, int steps);

}  // namespace ihk::genmodels
