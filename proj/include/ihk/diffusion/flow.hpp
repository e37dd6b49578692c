#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

namespace ihk::diffusion {

// x_t = (1 - t) target + t noise, with t in [0, 1].
struct FlowSample {
  torch::Tensor target;
  torch::Tensor noise;
  double t = 0.0;
  torch::Tensor x_t;

  // Builds x_t from the other fields.
  static FlowSample make(torch::Tensor target, torch::Tensor noise, double t);
  // Throws std::invalid_argument if x_t disagrees with the interpolation.
  void check(double tolerance = 1e-5) const;
};

torch::Tensor flow_interpolate(const torch::Tensor& target, const torch::Tensor& eps, double t);
// Batched: one t per leading-dimension entry.
torch::Tensor flow_interpolate(const torch::Tensor& target, const torch::Tensor& eps, const torch::Tensor& t);

// mean |v_pred - (eps - target)|^2.
torch::Tensor flow_matching_loss(const torch::Tensor& v_pred, const torch::Tensor& eps, const torch::Tensor& target);

// Velocity field v(x, t); conditioning is captured by the callable.
using VelocityField = std::function<torch::Tensor(const torch::Tensor& x, double t)>;

// Starting noise used by flow_sample for a given seed.
torch::Tensor flow_initial_noise(torch::IntArrayRef shape, uint64_t seed, torch::ScalarType dtype = torch::kFloat32);

struct FlowTrace {
  std::vector<double> times;   // t before each step
  std::vector<double> x_norm;  // RMS of the state after each step
};

// Euler integration from x_1 = noise at t = 1 down to t = 0 with dt = 1/steps:
// x <- x - dt v(x, t). Throws std::runtime_error naming the step if the
// state becomes non-finite.
torch::Tensor flow_sample(const VelocityField& v, torch::IntArrayRef shape, int steps, uint64_t seed,
                          torch::ScalarType dtype = torch::kFloat32, FlowTrace* trace = nullptr);

}  // namespace ihk::diffusion
