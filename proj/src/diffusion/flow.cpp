#include "ihk/diffusion/flow.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <stdexcept>
#include <string>

namespace ihk::diffusion {

FlowSample FlowSample::make(torch::Tensor target, torch::Tensor noise, double t) {
  FlowSample s;
  s.x_t = flow_interpolate(target, noise, t);
  s.target = std::move(target);
  s.noise = std::move(noise);
  s.t = t;
  return s;
}

void FlowSample::check(double tolerance) const {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow time must lie in [0, 1]");
  const double err = (x_t - flow_interpolate(target, noise, t)).abs().max().item<double>();
  if (!(err <= tolerance)) throw std::invalid_argument("flow sample x_t does not match its interpolation");
}

torch::Tensor flow_interpolate(const torch::Tensor& target, const torch::Tensor& eps, double t) {
  if (target.sizes() != eps.sizes()) throw std::invalid_argument("flow_interpolate: shape mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow time must lie in [0, 1]");
  // Endpoints are returned as-is so they hold bit-exactly.
  if (t == 0.0) return target.clone();
  if (t == 1.0) return eps.clone();
  return (1.0 - t) * target + t * eps;
}

torch::Tensor flow_interpolate(const torch::Tensor& target, const torch::Tensor& eps, const torch::Tensor& t) {
  if (target.sizes() != eps.sizes()) throw std::invalid_argument("flow_interpolate: shape mismatch");
  if (t.dim() != 1 || t.size(0) != target.size(0)) throw std::invalid_argument("flow_interpolate: one t per batch entry");
  std::vector<int64_t> shape(static_cast<std::size_t>(target.dim()), 1);
  shape[0] = target.size(0);
  auto tt = t.to(target.scalar_type()).view(shape);
  return (1.0 - tt) * target + tt * eps;
}

torch::Tensor flow_matching_loss(const torch::Tensor& v_pred, const torch::Tensor& eps, const torch::Tensor& target) {
  if (v_pred.sizes() != eps.sizes() || eps.sizes() != target.sizes()) {
    throw std::invalid_argument("flow_matching_loss: shape mismatch");
  }
  return (v_pred - (eps - target)).pow(2).mean();
}

torch::Tensor flow_initial_noise(torch::IntArrayRef shape, uint64_t seed, torch::ScalarType dtype) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::TensorOptions().dtype(torch::kFloat64)).to(dtype);
}

torch::Tensor flow_sample(const VelocityField& v, torch::IntArrayRef shape, int steps, uint64_t seed,
                          torch::ScalarType dtype, FlowTrace* trace) {
  if (steps < 1) throw std::invalid_argument("flow_sample needs steps >= 1");
  torch::NoGradGuard no_grad;
  auto x = flow_initial_noise(shape, seed, dtype);
  const double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - k * dt;
    x = x - dt * v(x, t);
    if (!torch::isfinite(x).all().item<bool>()) {
      throw std::runtime_error("flow_sample: non-finite state after step " + std::to_string(k) + " (t = " +
                               std::to_string(t) + ")");
    }
    if (trace) {
      trace->times.push_back(t);
      trace->x_norm.push_back(x.to(torch::kFloat64).pow(2).mean().sqrt().item<double>());
    }
  }
  return x;
}

}  // namespace ihk::diffusion
