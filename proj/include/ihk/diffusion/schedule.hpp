#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace ihk::diffusion {

enum class ScheduleKind { linear };

// Discrete-time DDPM schedule with 0-based step indices. The value before
// the first step is alpha_bar[-1] == 1.
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;       // 1 - beta
  std::vector<double> alpha_bar;   // cumulative product of alpha
  std::vector<double> beta_tilde;  // posterior variance of step t
  std::vector<int64_t> timesteps;  // network timestep fed for each index (identity unless respaced)

  int64_t size() const { return static_cast<int64_t>(beta.size()); }
  // alpha_bar[t - 1], with 1 for t == 0.
  double alpha_bar_prev(int64_t t) const;
  // alpha_bar at an index where -1 means "before the first step".
  double alpha_bar_at(int64_t t) const { return t < 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t)); }
  void validate() const;
};

// Linear beta from 1e-4 to 0.02 over T points. T >= 2.
NoiseSchedule make_schedule(int64_t T, ScheduleKind kind = ScheduleKind::linear);

// Strided inference schedule over `steps` evenly spaced timesteps of `base`
// (always including the first and last). Betas are re-derived so that
// alpha_bar at each kept index equals the base value.
NoiseSchedule respace(const NoiseSchedule& base, int64_t steps);

// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
torch::Tensor q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps, const NoiseSchedule& s);
// Batched variant; t holds one index per leading-dimension entry.
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& s);

// x0 = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t).
torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int64_t t, const NoiseSchedule& s);
// Inverse of predict_x0 for a given x0: the noise that explains x_t.
torch::Tensor eps_from_x0(const torch::Tensor& x_t, const torch::Tensor& x0, int64_t t, const NoiseSchedule& s);

struct PosteriorCoefficients {
  double x_t;
  double x0;
};
// mu = sqrt(a_t)(1 - ab_{t-1})/(1 - ab_t) x_t + sqrt(ab_{t-1}) b_t/(1 - ab_t) x0.
PosteriorCoefficients posterior_coefficients(int64_t t, const NoiseSchedule& s);
torch::Tensor posterior_mean(const torch::Tensor& x_t, const torch::Tensor& x0_hat, int64_t t, const NoiseSchedule& s);
// mu + sqrt(beta_tilde_t) noise; plain mu at t == 0.
torch::Tensor ancestral_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, int64_t t, const torch::Tensor& noise,
                             const NoiseSchedule& s);
// Deterministic DDIM (eta = 0): sqrt(ab_next) x0 + sqrt(1 - ab_next) eps. t_next = -1 is the clean end.
torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, const torch::Tensor& eps_hat, int64_t t,
                        int64_t t_next, const NoiseSchedule& s);

// Sum over the body and head parts of the mean squared epsilon error.
torch::Tensor mvd_loss(const torch::Tensor& eps_hat_body, const torch::Tensor& eps_hat_head, const torch::Tensor& eps_body,
                       const torch::Tensor& eps_head);

}  // namespace ihk::diffusion
