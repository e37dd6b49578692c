#include "ihk/diffusion/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ihk::diffusion {

namespace {

void check_index(int64_t t, const NoiseSchedule& s) {
  if (t < 0 || t >= s.size()) throw std::out_of_range("timestep index " + std::to_string(t) + " outside schedule");
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

NoiseSchedule from_betas(std::vector<double> beta, std::vector<int64_t> timesteps) {
  NoiseSchedule s;
  s.beta = std::move(beta);
  s.timesteps = std::move(timesteps);
  const auto n = s.beta.size();
  s.alpha.resize(n);
  s.alpha_bar.resize(n);
  s.beta_tilde.resize(n);
  double prod = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    const double prev = prod;
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
    s.beta_tilde[t] = (1.0 - prev) / (1.0 - prod) * s.beta[t];
  }
  s.validate();
  return s;
}

}  // namespace

double NoiseSchedule::alpha_bar_prev(int64_t t) const {
  check_index(t, *this);
  return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
}

void NoiseSchedule::validate() const {
  const auto n = beta.size();
  if (n < 2 || alpha.size() != n || alpha_bar.size() != n || beta_tilde.size() != n || timesteps.size() != n) {
    throw std::invalid_argument("noise schedule arrays inconsistent");
  }
  for (std::size_t t = 0; t < n; ++t) {
    if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw std::invalid_argument("beta must lie in (0, 1)");
    if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1])) throw std::invalid_argument("alpha_bar must strictly decrease");
    if (beta_tilde[t] < 0.0) throw std::invalid_argument("beta_tilde must be nonnegative");
  }
}

NoiseSchedule make_schedule(int64_t T, ScheduleKind kind) {
  if (T < 2) throw std::invalid_argument("schedule needs T >= 2");
  if (kind != ScheduleKind::linear) throw std::invalid_argument("unsupported schedule kind");
  constexpr double kStart = 1e-4, kEnd = 0.02;
  std::vector<double> beta(static_cast<std::size_t>(T));
  std::vector<int64_t> steps(static_cast<std::size_t>(T));
  for (int64_t t = 0; t < T; ++t) {
    beta[t] = kStart + (kEnd - kStart) * static_cast<double>(t) / static_cast<double>(T - 1);
    steps[t] = t;
  }
  beta.back() = kEnd;
  return from_betas(std::move(beta), std::move(steps));
}

NoiseSchedule respace(const NoiseSchedule& base, int64_t steps) {
  base.validate();
  if (steps < 2 || steps > base.size()) throw std::invalid_argument("respaced step count must lie in [2, T]");
  std::vector<int64_t> kept;
  for (int64_t k = 0; k < steps; ++k) {
    kept.push_back(static_cast<int64_t>(std::llround(static_cast<double>(k) * static_cast<double>(base.size() - 1) /
                                                      static_cast<double>(steps - 1))));
  }
  std::vector<double> beta;
  std::vector<int64_t> timesteps;
  double prev = 1.0;
  for (auto t : kept) {
    const double ab = base.alpha_bar[static_cast<std::size_t>(t)];
    beta.push_back(1.0 - ab / prev);
    timesteps.push_back(base.timesteps[static_cast<std::size_t>(t)]);
    prev = ab;
  }
  auto s = from_betas(std::move(beta), std::move(timesteps));
  // Keep the base cumulative products bit-exact.
  for (std::size_t k = 0; k < kept.size(); ++k) s.alpha_bar[k] = base.alpha_bar[static_cast<std::size_t>(kept[k])];
  return s;
}

torch::Tensor q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps, const NoiseSchedule& s) {
  check_index(t, s);
  check_same_shape(x0, eps, "q_sample");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& s) {
  check_same_shape(x0, eps, "q_sample");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw std::invalid_argument("q_sample: one timestep per batch entry");
  auto table = torch::tensor(s.alpha_bar, torch::kFloat64);
  auto ab = table.index_select(0, t.to(torch::kInt64)).to(x0.scalar_type());
  std::vector<int64_t> shape(static_cast<std::size_t>(x0.dim()), 1);
  shape[0] = x0.size(0);
  ab = ab.view(shape);
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int64_t t, const NoiseSchedule& s) {
  check_index(t, s);
  check_same_shape(x_t, eps_hat, "predict_x0");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

torch::Tensor eps_from_x0(const torch::Tensor& x_t, const torch::Tensor& x0, int64_t t, const NoiseSchedule& s) {
  check_index(t, s);
  check_same_shape(x_t, x0, "eps_from_x0");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return (x_t - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
}

PosteriorCoefficients posterior_coefficients(int64_t t, const NoiseSchedule& s) {
  check_index(t, s);
  // First step: alpha_bar_prev = 1, so the mean is x0 itself. Returned
  // literally because 1 - alpha_bar[0] need not round to beta[0].
  if (t == 0) return {0.0, 1.0};
  const auto i = static_cast<std::size_t>(t);
  const double ab = s.alpha_bar[i];
  const double ab_prev = s.alpha_bar_prev(t);
  return {std::sqrt(s.alpha[i]) * (1.0 - ab_prev) / (1.0 - ab), std::sqrt(ab_prev) * s.beta[i] / (1.0 - ab)};
}

torch::Tensor posterior_mean(const torch::Tensor& x_t, const torch::Tensor& x0_hat, int64_t t, const NoiseSchedule& s) {
  check_same_shape(x_t, x0_hat, "posterior_mean");
  const auto c = posterior_coefficients(t, s);
  return c.x_t * x_t + c.x0 * x0_hat;
}

torch::Tensor ancestral_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, int64_t t, const torch::Tensor& noise,
                             const NoiseSchedule& s) {
  auto mu = posterior_mean(x_t, x0_hat, t, s);
  if (t == 0) return mu;
  check_same_shape(x_t, noise, "ancestral_step");
  return mu + std::sqrt(s.beta_tilde[static_cast<std::size_t>(t)]) * noise;
}

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, const torch::Tensor& eps_hat, int64_t t,
                        int64_t t_next, const NoiseSchedule& s) {
  check_index(t, s);
  check_same_shape(x_t, x0_hat, "ddim_step");
  check_same_shape(x_t, eps_hat, "ddim_step");
  if (t_next >= t || t_next < -1) throw std::invalid_argument("ddim_step: t_next must lie in [-1, t)");
  const double ab = s.alpha_bar_at(t_next);
  return std::sqrt(ab) * x0_hat + std::sqrt(1.0 - ab) * eps_hat;
}

torch::Tensor mvd_loss(const torch::Tensor& eps_hat_body, const torch::Tensor& eps_hat_head, const torch::Tensor& eps_body,
                       const torch::Tensor& eps_head) {
  check_same_shape(eps_hat_body, eps_body, "mvd_loss body");
  check_same_shape(eps_hat_head, eps_head, "mvd_loss head");
  return (eps_hat_body - eps_body).pow(2).mean() + (eps_hat_head - eps_head).pow(2).mean();
}

}  // namespace ihk::diffusion
