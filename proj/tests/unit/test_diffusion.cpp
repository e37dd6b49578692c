#include "doctest.h"

#include <cmath>

#include "ihk/diffusion/flow.hpp"
#include "ihk/diffusion/schedule.hpp"

using namespace ihk::diffusion;

namespace {
const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);
}

TEST_CASE("linear schedule endpoints and identities") {
  const auto s = make_schedule(1000);
  CHECK(s.size() == 1000);
  CHECK(s.beta.front() == 1e-4);
  CHECK(s.beta.back() == 0.02);
  double prod = 1.0;
  for (int64_t t = 0; t < s.size(); ++t) {
    prod *= 1.0 - s.beta[t];
    CHECK(std::abs(s.alpha_bar[t] - prod) < 1e-12);
    if (t > 0) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    const double ab_prev = t == 0 ? 1.0 : s.alpha_bar[t - 1];
    CHECK(std::abs(s.beta_tilde[t] - (1.0 - ab_prev) / (1.0 - s.alpha_bar[t]) * s.beta[t]) < 1e-15);
  }
  CHECK(s.beta_tilde[0] == 0.0);
  CHECK_THROWS_AS(make_schedule(1), std::invalid_argument);
}

TEST_CASE("respaced schedule keeps alpha_bar at the kept timesteps") {
  const auto base = make_schedule(1000);
  const auto s = respace(base, 50);
  CHECK(s.size() == 50);
  CHECK(s.timesteps.front() == 0);
  CHECK(s.timesteps.back() == 999);
  for (int64_t k = 0; k < s.size(); ++k) CHECK(s.alpha_bar[k] == base.alpha_bar[s.timesteps[k]]);
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("q_sample coefficients") {
  const auto s = make_schedule(1000);
  auto x0 = torch::randn({2, 3}, kF64);
  CHECK(torch::allclose(q_sample(x0, 500, torch::zeros_like(x0), s), std::sqrt(s.alpha_bar[500]) * x0, 0, 1e-15));
  // Last step: the noise coefficient dominates.
  CHECK(std::sqrt(s.alpha_bar[999]) < 0.01);
  CHECK(std::sqrt(1.0 - s.alpha_bar[999]) > 0.99);
  CHECK_THROWS_AS(q_sample(x0, 1000, x0, s), std::out_of_range);
  CHECK_THROWS_AS(q_sample(x0, 3, torch::zeros({3}, kF64), s), std::invalid_argument);
}

TEST_CASE("q_sample mean over 10k noise draws (Monte Carlo)") {
  const auto s = make_schedule(1000);
  torch::manual_seed(1);
  const int64_t n = 10000, t = 300;
  auto x0 = torch::tensor({0.8, -0.3}, kF64);
  auto eps = torch::randn({n, 2}, kF64);
  auto xt = q_sample(x0.expand({n, 2}).contiguous(), t, eps, s);
  const double sigma = std::sqrt(1.0 - s.alpha_bar[t]);
  auto err = (xt.mean(0) - std::sqrt(s.alpha_bar[t]) * x0).abs().max().item<double>();
  CHECK(err < 3.0 * sigma / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("batched q_sample matches the scalar form") {
  const auto s = make_schedule(1000);
  auto x0 = torch::randn({3, 4}, kF64), eps = torch::randn({3, 4}, kF64);
  auto t = torch::tensor({0, 400, 999}, torch::kInt64);
  auto got = q_sample(x0, t, eps, s);
  for (int i = 0; i < 3; ++i) CHECK(torch::allclose(got[i], q_sample(x0[i], t[i].item<int64_t>(), eps[i], s)));
}

TEST_CASE("predict_x0 inverts q_sample at every step") {
  const auto s = make_schedule(1000);
  auto x0 = torch::randn({8}, kF64), eps = torch::randn({8}, kF64);
  double worst = 0.0;
  for (int64_t t = 0; t < s.size(); ++t) {
    auto back = predict_x0(q_sample(x0, t, eps, s), eps, t, s);
    worst = std::max(worst, (back - x0).abs().max().item<double>());
  }
  CHECK(worst < 1e-6);
  auto xt = torch::randn({8}, kF64);
  CHECK(torch::allclose(predict_x0(xt, torch::zeros_like(xt), 10, s), xt / std::sqrt(s.alpha_bar[10])));
}

TEST_CASE("predict_x0 scalar hand computation") {
  const auto s = make_schedule(1000);
  const double ab = s.alpha_bar[250];
  const double xt = 0.37, e = -1.2;
  const double want = (xt - std::sqrt(1 - ab) * e) / std::sqrt(ab);
  auto got = predict_x0(torch::tensor({xt}, kF64), torch::tensor({e}, kF64), 250, s);
  CHECK(got.item<double>() == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("posterior mean at the first step is x0_hat exactly") {
  const auto s = make_schedule(1000);
  auto xt = torch::randn({5}, kF64), x0 = torch::randn({5}, kF64);
  CHECK(torch::equal(posterior_mean(xt, x0, 0, s), x0));
}

TEST_CASE("posterior coefficients match the Gaussian Bayes posterior on T=5") {
  const auto s = make_schedule(5);
  for (int64_t t = 1; t < 5; ++t) {
    // prior x_{t-1} | x0 ~ N(sqrt(ab_prev) x0, 1 - ab_prev); x_t | x_{t-1} ~ N(sqrt(a_t) x_{t-1}, b_t)
    const double ab_prev = s.alpha_bar[t - 1], a = s.alpha[t], b = s.beta[t];
    const double var = 1.0 / (1.0 / (1.0 - ab_prev) + a / b);
    const double c_x0 = var * std::sqrt(ab_prev) / (1.0 - ab_prev);
    const double c_xt = var * std::sqrt(a) / b;
    const auto c = posterior_coefficients(t, s);
    CHECK(std::abs(c.x0 - c_x0) < 1e-12);
    CHECK(std::abs(c.x_t - c_xt) < 1e-12);
    CHECK(std::abs(s.beta_tilde[t] - var) < 1e-12);
  }
}

TEST_CASE("posterior mean with x0_hat = x_t matches the formula typed out separately") {
  const auto s = make_schedule(1000);
  auto x = torch::randn({6}, kF64);
  const int64_t t = 420;
  const double a = s.alpha[t], ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1], b = s.beta[t];
  auto want = (std::sqrt(a) * (1 - abp) / (1 - ab) + std::sqrt(abp) * b / (1 - ab)) * x;
  CHECK(torch::allclose(posterior_mean(x, x, t, s), want, 0, 1e-14));
}

TEST_CASE("ancestral step: zero noise gives the mean, t = 0 ignores noise, variance is beta_tilde") {
  const auto s = make_schedule(1000);
  auto xt = torch::randn({4}, kF64), x0 = torch::randn({4}, kF64);
  CHECK(torch::equal(ancestral_step(xt, x0, 50, torch::zeros_like(xt), s), posterior_mean(xt, x0, 50, s)));
  CHECK(torch::equal(ancestral_step(xt, x0, 0, torch::randn_like(xt), s), posterior_mean(xt, x0, 0, s)));

  torch::manual_seed(5);
  const int64_t n = 10000, t = 600;
  auto xs = torch::full({n}, 0.3, kF64), x0s = torch::full({n}, -0.1, kF64);
  auto draws = ancestral_step(xs, x0s, t, torch::randn({n}, kF64), s);
  const double var = draws.var().item<double>();
  // Sample variance of n Gaussian draws has relative std sqrt(2/(n-1)).
  CHECK(std::abs(var / s.beta_tilde[t] - 1.0) < 3.0 * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("ddim step endpoints and determinism") {
  const auto s = make_schedule(1000);
  auto xt = torch::randn({4}, kF64), x0 = torch::randn({4}, kF64), e = torch::randn({4}, kF64);
  CHECK(torch::equal(ddim_step(xt, x0, e, 10, -1, s), x0));
  CHECK(torch::equal(ddim_step(xt, x0, e, 10, 5, s), ddim_step(xt, x0, e, 10, 5, s)));
  CHECK_THROWS_AS(ddim_step(xt, x0, e, 10, 10, s), std::invalid_argument);
}

TEST_CASE("ddim and ancestral steps share the q(x_{t-1} | x0) marginal (scalar Monte Carlo)") {
  const auto s = make_schedule(1000);
  torch::manual_seed(9);
  const int64_t n = 20000, t = 700;
  const double x0 = 0.5;
  auto eps = torch::randn({n}, kF64);
  auto x0s = torch::full({n}, x0, kF64);
  auto xt = q_sample(x0s, t, eps, s);
  auto via_ddim = ddim_step(xt, x0s, eps, t, t - 1, s);
  auto via_ancestral = ancestral_step(xt, x0s, t, torch::randn({n}, kF64), s);
  const double mean = std::sqrt(s.alpha_bar[t - 1]) * x0, var = 1.0 - s.alpha_bar[t - 1];
  const double tol_mean = 4.0 * std::sqrt(var / n), tol_var = 4.0 * std::sqrt(2.0 / (n - 1));
  CHECK(std::abs(via_ddim.mean().item<double>() - mean) < tol_mean);
  CHECK(std::abs(via_ancestral.mean().item<double>() - mean) < tol_mean);
  CHECK(std::abs(via_ddim.var().item<double>() / var - 1.0) < tol_var);
  CHECK(std::abs(via_ancestral.var().item<double>() / var - 1.0) < tol_var);
}

TEST_CASE("mvd loss") {
  auto a = torch::randn({4, 4, 2, 2}), b = torch::randn({4, 4, 2, 2});
  CHECK(mvd_loss(a, b, a, b).item<float>() == 0.0f);
  auto c = torch::randn_like(a), d = torch::randn_like(b);
  CHECK(mvd_loss(a, b, c, d).item<float>() == doctest::Approx(mvd_loss(b, a, d, c).item<float>()));
  // Two pixels per part: body errors (1, 3), head errors (2, 0).
  auto eb = torch::tensor({1.0, 3.0}), eh = torch::tensor({2.0, 0.0});
  CHECK(mvd_loss(eb, eh, torch::zeros(2), torch::zeros(2)).item<float>() == doctest::Approx((1 + 9) / 2.0 + (4 + 0) / 2.0));
}

TEST_CASE("flow interpolation endpoints and midpoint") {
  auto y = torch::randn({3, 5}), e = torch::randn({3, 5});
  CHECK(torch::equal(flow_interpolate(y, e, 0.0), y));
  CHECK(torch::equal(flow_interpolate(y, e, 1.0), e));
  CHECK(torch::allclose(flow_interpolate(y, e, 0.5), 0.5 * (y + e)));
  CHECK_THROWS_AS(flow_interpolate(y, e, 1.5), std::invalid_argument);
  auto s = FlowSample::make(y, e, 0.25);
  CHECK_NOTHROW(s.check());
  s.x_t += 1.0;
  CHECK_THROWS_AS(s.check(), std::invalid_argument);
}

TEST_CASE("flow matching loss") {
  auto y = torch::randn({10}), e = torch::randn({10});
  CHECK(flow_matching_loss(e - y, e, y).item<float>() == 0.0f);
  CHECK(flow_matching_loss(torch::zeros(10), e, y).item<float>() == doctest::Approx((e - y).pow(2).mean().item<float>()));
  // Scalar: v = 1, eps = 2, y = 0.5 -> (1 - 1.5)^2 = 0.25.
  CHECK(flow_matching_loss(torch::tensor({1.0}), torch::tensor({2.0}), torch::tensor({0.5})).item<float>() ==
        doctest::Approx(0.25));
}

TEST_CASE("Euler sampler integrates a constant field exactly for any step count") {
  const std::vector<int64_t> shape{2, 3};
  const uint64_t seed = 77;
  auto eps = flow_initial_noise(shape, seed, torch::kFloat64);
  auto target = torch::linspace(-1, 1, 6, kF64).view({2, 3});
  VelocityField v = [&](const torch::Tensor&, double) { return eps - target; };
  for (int steps : {1, 2, 3, 7, 50}) {
    auto out = flow_sample(v, shape, steps, seed, torch::kFloat64);
    CHECK((out - target).abs().max().item<double>() < 1e-12);
  }
}

TEST_CASE("flow sampler is deterministic for a seed and guards its inputs") {
  VelocityField v = [](const torch::Tensor& x, double t) { return x * t; };
  auto a = flow_sample(v, {4, 4}, 10, 3), b = flow_sample(v, {4, 4}, 10, 3), c = flow_sample(v, {4, 4}, 10, 4);
  CHECK(torch::equal(a, b));
  CHECK_FALSE(torch::equal(a, c));
  CHECK_THROWS_AS(flow_sample(v, {4}, 0, 1), std::invalid_argument);
  VelocityField bad = [](const torch::Tensor& x, double) { return x * std::numeric_limits<float>::infinity(); };
  CHECK_THROWS_AS(flow_sample(bad, {4}, 3, 1), std::runtime_error);
}
