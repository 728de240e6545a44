// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "realdpo/diffusion.hpp"
#include "test_util.hpp"

using namespace realdpo;
using namespace realdpo::diffusion;

TEST(Interpolate, EndpointsAreExact) {
  Rng r(1);
  const Vec x0 = r.normal_vec(16), eps = r.normal_vec(16);
  EXPECT_EQ(interpolate(x0, eps, 0.0), x0);
  EXPECT_EQ(interpolate(x0, eps, 1.0), eps);
}

TEST(Interpolate, MidpointArithmetic) {
  const Vec out = interpolate(Vec{2, 0}, Vec{0, 2}, 0.5);
  EXPECT_EQ(out, (Vec{1, 1}));
}

TEST(Interpolate, RejectsMismatchAndBadK) {
  EXPECT_THROW(interpolate(Vec{1, 2}, Vec{1}, 0.5), ShapeError);
  EXPECT_THROW(interpolate(Vec{1}, Vec{1}, 1.5), ConfigError);
}

TEST(VelocityTarget, Examples) {
  EXPECT_EQ(velocity_target(Vec{3, -1}, Vec{3, -1}), (Vec{0, 0}));
  EXPECT_EQ(velocity_target(Vec{1, 1}, Vec{0, 0}), (Vec{-1, -1}));
  EXPECT_THROW(velocity_target(Vec{1}, Vec{1, 2}), ShapeError);
}

TEST(VelocityTarget, PathIdentity) {
  Rng r(2);
  for (int t = 0; t < 50; ++t) {
    const Vec x0 = r.normal_vec(8), eps = r.normal_vec(8);
    const double k = r.uniform(0.01, 0.99);
    const Vec xk = interpolate(x0, eps, k), v = velocity_target(x0, eps);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(xk[i] + (1.0 - k) * v[i], eps[i], 1e-14);
  }
}

TEST(PredictX0, Examples) {
  EXPECT_EQ(predict_x0(Vec{1, 1}, Vec{-2, 2}, 0.5), (Vec{2, 0}));
  EXPECT_EQ(predict_x0(Vec{0.3, -4}, Vec{0, 0}, 0.7), (Vec{0.3, -4}));
}

TEST(PredictX0, RoundTripWithinFourUlpsOfElementScale) {
  Rng r(3);
  for (int t = 0; t < 2000; ++t) {
    const Vec x0 = r.normal_vec(8), eps = r.normal_vec(8);
    const double k = r.uniform(1e-6, 1.0 - 1e-6);
    const Vec xk = interpolate(x0, eps, k);
    const Vec back = predict_x0(xk, velocity_target(x0, eps), k);
    for (std::size_t i = 0; i < 8; ++i) {
      const double scale = std::max({std::abs(x0[i]), std::abs(eps[i]), std::abs(xk[i])});
      EXPECT_LE(std::abs(back[i] - x0[i]), 4.0 * std::numeric_limits<double>::epsilon() * scale)
          << "k=" << k << " i=" << i;
    }
  }
}

TEST(PredictX0, VjpIsMinusK) {
  const Vec g = predict_x0_vjp(Vec{1, -2}, 0.25);
  EXPECT_EQ(g, (Vec{-0.25, 0.5}));
}

TEST(SelectTimestep, DegenerateRange) {
  Rng r(4);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(select_timestep(r, 0.5, 0.5).value(), 0.5);
}

TEST(SelectTimestep, DeterministicAndInRange) {
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) {
    const double ka = select_timestep(a, 0.1, 0.9).value();
    EXPECT_EQ(ka, select_timestep(b, 0.1, 0.9).value());
    EXPECT_GE(ka, 0.1);
    EXPECT_LE(ka, 0.9);
  }
}

TEST(SelectTimestep, UniformMean) {
  Rng r(6);
  const int n = 100000;
  double s = 0;
  for (int i = 0; i < n; ++i) s += select_timestep(r, 0.1, 0.9).value();
  EXPECT_NEAR(s / n, 0.5, 3.0 * 0.8 / std::sqrt(12.0 * n));
}

TEST(SelectTimestep, RejectsInvalidRange) {
  Rng r(7);
  EXPECT_THROW(select_timestep(r, 0.0, 0.5), ConfigError);
  EXPECT_THROW(select_timestep(r, 0.6, 0.5), ConfigError);
  EXPECT_THROW(select_timestep(r, 0.2, 1.0), ConfigError);
  EXPECT_THROW(Timestep(0.0), ConfigError);
}

TEST(Snr, LinearPath) {
  EXPECT_DOUBLE_EQ(snr(0.5), 1.0);
  EXPECT_DOUBLE_EQ(snr(0.25), 9.0);
}

TEST(Sampler, ZeroVelocityReturnsInitNoise) {
  Rng r(8);
  const auto arch = testutil::tiny_arch();
  const auto p = init_params(r, arch);  // zero final layer
  const Vec eps = r.normal_vec(arch.latent_dim);
  EXPECT_EQ(sample(p, ConditionId{1}, eps, {}), eps);
}

TEST(Sampler, SingleStepIsOneEulerStep) {
  Rng r(9);
  const auto arch = testutil::tiny_arch();
  const auto p = testutil::random_params(r, arch);
  const Vec eps = r.normal_vec(arch.latent_dim);
  const Vec v = forward(p, eps, 1.0, ConditionId{0});
  const Vec out = sample(p, ConditionId{0}, eps, {1, 0});
  for (std::size_t i = 0; i < eps.size(); ++i) EXPECT_EQ(out[i], eps[i] - v[i]);
}

TEST(Sampler, LinearOdeOracleRecoversTarget) {
  Rng r(10);
  const Vec target = r.normal_vec(32), eps = r.normal_vec(32);
  auto oracle = [&](std::span<const double> x, double k, ConditionId) {
    Vec v(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) v[i] = (x[i] - target[i]) / k;
    return v;
  };
  const Vec out = sample_with(oracle, ConditionId{0}, eps, {50, 0});
  double se = 0;
  for (std::size_t i = 0; i < out.size(); ++i) se += (out[i] - target[i]) * (out[i] - target[i]);
  EXPECT_LE(std::sqrt(se / out.size()), 1e-5);
}

TEST(Sampler, DeterministicAndValidated) {
  Rng r(11);
  const auto arch = testutil::tiny_arch();
  const auto p = testutil::random_params(r, arch);
  const Vec eps = r.normal_vec(arch.latent_dim);
  EXPECT_EQ(sample(p, ConditionId{1}, eps, {}), sample(p, ConditionId{1}, eps, {}));
  EXPECT_THROW(sample(p, ConditionId{2}, eps, {}), ShapeError);
  EXPECT_THROW(sample(p, ConditionId{0}, Vec(3), {}), ShapeError);
  EXPECT_THROW(sample(p, ConditionId{0}, eps, {0, 0}), ConfigError);
}
