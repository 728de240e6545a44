// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "realdpo/core.hpp"
#include "realdpo/model.hpp"

/// Rectified-flow forward process and its ODE sampler.
///
/// The forward process is the straight line x_k = (1 - k) x0 + k eps, so the
/// velocity d x_k / dk = eps - x0 is constant along a path and a velocity
/// prediction converts back to a clean-latent estimate in closed form.
namespace realdpo::diffusion {

inline constexpr double kDefaultKMin = 0.05;
inline constexpr double kDefaultKMax = 0.95;
inline constexpr std::uint32_t kDefaultSamplerSteps = 50;

/// A timestep drawn for one training round. Valid k lies strictly inside (0, 1).
class Timestep {
 public:
  explicit Timestep(double k) : k_(k) {
    if (!(k > 0.0 && k < 1.0)) throw ConfigError("timestep must lie in (0, 1)");
  }
  double value() const { return k_; }

 private:
  double k_;
};

struct SamplerConfig {
  std::uint32_t num_steps = kDefaultSamplerSteps;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_steps < 1) throw ConfigError("sampler: num_steps must be >= 1");
  }
};

/// (1 - k) x0 + k eps. Exact at both endpoints.
inline Vec interpolate(std::span<const double> x0, std::span<const double> eps, double k) {
  require_same_size(x0.size(), eps.size(), "interpolate");
  if (!(k >= 0.0 && k <= 1.0)) throw ConfigError("interpolate: k outside [0, 1]");
  Vec out(x0.size());
  if (k == 0.0) return Vec(x0.begin(), x0.end());
  if (k == 1.0) return Vec(eps.begin(), eps.end());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = (1.0 - k) * x0[i] + k * eps[i];
  return out;
}

/// eps - x0, the regression target of the velocity model.
inline Vec velocity_target(std::span<const double> x0, std::span<const double> eps) {
  require_same_size(x0.size(), eps.size(), "velocity_target");
  Vec out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = eps[i] - x0[i];
  return out;
}

/// x_k - k v_hat: clean-latent estimate implied by a velocity prediction.
inline Vec predict_x0(std::span<const double> x_k, std::span<const double> v_hat, double k) {
  require_same_size(x_k.size(), v_hat.size(), "predict_x0");
  Vec out(x_k.size());
  for (std::size_t i = 0; i < x_k.size(); ++i) out[i] = x_k[i] - k * v_hat[i];
  return out;
}

/// Pullback of predict_x0 onto v_hat: dL/dv_hat = -k dL/dx0_hat.
inline Vec predict_x0_vjp(std::span<const double> x0_hat_adjoint, double k) {
  Vec out(x0_hat_adjoint.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -k * x0_hat_adjoint[i];
  return out;
}

/// Signal-to-noise ratio of the linear path, (1 - k)^2 / k^2.
inline double snr(double k) { return (1.0 - k) * (1.0 - k) / (k * k); }

/// k ~ Uniform[k_min, k_max].
inline Timestep select_timestep(Rng& rng, double k_min, double k_max) {
  if (!(k_min > 0.0 && k_min <= k_max && k_max < 1.0))
    throw ConfigError("select_timestep: require 0 < k_min <= k_max < 1");
  if (k_min == k_max) return Timestep(k_min);
  return Timestep(rng.uniform(k_min, k_max));
}

/// Euler integration of dx/dk = v(x, k, cond) from k = 1 (x = eps_init) down to k = 0.
/// `velocity` is any callable Vec(std::span<const double>, double, ConditionId).
template <class VelocityFn>
Vec sample_with(VelocityFn&& velocity, ConditionId cond, std::span<const double> eps_init,
                const SamplerConfig& cfg) {
  cfg.validate();
  Vec x(eps_init.begin(), eps_init.end());
  const double dt = 1.0 / static_cast<double>(cfg.num_steps);
  for (std::uint32_t i = 0; i < cfg.num_steps; ++i) {
    const double k = 1.0 - static_cast<double>(i) * dt;
    const Vec v = velocity(std::span<const double>(x), k, cond);
    require_same_size(v.size(), x.size(), "sample: velocity");
    for (std::size_t j = 0; j < x.size(); ++j) x[j] -= dt * v[j];
  }
  return x;
}

inline Vec sample(const DenoiserParams& params, ConditionId cond, std::span<const double> eps_init,
                  const SamplerConfig& cfg) {
  require_same_size(eps_init.size(), params.arch.latent_dim, "sample: eps_init");
  if (cond.value >= params.arch.num_classes)
    throw ShapeError("sample: condition id " + std::to_string(cond.value) + " out of range");
  return sample_with(
      [&](std::span<const double> x, double k, ConditionId c) { return forward(params, x, k, c); }, cond,
      eps_init, cfg);
}

}  // namespace realdpo::diffusion
