// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include "realdpo/core.hpp"

namespace realdpo::dpo {

enum class WeightingMode { constant_half_beta, snr_weighted };

inline std::string to_string(WeightingMode m) {
  return m == WeightingMode::constant_half_beta ? "constant" : "snr";
}

inline WeightingMode weighting_mode_from_string(const std::string& s) {
  if (s == "constant") return WeightingMode::constant_half_beta;
  if (s == "snr") return WeightingMode::snr_weighted;
  throw ConfigError("unknown weighting mode '" + s + "' (expected constant|snr)");
}

/// Scale applied to the margin inside the logistic loss.
///
/// constant: c = 0.5 * beta.
/// snr:      c = beta * T * omega_lambda, with omega_lambda the weighting
///           function evaluated at the SNR of the drawn timestep (held constant).
struct LossWeighting {
  WeightingMode mode = WeightingMode::constant_half_beta;
  double beta = 5.0;
  double T = 1.0;
  double omega_lambda = 1.0;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("weighting: beta must be > 0");
    if (mode == WeightingMode::snr_weighted && (!(T >= 1.0) || !(omega_lambda > 0.0)))
      throw ConfigError("weighting: snr mode requires T >= 1 and omega_lambda > 0");
  }

  double coefficient() const {
    return mode == WeightingMode::constant_half_beta ? 0.5 * beta : beta * T * omega_lambda;
  }
};

struct LossBreakdown {
  double loss = 0.0;
  double margin = 0.0;  // w_diff - l_diff
  double w_diff = 0.0;
  double l_diff = 0.0;
  bool implicit_correct = false;  // margin < 0
};

/// log(1 + e^z) without overflow for large |z|.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

/// Logistic sigmoid, branch-stable.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// -log sigmoid(-coeff * (delta_w - delta_l)) = softplus(coeff * (delta_w - delta_l)).
inline double dpo_logistic_core(double delta_w, double delta_l, double coeff) {
  if (!std::isfinite(delta_w) || !std::isfinite(delta_l) || !std::isfinite(coeff))
    throw NumericError("dpo_logistic_core: non-finite input");
  return softplus(coeff * (delta_w - delta_l));
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "squared_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Shared core of the latent-space and noise-space preference losses: each
/// "target" is compared against a trainer prediction and a reference prediction.
inline LossBreakdown preference_loss(std::span<const double> target_w, std::span<const double> trainer_w,
                                     std::span<const double> reference_w, std::span<const double> target_l,
                                     std::span<const double> trainer_l, std::span<const double> reference_l,
                                     const LossWeighting& w) {
  w.validate();
  LossBreakdown out;
  out.w_diff = squared_distance(target_w, trainer_w) - squared_distance(target_w, reference_w);
  out.l_diff = squared_distance(target_l, trainer_l) - squared_distance(target_l, reference_l);
  out.margin = out.w_diff - out.l_diff;
  out.loss = dpo_logistic_core(out.w_diff, out.l_diff, w.coefficient());
  out.implicit_correct = out.margin < 0.0;
  return out;
}

/// Inputs to the latent-space loss. Reference predictions are constants.
struct LatentPredictions {
  std::span<const double> x0_w, xhat0_w, xtilde0_w;
  std::span<const double> x0_l, xhat0_l, xtilde0_l;
};

inline LossBreakdown realdpo_loss(const LatentPredictions& p, const LossWeighting& w) {
  if (!all_finite(p.xhat0_w) || !all_finite(p.xhat0_l) || !all_finite(p.xtilde0_w) ||
      !all_finite(p.xtilde0_l))
    throw NumericError("realdpo_loss: non-finite reconstruction");
  return preference_loss(p.x0_w, p.xhat0_w, p.xtilde0_w, p.x0_l, p.xhat0_l, p.xtilde0_l, w);
}

/// Gradient of realdpo_loss with respect to the trainer reconstructions.
struct RealDpoAdjoint {
  Vec d_xhat0_w;
  Vec d_xhat0_l;
};

inline RealDpoAdjoint realdpo_adjoint(const LatentPredictions& p, const LossBreakdown& b,
                                      const LossWeighting& w, double scale = 1.0) {
  // d softplus(c m) / dm = c sigmoid(c m); d||x0 - xhat||^2 / dxhat = -2 (x0 - xhat).
  const double c = w.coefficient();
  const double dm = scale * c * sigmoid(c * b.margin);
  RealDpoAdjoint adj{Vec(p.x0_w.size()), Vec(p.x0_l.size())};
  for (std::size_t i = 0; i < p.x0_w.size(); ++i) adj.d_xhat0_w[i] = -2.0 * dm * (p.x0_w[i] - p.xhat0_w[i]);
  for (std::size_t i = 0; i < p.x0_l.size(); ++i) adj.d_xhat0_l[i] = 2.0 * dm * (p.x0_l[i] - p.xhat0_l[i]);
  return adj;
}

/// Noise-prediction form of the diffusion preference loss. Kept as a
/// reference implementation; training uses the latent-space form.
inline LossBreakdown diffusion_dpo_eps_loss(std::span<const double> eps_w, std::span<const double> epshat_w,
                                            std::span<const double> epstilde_w, std::span<const double> eps_l,
                                            std::span<const double> epshat_l, std::span<const double> epstilde_l,
                                            const LossWeighting& w) {
  return preference_loss(eps_w, epshat_w, epstilde_w, eps_l, epshat_l, epstilde_l, w);
}

/// Mean squared error of an x0 reconstruction over all elements.
inline double sft_loss(std::span<const double> x0, std::span<const double> xhat0) {
  require_same_size(x0.size(), xhat0.size(), "sft_loss");
  if (x0.empty()) throw ShapeError("sft_loss: empty sample");
  return squared_distance(x0, xhat0) / static_cast<double>(x0.size());
}

/// d sft_loss / d xhat0, times `scale`.
inline Vec sft_adjoint(std::span<const double> x0, std::span<const double> xhat0, double scale = 1.0) {
  Vec g(x0.size());
  const double f = -2.0 * scale / static_cast<double>(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) g[i] = f * (x0[i] - xhat0[i]);
  return g;
}

}  // namespace realdpo::dpo
