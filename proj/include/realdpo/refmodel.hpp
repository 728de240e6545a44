// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>

#include "realdpo/model.hpp"

namespace realdpo::refmodel {

inline constexpr double kDefaultEmaDecay = 0.996;
inline constexpr std::uint64_t kDefaultUpdateInterval = 100;

struct RefModelConfig {
  double ema_decay = kDefaultEmaDecay;
  std::uint64_t update_interval = kDefaultUpdateInterval;

  void validate() const {
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
    if (update_interval < 1) throw ConfigError("update_interval must be >= 1");
  }
};

/// ref <- omega * ref + (1 - omega) * train, elementwise.
inline DenoiserParams ema_update(const DenoiserParams& ref, const DenoiserParams& train, double omega) {
  require_same_arch(ref, train, "ema_update");
  if (!(omega >= 0.0 && omega <= 1.0)) throw ConfigError("ema_update: omega must lie in [0, 1]");
  DenoiserParams out = ref;
  if (omega == 1.0) return out;
  if (omega == 0.0) {
    out.values = train.values;
    return out;
  }
  // Written as r + (1 - omega)(t - r) so that r == t is an exact fixed point;
  // the clamp keeps every entry inside [min(r, t), max(r, t)] despite rounding.
  const double step = 1.0 - omega;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double r = ref.values[i], t = train.values[i];
    out.values[i] = std::clamp(r + step * (t - r), std::min(r, t), std::max(r, t));
  }
  return out;
}

inline bool update_due(std::uint64_t step, std::uint64_t interval) {
  return step > 0 && step % interval == 0;
}

/// Applies ema_update in place when `step` is a positive multiple of the interval.
/// Returns whether an update happened.
inline bool maybe_update(std::uint64_t step, DenoiserParams& ref, const DenoiserParams& train,
                         const RefModelConfig& cfg) {
  cfg.validate();
  if (!update_due(step, cfg.update_interval)) return false;
  ref = ema_update(ref, train, cfg.ema_decay);
  return true;
}

}  // namespace realdpo::refmodel
