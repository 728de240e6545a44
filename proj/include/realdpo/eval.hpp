// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "realdpo/core.hpp"
#include "realdpo/data.hpp"
#include "realdpo/diffusion.hpp"
#include "realdpo/model.hpp"
#include "realdpo/trainer.hpp"

/// Analytic judge over the trajectory families and head-to-head comparisons.
namespace realdpo::eval {

inline constexpr double kDefaultSmoothnessWeight = 1.0;
inline constexpr std::uint32_t kDefaultGridPoints = 20;

struct OracleConfig {
  std::vector<data::FamilySpec> families = data::default_families(3);
  double mu = kDefaultSmoothnessWeight;
  std::uint32_t grid_points = kDefaultGridPoints;
};

struct OracleScore {
  double family_residual = 0.0;
  double smoothness_energy = 0.0;
  double combined = 0.0;
};

inline Vec grid(const data::ParamRange& r, std::uint32_t n) {
  if (n < 2 || r.lo == r.hi) return {0.5 * (r.lo + r.hi)};
  Vec g(n);
  for (std::uint32_t i = 0; i < n; ++i) g[i] = r.lo + (r.hi - r.lo) * static_cast<double>(i) / (n - 1);
  return g;
}

namespace detail {

/// Least-squares residual (sum of squares) of y against span{b1, b2}.
inline double ls_residual2(std::span<const double> y, std::span<const double> b1, std::span<const double> b2) {
  double a11 = 0, a12 = 0, a22 = 0, r1 = 0, r2 = 0, yy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    a11 += b1[i] * b1[i];
    a12 += b1[i] * b2[i];
    a22 += b2[i] * b2[i];
    r1 += b1[i] * y[i];
    r2 += b2[i] * y[i];
    yy += y[i] * y[i];
  }
  const double det = a11 * a22 - a12 * a12;
  if (std::abs(det) <= 1e-12 * std::max(1.0, a11 * a22)) {
    // Degenerate basis: fall back to the better single-vector fit.
    const double s1 = a11 > 0 ? yy - r1 * r1 / a11 : yy;
    const double s2 = a22 > 0 ? yy - r2 * r2 / a22 : yy;
    return std::max(0.0, std::min(s1, s2));
  }
  const double c1 = (a22 * r1 - a12 * r2) / det;
  const double c2 = (a11 * r2 - a12 * r1) / det;
  double sse = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - c1 * b1[i] - c2 * b2[i];
    sse += d * d;
  }
  return sse;
}

inline double ls_residual1(std::span<const double> y, std::span<const double> b) {
  double bb = 0, by = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    bb += b[i] * b[i];
    by += b[i] * y[i];
  }
  const double c = bb > 0 ? by / bb : 0.0;
  double sse = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - c * b[i];
    sse += d * d;
  }
  return sse;
}

/// Smallest sum of squared errors of one dimension's track against the family.
/// Nonlinear parameters (frequency, damping) are searched on the grid; the
/// linear ones (amplitude/phase pair, offset/velocity, amplitude) are solved exactly.
inline double family_sse(const data::FamilySpec& fam, std::span<const double> y, std::uint32_t grid_points) {
  const std::size_t F = y.size();
  Vec t(F);
  for (std::size_t f = 0; f < F; ++f) t[f] = data::frame_time(static_cast<std::uint32_t>(f), static_cast<std::uint32_t>(F));
  constexpr double two_pi = 2.0 * std::numbers::pi;
  Vec b1(F), b2(F);
  double best = std::numeric_limits<double>::infinity();
  switch (fam.kind) {
    case data::FamilyKind::sinusoid:
      for (double freq : grid(fam.range("frequency"), grid_points)) {
        for (std::size_t f = 0; f < F; ++f) {
          b1[f] = std::sin(two_pi * freq * t[f]);
          b2[f] = std::cos(two_pi * freq * t[f]);
        }
        best = std::min(best, ls_residual2(y, b1, b2));
      }
      break;
    case data::FamilyKind::line:
      for (std::size_t f = 0; f < F; ++f) {
        b1[f] = 1.0;
        b2[f] = t[f];
      }
      best = ls_residual2(y, b1, b2);
      break;
    case data::FamilyKind::damped_bounce:
      for (double gamma : grid(fam.range("damping"), grid_points)) {
        for (double freq : grid(fam.range("frequency"), grid_points)) {
          for (std::size_t f = 0; f < F; ++f) b1[f] = std::exp(-gamma * t[f]) * std::cos(two_pi * freq * t[f]);
          best = std::min(best, ls_residual1(y, b1));
        }
      }
      break;
  }
  return best;
}

}  // namespace detail

/// Mean squared second difference: sum_t ||x_{t+1} - 2 x_t + x_{t-1}||^2 / ((F - 2) D).
inline double smoothness_energy(const data::LatentSample& s) {
  if (s.frames < 3) throw ConfigError("smoothness_energy: needs at least 3 frames");
  double e = 0.0;
  for (std::uint32_t f = 1; f + 1 < s.frames; ++f)
    for (std::uint32_t d = 0; d < s.dims; ++d) {
      const double dd = s.at(f + 1, d) - 2.0 * s.at(f, d) + s.at(f - 1, d);
      e += dd * dd;
    }
  return e / (static_cast<double>(s.frames - 2) * s.dims);
}

/// RMS distance from the sample to the closest member of its class's family.
inline double family_residual(const data::LatentSample& s, const data::FamilySpec& fam, std::uint32_t grid_points) {
  double sse = 0.0;
  Vec track(s.frames);
  for (std::uint32_t d = 0; d < s.dims; ++d) {
    for (std::uint32_t f = 0; f < s.frames; ++f) track[f] = s.at(f, d);
    sse += detail::family_sse(fam, track, grid_points);
  }
  return std::sqrt(sse / static_cast<double>(s.size()));
}

inline OracleScore oracle_score(const data::LatentSample& s, ConditionId cond, const OracleConfig& cfg) {
  if (cond.value >= cfg.families.size())
    throw ConfigError("oracle_score: condition id " + std::to_string(cond.value) + " has no family");
  OracleScore o;
  o.smoothness_energy = smoothness_energy(s);
  o.family_residual = family_residual(s, cfg.families[cond.value], cfg.grid_points);
  o.combined = o.family_residual + cfg.mu * o.smoothness_energy;
  return o;
}

/// Worst-case RMS residual of a noiseless family member caused by searching
/// the nonlinear parameters on a grid instead of solving them exactly.
inline double grid_quantization_bound(const data::FamilySpec& fam, std::uint32_t grid_points) {
  auto half_step = [&](const data::ParamRange& r) {
    return grid_points < 2 ? (r.hi - r.lo) : 0.5 * (r.hi - r.lo) / (grid_points - 1);
  };
  switch (fam.kind) {
    case data::FamilyKind::sinusoid:
      // |sin(a) - sin(b)| <= |a - b| = 2 pi |df| t.
      return fam.range("amplitude").hi * 2.0 * std::numbers::pi * half_step(fam.range("frequency"));
    case data::FamilyKind::line: return 0.0;
    case data::FamilyKind::damped_bounce:
      return fam.range("amplitude").hi *
             (half_step(fam.range("damping")) + 2.0 * std::numbers::pi * half_step(fam.range("frequency")));
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Head-to-head comparison

struct PromptOutcome {
  ConditionId cond;
  double score_a = 0.0;
  double score_b = 0.0;
  double outcome_a = 0.0;  // 1 win, 0.5 tie, 0 loss
};

struct WinRateResult {
  double win_rate_a = 0.0;
  double mean_score_a = 0.0;
  double mean_score_b = 0.0;
  std::vector<PromptOutcome> prompts;
};

/// Prompt i uses condition i mod classes.
inline std::vector<ConditionId> cycle_prompts(std::uint32_t count, std::uint32_t classes) {
  std::vector<ConditionId> out(count);
  for (std::uint32_t i = 0; i < count; ++i) out[i] = ConditionId{i % classes};
  return out;
}

/// Aggregates per-prompt outcomes in index order.
inline WinRateResult aggregate(std::vector<PromptOutcome> prompts) {
  WinRateResult r;
  r.prompts = std::move(prompts);
  if (r.prompts.empty()) return r;
  double wins = 0, sa = 0, sb = 0;
  for (const auto& p : r.prompts) {
    wins += p.outcome_a;
    sa += p.score_a;
    sb += p.score_b;
  }
  const double n = static_cast<double>(r.prompts.size());
  r.win_rate_a = wins / n;
  r.mean_score_a = sa / n;
  r.mean_score_b = sb / n;
  return r;
}

/// Both samplers start each prompt from the same init noise; lower combined score wins.
/// A sampler is any callable Vec(ConditionId, std::span<const double> eps).
template <class SamplerA, class SamplerB>
WinRateResult win_rate_with(SamplerA&& sample_a, SamplerB&& sample_b, const std::vector<ConditionId>& prompts,
                            std::uint32_t frames, std::uint32_t dims, std::uint64_t seed, const OracleConfig& oracle,
                            unsigned threads = 1) {
  std::vector<PromptOutcome> out(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    Rng rng(child_seed(seed, i));
    const Vec eps = rng.normal_vec(std::size_t{frames} * dims);
    const data::LatentSample a(frames, dims, sample_a(prompts[i], eps));
    const data::LatentSample b(frames, dims, sample_b(prompts[i], eps));
    PromptOutcome p;
    p.cond = prompts[i];
    p.score_a = oracle_score(a, prompts[i], oracle).combined;
    p.score_b = oracle_score(b, prompts[i], oracle).combined;
    p.outcome_a = p.score_a < p.score_b ? 1.0 : (p.score_a == p.score_b ? 0.5 : 0.0);
    out[i] = p;
  });
  return aggregate(std::move(out));
}

inline WinRateResult win_rate(const DenoiserParams& a, const DenoiserParams& b, const std::vector<ConditionId>& prompts,
                              std::uint32_t frames, std::uint32_t dims, const diffusion::SamplerConfig& sampler,
                              std::uint64_t seed, const OracleConfig& oracle, unsigned threads = 1) {
  require_same_arch(a, b, "win_rate");
  require_same_size(a.arch.latent_dim, std::size_t{frames} * dims, "win_rate: latent shape");
  auto sampler_for = [&](const DenoiserParams& p) {
    return [&p, &sampler](ConditionId c, std::span<const double> eps) { return diffusion::sample(p, c, eps, sampler); };
  };
  return win_rate_with(sampler_for(a), sampler_for(b), prompts, frames, dims, seed, oracle, threads);
}

// ---------------------------------------------------------------------------
// Export

struct ComparisonRow {
  std::string model_a;
  std::string model_b;
  std::uint64_t prompts = 0;
  double win_rate_a = 0.0;
  double mean_score_a = 0.0;
  double mean_score_b = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr std::string_view kComparisonHeader = "model_a,model_b,prompts,win_rate_a,mean_score_a,mean_score_b,seed";
inline constexpr std::string_view kPromptHeader = "model_a,model_b,prompt,cond_id,score_a,score_b,outcome_a";

inline ComparisonRow make_row(std::string a, std::string b, const WinRateResult& r, std::uint64_t seed) {
  return {std::move(a), std::move(b), r.prompts.size(), r.win_rate_a, r.mean_score_a, r.mean_score_b, seed};
}

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  using trainer::format_real;
  std::string out(kComparisonHeader);
  out += '\n';
  for (const auto& r : rows) {
    if (!(r.win_rate_a >= 0.0 && r.win_rate_a <= 1.0)) throw NumericError("comparison: win rate outside [0, 1]");
    out += r.model_a + ',' + r.model_b + ',' + std::to_string(r.prompts) + ',' + format_real(r.win_rate_a) + ',' +
           format_real(r.mean_score_a) + ',' + format_real(r.mean_score_b) + ',' + std::to_string(r.seed) + '\n';
  }
  return out;
}

/// Per-prompt scores behind each row, in the same order.
inline std::string prompt_csv(const std::vector<ComparisonRow>& rows, const std::vector<WinRateResult>& results) {
  using trainer::format_real;
  require_same_size(rows.size(), results.size(), "prompt_csv");
  std::string out(kPromptHeader);
  out += '\n';
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t i = 0; i < results[r].prompts.size(); ++i) {
      const auto& p = results[r].prompts[i];
      out += rows[r].model_a + ',' + rows[r].model_b + ',' + std::to_string(i) + ',' + std::to_string(p.cond.value) +
             ',' + format_real(p.score_a) + ',' + format_real(p.score_b) + ',' + format_real(p.outcome_a) + '\n';
    }
  return out;
}

inline std::filesystem::path prompts_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".prompts.csv";
  return p;
}

/// Writes the comparison CSV, the per-prompt sidecar and a JSON note of the judge settings.
inline void export_comparison(const std::vector<ComparisonRow>& rows, const std::vector<WinRateResult>& results,
                              const OracleConfig& oracle, std::uint32_t sampler_steps,
                              const std::filesystem::path& path) {
  write_file_atomic(path, comparison_csv(rows));
  write_file_atomic(prompts_path(path), prompt_csv(rows, results));
  nlohmann::json fams = nlohmann::json::array();
  for (const auto& f : oracle.families) fams.push_back(data::to_json(f));
  const nlohmann::json j = {{"mu", oracle.mu}, {"grid_points", oracle.grid_points}, {"sampler_steps", sampler_steps},
                            {"families", fams}};
  auto mp = path;
  mp += ".manifest.json";
  write_file_atomic(mp, j.dump(2) + "\n");
}

}  // namespace realdpo::eval
