// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "realdpo/checkpoint.hpp"
#include "realdpo/core.hpp"
#include "realdpo/data.hpp"
#include "realdpo/diffusion.hpp"
#include "realdpo/model.hpp"

namespace realdpo::sampling {

inline constexpr std::uint32_t kDefaultNegatives = 3;

/// Offline store of model generations, K per prompt. Prompt i is corpus record i.
struct NegativeCache {
  std::uint32_t frames = 0;
  std::uint32_t dims = 0;
  std::uint32_t num_prompts = 0;
  std::uint32_t per_prompt = 0;
  Fingerprint fingerprint{};
  std::uint64_t seed = 0;
  diffusion::SamplerConfig sampler;
  std::vector<data::LatentSample> entries;  // entries[prompt * per_prompt + j]

  const data::LatentSample& at(std::uint32_t prompt, std::uint32_t j) const {
    return entries.at(std::size_t{prompt} * per_prompt + j);
  }
};

/// Runs the full sampler from K independent init noises per corpus record,
/// conditioned on the record's class. Parameters are only read.
inline NegativeCache generate_negatives(const DenoiserParams& params, const Fingerprint& fingerprint,
                                        const data::Corpus& corpus, std::uint32_t per_prompt,
                                        const diffusion::SamplerConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  if (per_prompt < 1) throw ConfigError("generate_negatives: K must be >= 1");
  if (params.arch.latent_dim != corpus.latent_dim())
    throw ShapeError("generate_negatives: model latent_dim " + std::to_string(params.arch.latent_dim) +
                     " does not match corpus " + std::to_string(corpus.latent_dim()));
  NegativeCache cache;
  cache.frames = corpus.frames;
  cache.dims = corpus.dims;
  cache.num_prompts = static_cast<std::uint32_t>(corpus.size());
  cache.per_prompt = per_prompt;
  cache.fingerprint = fingerprint;
  cache.seed = cfg.seed;
  cache.sampler = cfg;
  cache.entries.resize(std::size_t{cache.num_prompts} * per_prompt);
  parallel_for(cache.entries.size(), threads, [&](std::size_t e) {
    const auto prompt = e / per_prompt, j = e % per_prompt;
    Rng rng(child_seed(cfg.seed, prompt, j));
    const Vec eps = rng.normal_vec(corpus.latent_dim());
    Vec x = diffusion::sample(params, corpus.records[prompt].cond, eps, cfg);
    round_to_f32(x);
    if (!all_finite(x)) throw NumericError("generate_negatives: non-finite sample for prompt " + std::to_string(prompt));
    cache.entries[e] = data::LatentSample(corpus.frames, corpus.dims, std::move(x));
  });
  return cache;
}

// ---------------------------------------------------------------------------
// Cache file: "RDN1" | u32 version | u32 N | u32 K | u32 F | u32 D |
// 32-byte fingerprint | u64 seed | N*K x (u32 prompt, u32 j, F*D f32), little-endian.

inline constexpr std::string_view kCacheMagic = "RDN1";
inline constexpr std::uint32_t kCacheVersion = 1;

inline std::string serialize_cache(const NegativeCache& c) {
  std::string out(kCacheMagic);
  bin::put_u32(out, kCacheVersion);
  bin::put_u32(out, c.num_prompts);
  bin::put_u32(out, c.per_prompt);
  bin::put_u32(out, c.frames);
  bin::put_u32(out, c.dims);
  out.append(reinterpret_cast<const char*>(c.fingerprint.data()), c.fingerprint.size());
  bin::put_u64(out, c.seed);
  for (std::uint32_t i = 0; i < c.num_prompts; ++i) {
    for (std::uint32_t j = 0; j < c.per_prompt; ++j) {
      bin::put_u32(out, i);
      bin::put_u32(out, j);
      for (double v : c.at(i, j).values) bin::put_f32(out, v);
    }
  }
  return out;
}

inline NegativeCache deserialize_cache(std::string_view bytes) {
  bin::Reader r(bytes, "negative cache");
  r.expect_magic(kCacheMagic);
  if (const auto v = r.u32(); v != kCacheVersion) throw FormatError("negative cache: unsupported version " + std::to_string(v));
  NegativeCache c;
  c.num_prompts = r.u32();
  c.per_prompt = r.u32();
  c.frames = r.u32();
  c.dims = r.u32();
  if (c.per_prompt < 1 || c.frames < 1 || c.dims < 1) throw FormatError("negative cache: zero dimension in header");
  const auto fp = r.take(32);
  std::copy(fp.begin(), fp.end(), reinterpret_cast<char*>(c.fingerprint.data()));
  c.seed = r.u64();
  const std::uint64_t dim = std::uint64_t{c.frames} * c.dims;
  const std::uint64_t n = std::uint64_t{c.num_prompts} * c.per_prompt;
  if (r.remaining() != n * (8 + 4 * dim)) throw FormatError("negative cache: payload length does not match header");
  c.entries.resize(n);
  for (std::uint64_t e = 0; e < n; ++e) {
    const auto prompt = r.u32(), j = r.u32();
    if (prompt >= c.num_prompts || j >= c.per_prompt) throw FormatError("negative cache: entry index out of range");
    const std::size_t slot = std::size_t{prompt} * c.per_prompt + j;
    if (!c.entries[slot].values.empty()) throw FormatError("negative cache: duplicate entry for prompt " + std::to_string(prompt));
    Vec v(dim);
    for (auto& x : v) x = r.f32();
    c.entries[slot] = data::LatentSample(c.frames, c.dims, std::move(v));
  }
  return c;
}

inline std::filesystem::path cache_manifest_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".manifest.json";
  return p;
}

inline void write_cache(const NegativeCache& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_cache(c));
  const nlohmann::json j = {{"format", "RDN1"},
                            {"prompts", c.num_prompts},
                            {"negatives_per_prompt", c.per_prompt},
                            {"frames", c.frames},
                            {"dims", c.dims},
                            {"seed", c.seed},
                            {"sampler_steps", c.sampler.num_steps},
                            {"checkpoint_sha256", to_hex(c.fingerprint)}};
  write_file_atomic(cache_manifest_path(path), j.dump(2) + "\n");
}

inline NegativeCache read_cache(const std::filesystem::path& path) {
  NegativeCache c = deserialize_cache(read_file(path));
  c.sampler.seed = c.seed;
  if (const auto mp = cache_manifest_path(path); std::filesystem::exists(mp)) {
    try {
      c.sampler.num_steps = nlohmann::json::parse(read_file(mp)).at("sampler_steps").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("negative cache manifest: ") + e.what());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Preference pairs

/// A real win sample and K cached lose samples for the same prompt.
struct PreferencePair {
  ConditionId cond;
  std::uint32_t prompt_index = 0;  // corpus record index of the win sample
  const data::LatentSample* win = nullptr;
  std::vector<const data::LatentSample*> loses;
};

/// Where the win sample of each pair comes from. Pairs built here always
/// point into the real corpus, never into the cache.
enum class Provenance { real_corpus, negative_cache };

inline Provenance provenance_of(const data::LatentSample* s, const data::Corpus& corpus, const NegativeCache& cache) {
  for (const auto& e : cache.entries)
    if (&e == s) return Provenance::negative_cache;
  for (const auto& r : corpus.records)
    if (&r.sample == s) return Provenance::real_corpus;
  throw PairingError("sample belongs to neither the corpus nor the cache");
}

/// Pair i = (real record i, cache entries for prompt i). The returned pairs
/// reference `corpus` and `cache`, which must outlive them.
inline std::vector<PreferencePair> assemble_pairs(const data::Corpus& corpus, const NegativeCache& cache) {
  if (cache.frames != corpus.frames || cache.dims != corpus.dims)
    throw PairingError("negative cache shape does not match corpus");
  std::vector<PreferencePair> pairs;
  pairs.reserve(corpus.size());
  for (std::uint32_t i = 0; i < corpus.size(); ++i) {
    if (i >= cache.num_prompts) throw PairingError("negative cache has no entries for prompt " + std::to_string(i));
    PreferencePair p;
    p.cond = corpus.records[i].cond;
    p.prompt_index = i;
    p.win = &corpus.records[i].sample;
    for (std::uint32_t j = 0; j < cache.per_prompt; ++j) {
      const auto& e = cache.entries.at(std::size_t{i} * cache.per_prompt + j);
      if (e.values.empty()) throw PairingError("negative cache is missing entry " + std::to_string(j) + " for prompt " + std::to_string(i));
      p.loses.push_back(&e);
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Win/lose noising and one-step reconstruction

struct PredictionQuad {
  Vec x0_w, x0_l;
  Vec xhat0_w, xhat0_l;      // trainer
  Vec xtilde0_w, xtilde0_l;  // reference
  Vec eps_w, eps_l;
  double k = 0.5;
  ConditionId cond;
};

struct QuadOptions {
  double k_min = diffusion::kDefaultKMin;
  double k_max = diffusion::kDefaultKMax;
  bool independent_noise = false;
};

/// Noises both samples at timestep k and reconstructs each with both models.
/// Exactly four model evaluations: trainer and reference on win and lose.
template <class TrainerFn, class ReferenceFn>
PredictionQuad build_quad(TrainerFn&& trainer, ReferenceFn&& reference, std::span<const double> x0_w,
                          std::span<const double> x0_l, ConditionId cond, double k, Vec eps_w, Vec eps_l) {
  require_same_size(x0_w.size(), x0_l.size(), "build_quad: win/lose");
  PredictionQuad q;
  q.x0_w.assign(x0_w.begin(), x0_w.end());
  q.x0_l.assign(x0_l.begin(), x0_l.end());
  q.k = k;
  q.cond = cond;
  q.eps_w = std::move(eps_w);
  q.eps_l = std::move(eps_l);
  const Vec xk_w = diffusion::interpolate(q.x0_w, q.eps_w, k);
  const Vec xk_l = diffusion::interpolate(q.x0_l, q.eps_l, k);
  q.xhat0_w = diffusion::predict_x0(xk_w, trainer(xk_w, k, cond), k);
  q.xhat0_l = diffusion::predict_x0(xk_l, trainer(xk_l, k, cond), k);
  q.xtilde0_w = diffusion::predict_x0(xk_w, reference(xk_w, k, cond), k);
  q.xtilde0_l = diffusion::predict_x0(xk_l, reference(xk_l, k, cond), k);
  return q;
}

/// Draws k and the noise (one shared draw unless independent_noise), then build_quad.
inline void draw_quad_noise(Rng& rng, std::size_t dim, const QuadOptions& opt, double& k, Vec& eps_w, Vec& eps_l) {
  k = diffusion::select_timestep(rng, opt.k_min, opt.k_max).value();
  eps_w = rng.normal_vec(dim);
  eps_l = opt.independent_noise ? rng.normal_vec(dim) : eps_w;
}

inline PredictionQuad make_quad(const DenoiserParams& trainer, const DenoiserParams& reference,
                                const PreferencePair& pair, std::uint32_t lose_index, Rng& rng,
                                const QuadOptions& opt = {}) {
  require_same_arch(trainer, reference, "make_quad");
  if (lose_index >= pair.loses.size()) throw ConfigError("make_quad: lose index out of range");
  double k = 0.0;
  Vec eps_w, eps_l;
  draw_quad_noise(rng, pair.win->size(), opt, k, eps_w, eps_l);
  auto fwd = [](const DenoiserParams& p) {
    return [&p](std::span<const double> x, double kk, ConditionId c) { return forward(p, x, kk, c); };
  };
  return build_quad(fwd(trainer), fwd(reference), pair.win->values, pair.loses[lose_index]->values, pair.cond, k,
                    std::move(eps_w), std::move(eps_l));
}

}  // namespace realdpo::sampling
