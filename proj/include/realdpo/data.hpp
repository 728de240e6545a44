// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "realdpo/core.hpp"

/// Synthetic trajectory corpora standing in for curated real clips (win data)
/// and a flawed pretraining set.
///
/// Every class is an analytic family evaluated on frame times t_f = f / (F - 1):
///   sinusoid       x = A sin(2 pi f t + phi)
///   line           x = p + v t
///   damped_bounce  x = A exp(-gamma t) cos(2 pi f t)
/// Parameters are drawn independently per latent dimension.
namespace realdpo::data {

inline constexpr std::uint32_t kGeneratorVersion = 1;
inline constexpr double kDefaultObsNoise = 0.01;

enum class FamilyKind { sinusoid, line, damped_bounce };

inline std::string to_string(FamilyKind k) {
  switch (k) {
    case FamilyKind::sinusoid: return "sinusoid";
    case FamilyKind::line: return "line";
    case FamilyKind::damped_bounce: return "damped_bounce";
  }
  return "?";
}

inline FamilyKind family_kind_from_string(const std::string& s) {
  if (s == "sinusoid") return FamilyKind::sinusoid;
  if (s == "line") return FamilyKind::line;
  if (s == "damped_bounce") return FamilyKind::damped_bounce;
  throw ConfigError("unknown family '" + s + "'");
}

struct ParamRange {
  std::string name;
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const ParamRange&, const ParamRange&) = default;
};

/// One trajectory family with the ranges its per-dimension parameters are drawn from.
struct FamilySpec {
  FamilyKind kind = FamilyKind::sinusoid;
  std::vector<ParamRange> params;

  friend bool operator==(const FamilySpec&, const FamilySpec&) = default;

  const ParamRange& range(std::string_view name) const {
    for (const auto& p : params)
      if (p.name == name) return p;
    throw ConfigError("family " + to_string(kind) + " has no parameter '" + std::string(name) + "'");
  }

  void validate() const {
    const std::vector<std::string> expected = [&]() -> std::vector<std::string> {
      switch (kind) {
        case FamilyKind::sinusoid: return {"amplitude", "frequency", "phase"};
        case FamilyKind::line: return {"offset", "velocity"};
        case FamilyKind::damped_bounce: return {"amplitude", "damping", "frequency"};
      }
      return {};
    }();
    if (params.size() != expected.size()) throw ConfigError("family " + to_string(kind) + ": wrong parameter count");
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (params[i].name != expected[i])
        throw ConfigError("family " + to_string(kind) + ": expected parameter '" + expected[i] + "'");
      if (!(params[i].lo <= params[i].hi) || !std::isfinite(params[i].lo) || !std::isfinite(params[i].hi))
        throw ConfigError("family " + to_string(kind) + ": invalid range for " + expected[i]);
    }
  }
};

inline FamilySpec default_family(FamilyKind kind) {
  switch (kind) {
    case FamilyKind::sinusoid:
      return {kind, {{"amplitude", 0.5, 1.0}, {"frequency", 0.5, 1.5}, {"phase", 0.0, 2.0 * std::numbers::pi}}};
    case FamilyKind::line:
      return {kind, {{"offset", -1.0, 1.0}, {"velocity", -1.0, 1.0}}};
    case FamilyKind::damped_bounce:
      return {kind, {{"amplitude", 0.5, 1.0}, {"damping", 1.0, 3.0}, {"frequency", 1.0, 2.0}}};
  }
  throw ConfigError("unknown family");
}

/// Class c uses family c; at most three classes exist.
inline std::vector<FamilySpec> default_families(std::uint32_t classes) {
  if (classes < 1 || classes > 3) throw ConfigError("classes must be in [1, 3] (one per analytic family)");
  std::vector<FamilySpec> out;
  for (std::uint32_t c = 0; c < classes; ++c) out.push_back(default_family(static_cast<FamilyKind>(c)));
  return out;
}

inline double frame_time(std::uint32_t frame, std::uint32_t frames) {
  return static_cast<double>(frame) / static_cast<double>(frames - 1);
}

/// Noiseless family value at time t for one dimension's parameters (in spec order).
inline double family_value(FamilyKind kind, std::span<const double> p, double t) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (kind) {
    case FamilyKind::sinusoid: return p[0] * std::sin(two_pi * p[1] * t + p[2]);
    case FamilyKind::line: return p[0] + p[1] * t;
    case FamilyKind::damped_bounce: return p[0] * std::exp(-p[1] * t) * std::cos(two_pi * p[2] * t);
  }
  return 0.0;
}

/// Flattened trajectory, frame-major: values[f * dims + d].
struct LatentSample {
  std::uint32_t frames = 0;
  std::uint32_t dims = 0;
  Vec values;

  LatentSample() = default;
  LatentSample(std::uint32_t f, std::uint32_t d, Vec v) : frames(f), dims(d), values(std::move(v)) {
    require_same_size(values.size(), std::size_t{f} * d, "LatentSample");
  }

  double at(std::uint32_t f, std::uint32_t d) const { return values[std::size_t{f} * dims + d]; }
  std::size_t size() const { return values.size(); }
  friend bool operator==(const LatentSample&, const LatentSample&) = default;
};

struct TrajectoryRecord {
  ConditionId cond;
  LatentSample sample;
  friend bool operator==(const TrajectoryRecord&, const TrajectoryRecord&) = default;
};

struct CorruptionSpec {
  double jitter = 0.15;     // std-dev of additive per-element noise
  double drop = 0.1;        // per-frame probability of freezing to the previous frame
  double kink = 0.1;        // per-frame probability of a velocity change
  double kink_scale = 1.0;  // std-dev of a velocity change, units per unit time

  static CorruptionSpec none() { return {0.0, 0.0, 0.0, 1.0}; }

  void validate() const {
    if (!(jitter >= 0.0) || !std::isfinite(jitter)) throw ConfigError("corruption: jitter must be >= 0");
    if (!(drop >= 0.0 && drop <= 1.0)) throw ConfigError("corruption: drop rate must lie in [0, 1]");
    if (!(kink >= 0.0 && kink <= 1.0)) throw ConfigError("corruption: kink rate must lie in [0, 1]");
    if (!(kink_scale >= 0.0) || !std::isfinite(kink_scale)) throw ConfigError("corruption: kink_scale must be >= 0");
  }
};

struct CorruptionEvents {
  std::uint64_t kinks = 0;
  std::uint64_t dropped_frames = 0;
  std::uint64_t jittered_records = 0;
};

struct CorpusSpec {
  std::vector<FamilySpec> families = default_families(3);
  std::uint32_t per_class = 512;
  std::uint32_t frames = 16;
  std::uint32_t dims = 2;
  double obs_noise = kDefaultObsNoise;
  std::uint64_t seed = 0;

  void validate() const {
    if (families.empty()) throw ConfigError("corpus: no families");
    for (const auto& f : families) f.validate();
    if (per_class < 1) throw ConfigError("corpus: per_class must be >= 1");
    if (frames < 2) throw ConfigError("corpus: frames must be >= 2");
    if (dims < 1) throw ConfigError("corpus: dims must be >= 1");
    if (!(obs_noise >= 0.0) || !std::isfinite(obs_noise)) throw ConfigError("corpus: obs_noise must be >= 0");
  }

  std::uint32_t num_classes() const { return static_cast<std::uint32_t>(families.size()); }
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  std::uint32_t generator_version = kGeneratorVersion;
  std::uint32_t frames = 0;
  std::uint32_t dims = 0;
  std::uint32_t per_class = 0;
  double obs_noise = 0.0;
  std::vector<FamilySpec> families;
  std::optional<CorruptionSpec> corruption;
  CorruptionEvents events;
  std::uint64_t record_count = 0;
};

struct Corpus {
  std::uint32_t frames = 0;
  std::uint32_t dims = 0;
  std::uint32_t num_classes = 0;
  std::vector<TrajectoryRecord> records;
  CorpusManifest manifest;

  std::size_t latent_dim() const { return std::size_t{frames} * dims; }
  std::size_t size() const { return records.size(); }
};

namespace detail {

/// Per-dimension parameters, spec order, for record `index`.
inline std::vector<Vec> draw_params(const FamilySpec& fam, std::uint32_t dims, Rng& rng) {
  std::vector<Vec> out(dims);
  for (auto& p : out)
    for (const auto& r : fam.params) p.push_back(rng.uniform(r.lo, r.hi));
  return out;
}

inline LatentSample render(const FamilySpec& fam, const std::vector<Vec>& params, std::uint32_t frames,
                           std::uint32_t dims) {
  Vec v(std::size_t{frames} * dims);
  for (std::uint32_t f = 0; f < frames; ++f)
    for (std::uint32_t d = 0; d < dims; ++d)
      v[std::size_t{f} * dims + d] = family_value(fam.kind, params[d], frame_time(f, frames));
  return LatentSample(frames, dims, std::move(v));
}

constexpr std::uint64_t kParamStream = 0;
constexpr std::uint64_t kNoiseStream = 1;
constexpr std::uint64_t kCorruptStream = 2;

inline void corrupt(LatentSample& s, const CorruptionSpec& c, Rng& rng, CorruptionEvents& ev) {
  const std::uint32_t F = s.frames, D = s.dims;
  const double dt = 1.0 / static_cast<double>(F - 1);
  // Velocity kinks: from a kink frame onward the trajectory bends.
  if (c.kink > 0.0) {
    for (std::uint32_t f = 1; f < F; ++f) {
      if (rng.uniform() >= c.kink) continue;
      ++ev.kinks;
      for (std::uint32_t d = 0; d < D; ++d) {
        const double dv = c.kink_scale * rng.normal();
        for (std::uint32_t g = f; g < F; ++g) s.values[std::size_t{g} * D + d] += dv * (g - f + 1) * dt;
      }
    }
  }
  if (c.jitter > 0.0) {
    ++ev.jittered_records;
    for (auto& x : s.values) x += c.jitter * rng.normal();
  }
  // Frozen frames copy the previous (possibly frozen) frame.
  if (c.drop > 0.0) {
    for (std::uint32_t f = 1; f < F; ++f) {
      if (rng.uniform() >= c.drop) continue;
      ++ev.dropped_frames;
      for (std::uint32_t d = 0; d < D; ++d)
        s.values[std::size_t{f} * D + d] = s.values[std::size_t{f - 1} * D + d];
    }
  }
}

inline Corpus generate(const CorpusSpec& spec, const std::optional<CorruptionSpec>& corruption) {
  spec.validate();
  if (corruption) corruption->validate();
  Corpus c;
  c.frames = spec.frames;
  c.dims = spec.dims;
  c.num_classes = spec.num_classes();
  auto& m = c.manifest;
  m.seed = spec.seed;
  m.frames = spec.frames;
  m.dims = spec.dims;
  m.per_class = spec.per_class;
  m.obs_noise = spec.obs_noise;
  m.families = spec.families;
  m.corruption = corruption;

  // Record index = class * per_class + i; each record has its own streams.
  for (std::uint32_t cls = 0; cls < c.num_classes; ++cls) {
    const auto& fam = spec.families[cls];
    for (std::uint32_t i = 0; i < spec.per_class; ++i) {
      const std::uint64_t index = std::uint64_t{cls} * spec.per_class + i;
      Rng prng(child_seed(spec.seed, index, kParamStream));
      LatentSample s = render(fam, draw_params(fam, spec.dims, prng), spec.frames, spec.dims);
      if (spec.obs_noise > 0.0) {
        Rng nrng(child_seed(spec.seed, index, kNoiseStream));
        for (auto& x : s.values) x += spec.obs_noise * nrng.normal();
      }
      if (corruption) {
        Rng crng(child_seed(spec.seed, index, kCorruptStream));
        corrupt(s, *corruption, crng, m.events);
      }
      round_to_f32(s.values);
      if (!all_finite(s.values)) throw NumericError("corpus generation produced a non-finite value");
      c.records.push_back({ConditionId{cls}, std::move(s)});
    }
  }
  m.record_count = c.records.size();
  return c;
}

}  // namespace detail

inline Corpus gen_clean_corpus(const CorpusSpec& spec) { return detail::generate(spec, std::nullopt); }

inline Corpus gen_corrupted_corpus(const CorpusSpec& spec, const CorruptionSpec& corruption) {
  return detail::generate(spec, corruption);
}

/// Per-dimension generating parameters of record `index`, for oracle tests.
inline std::vector<Vec> generating_params(const CorpusSpec& spec, std::uint64_t index) {
  const auto cls = static_cast<std::uint32_t>(index / spec.per_class);
  Rng prng(child_seed(spec.seed, index, detail::kParamStream));
  return detail::draw_params(spec.families.at(cls), spec.dims, prng);
}

// ---------------------------------------------------------------------------
// Manifest JSON

inline nlohmann::json to_json(const FamilySpec& f) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : f.params) params.push_back({{"name", p.name}, {"lo", p.lo}, {"hi", p.hi}});
  return {{"family", to_string(f.kind)}, {"params", params}};
}

inline FamilySpec family_from_json(const nlohmann::json& j) {
  FamilySpec f;
  f.kind = family_kind_from_string(j.at("family").get<std::string>());
  for (const auto& p : j.at("params"))
    f.params.push_back({p.at("name").get<std::string>(), p.at("lo").get<double>(), p.at("hi").get<double>()});
  f.validate();
  return f;
}

inline nlohmann::json to_json(const CorpusManifest& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < m.families.size(); ++c) {
    auto e = to_json(m.families[c]);
    e["cond_id"] = c;
    classes.push_back(e);
  }
  nlohmann::json j = {{"format", "RDP1"},
                      {"generator_version", m.generator_version},
                      {"seed", m.seed},
                      {"frames", m.frames},
                      {"dims", m.dims},
                      {"per_class", m.per_class},
                      {"obs_noise", m.obs_noise},
                      {"classes", classes},
                      {"record_count", m.record_count}};
  if (m.corruption) {
    j["corruption"] = {{"jitter", m.corruption->jitter},
                       {"drop", m.corruption->drop},
                       {"kink", m.corruption->kink},
                       {"kink_scale", m.corruption->kink_scale},
                       {"events",
                        {{"kinks", m.events.kinks},
                         {"dropped_frames", m.events.dropped_frames},
                         {"jittered_records", m.events.jittered_records}}}};
  } else {
    j["corruption"] = nullptr;
  }
  return j;
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j) {
  CorpusManifest m;
  m.generator_version = j.at("generator_version").get<std::uint32_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.frames = j.at("frames").get<std::uint32_t>();
  m.dims = j.at("dims").get<std::uint32_t>();
  m.per_class = j.at("per_class").get<std::uint32_t>();
  m.obs_noise = j.at("obs_noise").get<double>();
  for (const auto& c : j.at("classes")) m.families.push_back(family_from_json(c));
  m.record_count = j.at("record_count").get<std::uint64_t>();
  if (const auto& c = j.at("corruption"); !c.is_null()) {
    m.corruption = CorruptionSpec{c.at("jitter").get<double>(), c.at("drop").get<double>(),
                                  c.at("kink").get<double>(), c.at("kink_scale").get<double>()};
    const auto& e = c.at("events");
    m.events = {e.at("kinks").get<std::uint64_t>(), e.at("dropped_frames").get<std::uint64_t>(),
                e.at("jittered_records").get<std::uint64_t>()};
  }
  return m;
}

// ---------------------------------------------------------------------------
// Corpus file: "RDP1" | u32 version | u32 N | u32 F | u32 D | u32 C |
// N x (u32 cond_id, F*D f32), little-endian. Manifest sidecar at path + ".manifest.json".

inline constexpr std::string_view kCorpusMagic = "RDP1";
inline constexpr std::uint32_t kCorpusVersion = 1;

inline std::filesystem::path manifest_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".manifest.json";
  return p;
}

inline std::string serialize_corpus(const Corpus& c) {
  std::string out(kCorpusMagic);
  bin::put_u32(out, kCorpusVersion);
  bin::put_u32(out, static_cast<std::uint32_t>(c.records.size()));
  bin::put_u32(out, c.frames);
  bin::put_u32(out, c.dims);
  bin::put_u32(out, c.num_classes);
  for (const auto& r : c.records) {
    require_same_size(r.sample.size(), c.latent_dim(), "write_corpus: record");
    bin::put_u32(out, r.cond.value);
    for (double v : r.sample.values) bin::put_f32(out, v);
  }
  return out;
}

inline Corpus deserialize_corpus(std::string_view bytes) {
  bin::Reader r(bytes, "corpus");
  r.expect_magic(kCorpusMagic);
  if (const auto v = r.u32(); v != kCorpusVersion) throw FormatError("corpus: unsupported version " + std::to_string(v));
  Corpus c;
  const auto n = r.u32();
  c.frames = r.u32();
  c.dims = r.u32();
  c.num_classes = r.u32();
  if (c.frames < 1 || c.dims < 1 || c.num_classes < 1) throw FormatError("corpus: zero dimension in header");
  const std::uint64_t rec_bytes = 4 + 4 * std::uint64_t{c.frames} * c.dims;
  if (r.remaining() != n * rec_bytes)
    throw FormatError("corpus: header declares " + std::to_string(n) + " records but payload holds " +
                      std::to_string(r.remaining() / rec_bytes) + " (" + std::to_string(r.remaining()) + " bytes)");
  c.records.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    TrajectoryRecord rec;
    rec.cond = ConditionId{r.u32()};
    if (rec.cond.value >= c.num_classes) throw FormatError("corpus: cond_id out of range in record " + std::to_string(i));
    Vec v(c.latent_dim());
    for (auto& x : v) x = r.f32();
    rec.sample = LatentSample(c.frames, c.dims, std::move(v));
    c.records.push_back(std::move(rec));
  }
  return c;
}

inline void write_corpus(const Corpus& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_corpus(c));
  auto m = c.manifest;
  m.record_count = c.records.size();
  write_file_atomic(manifest_path(path), to_json(m).dump(2) + "\n");
}

/// Reads the binary corpus and, when present, its manifest sidecar.
inline Corpus read_corpus(const std::filesystem::path& path) {
  Corpus c = deserialize_corpus(read_file(path));
  const auto mp = manifest_path(path);
  if (std::filesystem::exists(mp)) {
    try {
      c.manifest = manifest_from_json(nlohmann::json::parse(read_file(mp)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("corpus manifest: ") + e.what());
    } catch (const ConfigError& e) {
      throw FormatError(std::string("corpus manifest: ") + e.what());
    }
    if (c.manifest.record_count != c.records.size()) throw FormatError("corpus manifest: record count disagrees with payload");
    if (c.manifest.frames != c.frames || c.manifest.dims != c.dims) throw FormatError("corpus manifest: shape disagrees with payload");
  } else {
    c.manifest.frames = c.frames;
    c.manifest.dims = c.dims;
    c.manifest.record_count = c.records.size();
  }
  return c;
}

}  // namespace realdpo::data
