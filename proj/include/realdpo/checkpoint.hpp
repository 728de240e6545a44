// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "realdpo/core.hpp"
#include "realdpo/model.hpp"

namespace realdpo {

/// SHA-256 digest identifying the exact checkpoint a negative cache came from.
using Fingerprint = std::array<std::uint8_t, 32>;

inline Fingerprint sha256(std::string_view bytes) {
  Fingerprint out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
    throw std::runtime_error("sha256 failed");
  return out;
}

inline std::string to_hex(const Fingerprint& f) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  for (auto b : f) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 0xf]);
  }
  return s;
}

struct CheckpointMetadata {
  std::string kind = "init";  // init | pretrain | realdpo | sft
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::int64_t wall_clock_ms = 0;  // 0 unless wall-clock recording is enabled
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json arch_to_json(const ModelArch& a) {
  return {{"latent_dim", a.latent_dim},       {"num_classes", a.num_classes},
          {"cond_embed_dim", a.cond_embed_dim}, {"time_embed_dim", a.time_embed_dim},
          {"hidden_dims", a.hidden_dims},     {"activation", to_string(a.activation)}};
}

inline ModelArch arch_from_json(const nlohmann::json& j) {
  ModelArch a;
  a.latent_dim = j.at("latent_dim").get<std::uint32_t>();
  a.num_classes = j.at("num_classes").get<std::uint32_t>();
  a.cond_embed_dim = j.at("cond_embed_dim").get<std::uint32_t>();
  a.time_embed_dim = j.at("time_embed_dim").get<std::uint32_t>();
  a.hidden_dims = j.at("hidden_dims").get<std::vector<std::uint32_t>>();
  a.activation = activation_from_string(j.at("activation").get<std::string>());
  a.validate();
  return a;
}

namespace checkpoint {

inline constexpr std::string_view kMagic = "RDC1";
inline constexpr std::uint32_t kVersion = 1;

/// Layout: "RDC1" | u32 version | u32 metadata length | JSON metadata |
/// u64 parameter count | parameters as f64, all little-endian.
inline std::string serialize(const DenoiserParams& params, const CheckpointMetadata& meta) {
  nlohmann::json j = {{"arch", arch_to_json(params.arch)},
                      {"kind", meta.kind},
                      {"step", meta.step},
                      {"seed", meta.seed},
                      {"wall_clock_ms", meta.wall_clock_ms},
                      {"extra", meta.extra}};
  const std::string js = j.dump();
  std::string out(kMagic);
  bin::put_u32(out, kVersion);
  bin::put_u32(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  bin::put_u64(out, params.values.size());
  for (double v : params.values) bin::put_f64(out, v);
  return out;
}

inline std::pair<DenoiserParams, CheckpointMetadata> deserialize(std::string_view bytes) {
  bin::Reader r(bytes, "checkpoint");
  r.expect_magic(kMagic);
  if (const auto v = r.u32(); v != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  const auto meta_len = r.u32();
  const auto js = r.take(meta_len);
  nlohmann::json j;
  CheckpointMetadata meta;
  ModelArch arch;
  try {
    j = nlohmann::json::parse(js);
    arch = arch_from_json(j.at("arch"));
    meta.kind = j.at("kind").get<std::string>();
    meta.step = j.at("step").get<std::uint64_t>();
    meta.seed = j.at("seed").get<std::uint64_t>();
    meta.wall_clock_ms = j.at("wall_clock_ms").get<std::int64_t>();
    meta.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad architecture: ") + e.what());
  }
  const auto count = r.u64();
  if (count != arch.param_count())
    throw FormatError("checkpoint: parameter count " + std::to_string(count) + " does not match architecture (" +
                      std::to_string(arch.param_count()) + ")");
  if (r.remaining() != count * 8) throw FormatError("checkpoint: payload length mismatch");
  Vec values(count);
  for (auto& v : values) v = r.f64();
  if (!all_finite(values)) throw FormatError("checkpoint: non-finite parameter");
  return {DenoiserParams(arch, std::move(values)), meta};
}

inline void save(const DenoiserParams& params, const CheckpointMetadata& meta, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(params, meta));
}

inline std::pair<DenoiserParams, CheckpointMetadata> load(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

inline Fingerprint fingerprint_file(const std::filesystem::path& path) { return sha256(read_file(path)); }

}  // namespace checkpoint
}  // namespace realdpo
