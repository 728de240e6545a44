// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "realdpo/realdpo.hpp"

namespace realdpo::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

namespace fs = std::filesystem;

/// Resolved options of the chosen subcommand as a JSON object, defaults included.
/// The output is accepted back by --config.
inline nlohmann::json effective_config(const CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help" || names.front() == "config") continue;
    const std::string& key = names.front();
    if (opt->get_items_expected_max() == 0) {
      j[key] = opt->count() > 0;
      continue;
    }
    std::string value;
    if (opt->count() > 0) {
      const auto& res = opt->reduced_results();
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? ";" : "") + res[i];
    } else {
      value = opt->get_default_str();
    }
    j[key] = value;
  }
  return j;
}

/// Expands `--config file.json` into flag tokens placed ahead of the explicit
/// flags, so explicit flags win (options take the last value given).
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::vector<std::string> injected;
  std::size_t insert_at = args.empty() ? 0 : 1;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      out.push_back(args[i]);
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ValidationError("--config", std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ValidationError("--config", "config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (value.is_boolean()) {
        if (value.get<bool>()) injected.push_back("--" + key);
        continue;
      }
      injected.push_back("--" + key);
      if (value.is_string()) {
        injected.push_back(value.get<std::string>());
      } else if (value.is_array()) {
        std::string joined;
        for (std::size_t n = 0; n < value.size(); ++n)
          joined += (n ? "," : "") + (value[n].is_string() ? value[n].get<std::string>() : value[n].dump());
        injected.push_back(joined);
      } else {
        injected.push_back(value.dump());
      }
    }
  }
  out.insert(out.begin() + static_cast<std::ptrdiff_t>(std::min(insert_at, out.size())), injected.begin(),
             injected.end());
  return out;
}

inline std::vector<std::uint32_t> parse_widths(const std::string& s) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(static_cast<std::uint32_t>(std::stoul(item)));
    } catch (const std::exception&) {
      throw ConfigError("invalid layer width list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty layer width list");
  return out;
}

struct CommonOpts {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool wall_clock = false;
};

struct GenDataOpts : CommonOpts {
  std::string out;
  std::uint32_t classes = 3, per_class = 512, frames = 16, dims = 2, pretrain_per_class = 512;
  double obs_noise = data::kDefaultObsNoise;
  std::string corrupt = "default";
  data::CorruptionSpec corruption;
};

struct ArchOpts {
  std::string hidden = "96,96", activation = "silu";
  std::uint32_t cond_embed = 8, time_embed = 8;
};

struct PretrainOpts : CommonOpts, ArchOpts {
  std::string data_path, out, metrics;
  std::uint64_t steps = 3000;
  std::uint32_t batch = 16;
  double lr = 1e-3, k_min = diffusion::kDefaultKMin, k_max = diffusion::kDefaultKMax, clip_norm = 10.0;
  std::uint64_t checkpoint_every = 0;
};

struct NegativesOpts : CommonOpts {
  std::string ckpt, data_path, out;
  std::uint32_t k = sampling::kDefaultNegatives, sampler_steps = diffusion::kDefaultSamplerSteps;
};

struct AlignOpts : CommonOpts {
  std::string method = "realdpo", ckpt, data_path, negatives, out, metrics;
  std::uint64_t steps = 2000;
  std::uint32_t batch = 16;
  double lr = 1e-3, k_min = diffusion::kDefaultKMin, k_max = diffusion::kDefaultKMax, clip_norm = 10.0;
  std::string weighting = "constant", negative_selection = "round_robin";
  double beta = 5.0, T = 1.0, omega_lambda = 1.0, ema_decay = refmodel::kDefaultEmaDecay;
  std::uint64_t ref_interval = refmodel::kDefaultUpdateInterval, checkpoint_every = 0;
  bool independent_noise = false, allow_mismatch = false;
};

struct EvalOpts : CommonOpts {
  std::vector<std::string> pairs;
  std::string out, data_path;
  std::uint32_t prompts = 200, sampler_steps = diffusion::kDefaultSamplerSteps, dims = 2;
  std::uint32_t grid_points = eval::kDefaultGridPoints;
  double mu = eval::kDefaultSmoothnessWeight;
};

struct GradcheckOpts : CommonOpts {
  std::uint32_t instances = 20, frames = 4, dims = 2, classes = 2, cond_embed = 3, time_embed = 4;
  std::string hidden = "12,12", activation = "silu";
  double h = 1e-4, tol = 1e-6, beta = 5.0;
};

inline CheckpointMetadata make_meta(std::string kind, std::uint64_t step, std::uint64_t seed, bool wall_clock) {
  CheckpointMetadata m;
  m.kind = std::move(kind);
  m.step = step;
  m.seed = seed;
  if (wall_clock)
    m.wall_clock_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::system_clock::now().time_since_epoch())
                          .count();
  return m;
}

inline fs::path step_checkpoint_path(const fs::path& out, std::uint64_t step) {
  auto p = out;
  p.replace_extension();
  p += ".step" + std::to_string(step) + ".rdc";
  return p;
}

inline void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

// ---------------------------------------------------------------------------

inline int cmd_gen_data(const GenDataOpts& o, std::ostream& log) {
  data::CorpusSpec spec;
  spec.families = data::default_families(o.classes);
  spec.per_class = o.per_class;
  spec.frames = o.frames;
  spec.dims = o.dims;
  spec.obs_noise = o.obs_noise;
  spec.seed = o.seed;
  fs::create_directories(o.out);
  const auto real = data::gen_clean_corpus(spec);
  data::write_corpus(real, fs::path(o.out) / "real.rdp");
  log << "wrote " << (fs::path(o.out) / "real.rdp").string() << " (" << real.size() << " records)\n";
  if (o.corrupt == "none") return kOk;
  if (o.corrupt != "default") throw ConfigError("--corrupt must be 'default' or 'none'");
  auto pre_spec = spec;
  pre_spec.per_class = o.pretrain_per_class;
  pre_spec.seed = child_seed(o.seed, 0x70726574);  // distinct trajectories from the real corpus
  const auto pre = data::gen_corrupted_corpus(pre_spec, o.corruption);
  data::write_corpus(pre, fs::path(o.out) / "pretrain.rdp");
  log << "wrote " << (fs::path(o.out) / "pretrain.rdp").string() << " (" << pre.size() << " records, "
      << pre.manifest.events.kinks << " kinks, " << pre.manifest.events.dropped_frames << " frozen frames)\n";
  return kOk;
}

inline ModelArch arch_from(const ArchOpts& o, const data::Corpus& c) {
  ModelArch a;
  a.latent_dim = static_cast<std::uint32_t>(c.latent_dim());
  a.num_classes = c.num_classes;
  a.cond_embed_dim = o.cond_embed;
  a.time_embed_dim = o.time_embed;
  a.hidden_dims = parse_widths(o.hidden);
  a.activation = activation_from_string(o.activation);
  a.validate();
  return a;
}

inline int cmd_pretrain(const PretrainOpts& o, std::ostream& log) {
  const auto corpus = data::read_corpus(o.data_path);
  const auto arch = arch_from(o, corpus);
  trainer::PretrainConfig cfg;
  cfg.steps = o.steps;
  cfg.batch_size = o.batch;
  cfg.learning_rate = o.lr;
  cfg.k_min = o.k_min;
  cfg.k_max = o.k_max;
  cfg.clip_norm = o.clip_norm;
  cfg.seed = o.seed;
  cfg.checkpoint_every = o.checkpoint_every;
  cfg.record_wall_clock = o.wall_clock;
  log << "pretraining " << arch.param_count() << " parameters on " << corpus.size() << " records\n";
  auto hook = [&](std::uint64_t step, const DenoiserParams& p) {
    checkpoint::save(p, make_meta("pretrain", step, o.seed, o.wall_clock), step_checkpoint_path(o.out, step));
  };
  const auto res = trainer::pretrain(corpus, arch, cfg, hook);
  auto meta = make_meta("pretrain", o.steps, o.seed, o.wall_clock);
  meta.extra = {{"learning_rate", o.lr}, {"batch_size", o.batch}, {"corpus_records", corpus.size()}};
  checkpoint::save(res.params, meta, o.out);
  if (!o.metrics.empty()) write_text(o.metrics, trainer::metrics_csv(res.metrics));
  if (!res.metrics.empty()) log << "final loss " << res.metrics.back().loss << "\n";
  log << "wrote " << o.out << "\n";
  return kOk;
}

inline int cmd_sample_negatives(const NegativesOpts& o, std::ostream& log) {
  const auto [params, meta] = checkpoint::load(o.ckpt);
  const auto fp = checkpoint::fingerprint_file(o.ckpt);
  const auto corpus = data::read_corpus(o.data_path);
  diffusion::SamplerConfig sc{o.sampler_steps, o.seed};
  const auto cache = sampling::generate_negatives(params, fp, corpus, o.k, sc, o.threads);
  sampling::write_cache(cache, o.out);
  log << "wrote " << o.out << " (" << cache.num_prompts << " prompts x " << cache.per_prompt << " negatives)\n";
  return kOk;
}

inline int cmd_align(const AlignOpts& o, std::ostream& log) {
  const auto [base, base_meta] = checkpoint::load(o.ckpt);
  const auto fp = checkpoint::fingerprint_file(o.ckpt);
  const auto corpus = data::read_corpus(o.data_path);
  trainer::AlignConfig cfg;
  cfg.method = trainer::method_from_string(o.method);
  cfg.steps = o.steps;
  cfg.batch_size = o.batch;
  cfg.learning_rate = o.lr;
  cfg.weighting = {dpo::weighting_mode_from_string(o.weighting), o.beta, o.T, o.omega_lambda};
  cfg.ref_cfg = {o.ema_decay, o.ref_interval};
  cfg.k_min = o.k_min;
  cfg.k_max = o.k_max;
  cfg.seed = o.seed;
  cfg.negative_selection = trainer::negative_selection_from_string(o.negative_selection);
  cfg.independent_noise = o.independent_noise;
  cfg.clip_norm = o.clip_norm;
  cfg.checkpoint_every = o.checkpoint_every;
  cfg.allow_fingerprint_mismatch = o.allow_mismatch;
  cfg.record_wall_clock = o.wall_clock;

  std::optional<sampling::NegativeCache> cache;
  if (cfg.method == trainer::Method::realdpo) {
    if (o.negatives.empty()) throw ConfigError("align --method realdpo requires --negatives");
    cache = sampling::read_cache(o.negatives);
    if (cache->fingerprint != fp && o.allow_mismatch)
      log << "warning: negative cache fingerprint does not match --ckpt; proceeding (override)\n";
  } else if (!o.negatives.empty()) {
    log << "note: --negatives is ignored for --method sft\n";
  }
  trainer::AlignInputs in{&base, fp, &corpus, cache ? &*cache : nullptr};
  auto hook = [&](std::uint64_t step, const DenoiserParams& p) {
    checkpoint::save(p, make_meta(o.method, step, o.seed, o.wall_clock), step_checkpoint_path(o.out, step));
  };
  const auto res = trainer::align(in, cfg, hook);

  auto meta = make_meta(o.method, o.steps, o.seed, o.wall_clock);
  meta.extra = {{"base_sha256", to_hex(fp)},
                {"learning_rate", o.lr},
                {"batch_size", o.batch},
                {"ref_updates", res.ref_updates}};
  if (cfg.method == trainer::Method::realdpo)
    meta.extra.update({{"beta", o.beta},
                       {"weighting", o.weighting},
                       {"ema_decay", o.ema_decay},
                       {"ref_interval", o.ref_interval},
                       {"negative_selection", o.negative_selection}});
  checkpoint::save(res.params, meta, o.out);
  if (!o.metrics.empty()) write_text(o.metrics, trainer::metrics_csv(res.metrics));
  const auto& first = res.metrics.front();
  const auto& last = res.metrics.back();
  log << "step 0 loss " << trainer::format_real(first.loss) << ", final loss " << last.loss << ", reference updates "
      << res.ref_updates << "\n";
  log << "wrote " << o.out << "\n";
  return kOk;
}

inline int cmd_eval(const EvalOpts& o, std::ostream& log) {
  eval::OracleConfig oracle;
  oracle.mu = o.mu;
  oracle.grid_points = o.grid_points;
  if (!o.data_path.empty()) oracle.families = data::read_corpus(o.data_path).manifest.families;
  if (o.pairs.empty()) throw ConfigError("eval requires at least one --pair a.rdc,b.rdc");
  std::vector<eval::ComparisonRow> rows;
  std::vector<eval::WinRateResult> results;
  for (const auto& spec : o.pairs) {
    const auto comma = spec.find(',');
    if (comma == std::string::npos) throw ConfigError("--pair expects 'a.rdc,b.rdc', got '" + spec + "'");
    const fs::path pa = spec.substr(0, comma), pb = spec.substr(comma + 1);
    const auto [a, ma] = checkpoint::load(pa);
    const auto [b, mb] = checkpoint::load(pb);
    if (oracle.families.empty()) oracle.families = data::default_families(std::min<std::uint32_t>(a.arch.num_classes, 3));
    if (a.arch.num_classes > oracle.families.size())
      throw ShapeError("eval: checkpoint has more classes than the judge has families");
    // Latent shape: frames x dims with dims taken from the families' corpus default.
    const std::uint32_t dims = o.dims;
    if (a.arch.latent_dim % dims != 0) throw ShapeError("eval: latent_dim not divisible by --dims");
    const std::uint32_t frames = a.arch.latent_dim / dims;
    const auto prompts = eval::cycle_prompts(o.prompts, a.arch.num_classes);
    const auto r = eval::win_rate(a, b, prompts, frames, dims, {o.sampler_steps, o.seed}, o.seed, oracle, o.threads);
    rows.push_back(eval::make_row(pa.filename().string(), pb.filename().string(), r, o.seed));
    results.push_back(r);
    log << pa.filename().string() << " vs " << pb.filename().string() << ": win_rate_a=" << r.win_rate_a
        << " mean_score_a=" << r.mean_score_a << " mean_score_b=" << r.mean_score_b << "\n";
  }
  eval::export_comparison(rows, results, oracle, o.sampler_steps, o.out);
  log << "wrote " << o.out << "\n";
  return kOk;
}

/// Finite-difference check of every training loss on a small random model.
inline int cmd_gradcheck(const GradcheckOpts& o, std::ostream& log) {
  ModelArch arch;
  arch.latent_dim = o.frames * o.dims;
  arch.num_classes = o.classes;
  arch.cond_embed_dim = o.cond_embed;
  arch.time_embed_dim = o.time_embed;
  arch.hidden_dims = parse_widths(o.hidden);
  arch.activation = activation_from_string(o.activation);
  arch.validate();
  log << "gradcheck: " << arch.param_count() << " parameters, " << o.instances << " instances per loss, h=" << o.h
      << "\n";
  Rng rng(o.seed);
  double worst_all = 0.0;
  for (const std::string loss_name : {"realdpo", "sft", "pretrain"}) {
    double worst = 0.0, worst_entry = 0.0;
    for (std::uint32_t n = 0; n < o.instances; ++n) {
      // Initialization-scale weights with every parameter perturbed, so the final
      // layer is nonzero and every path carries gradient.
      DenoiserParams p = init_params(rng, arch);
      for (auto& v : p.values) v += 0.2 * rng.normal();
      std::vector<Vec> xs;
      for (int s = 0; s < 4; ++s) xs.push_back(rng.normal_vec(arch.latent_dim));
      const ConditionId cond{static_cast<std::uint32_t>(rng.below(arch.num_classes))};
      const double k = rng.uniform(0.05, 0.95);
      Vec ga, gb;
      if (loss_name == "realdpo") {
        DenoiserParams ref(arch, p.values);
        for (auto& v : ref.values) v += 0.05 * rng.normal();
        trainer::RealDpoLoss loss{&ref, {dpo::WeightingMode::constant_half_beta, o.beta, 1.0, 1.0}, {}, {}};
        loss.items.push_back({&xs[0], &xs[1], rng.normal_vec(arch.latent_dim), {}, k, cond});
        loss.items.back().eps_l = loss.items.back().eps_w;
        ga = loss_grad(p, loss).grad;
        gb = fd_grad(p, loss, o.h);
      } else if (loss_name == "sft") {
        trainer::SftLoss loss;
        loss.items.push_back({&xs[0], rng.normal_vec(arch.latent_dim), k, cond});
        loss.items.push_back({&xs[1], rng.normal_vec(arch.latent_dim), rng.uniform(0.05, 0.95), cond});
        ga = loss_grad(p, loss).grad;
        gb = fd_grad(p, loss, o.h);
      } else {
        trainer::PretrainLoss loss;
        loss.items.push_back({&xs[2], rng.normal_vec(arch.latent_dim), k, cond});
        loss.items.push_back({&xs[3], rng.normal_vec(arch.latent_dim), rng.uniform(0.05, 0.95), cond});
        ga = loss_grad(p, loss).grad;
        gb = fd_grad(p, loss, o.h);
      }
      worst = std::max(worst, relative_error(ga, gb));
      worst_entry = std::max(worst_entry, max_relative_error(ga, gb));
    }
    log << "  " << loss_name << ": max relative error " << worst << " (worst single entry " << worst_entry << ")\n";
    worst_all = std::max(worst_all, worst);
  }
  if (worst_all > o.tol) {
    log << "FAIL: max relative error " << worst_all << " exceeds " << o.tol << "\n";
    return kNumeric;
  }
  log << "OK\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Preference alignment of a rectified-flow trajectory model with real win samples", "realdpo"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenDataOpts gd;
  PretrainOpts pt;
  NegativesOpts ng;
  AlignOpts al;
  EvalOpts ev;
  GradcheckOpts gc;

  auto add_common = [](CLI::App* s, CommonOpts& c) {
    s->add_option("--seed", c.seed, "Seed for every random draw");
    s->add_option("--threads", c.threads, "Worker threads (1 = fully sequential)")->check(CLI::PositiveNumber);
    s->add_flag("--wall-clock", c.wall_clock,
                "Record wall-clock times in metrics and checkpoints (breaks byte-identical reruns)");
    s->add_option("--config", "JSON file with the same keys as the flags; flags override it")->type_name("FILE");
  };
  auto add_arch = [](CLI::App* s, ArchOpts& a) {
    s->add_option("--hidden", a.hidden, "Hidden layer widths, comma separated");
    s->add_option("--cond-embed", a.cond_embed, "Condition embedding width");
    s->add_option("--time-embed", a.time_embed, "Sinusoidal timestep feature count");
    s->add_option("--activation", a.activation, "Hidden activation (silu|tanh)");
  };
  auto add_timestep = [](CLI::App* s, double& k_min, double& k_max) {
    s->add_option("--k-min", k_min, "Lower end of the training timestep range");
    s->add_option("--k-max", k_max, "Upper end of the training timestep range");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the real (clean) corpus and the corrupted pretraining corpus");
  gen->add_option("--out", gd.out, "Output directory (real.rdp, pretrain.rdp)")->required();
  gen->add_option("--classes", gd.classes, "Number of classes / families (1-3)");
  gen->add_option("--per-class", gd.per_class, "Real records per class");
  gen->add_option("--pretrain-per-class", gd.pretrain_per_class, "Pretraining records per class");
  gen->add_option("--frames", gd.frames, "Frames per trajectory");
  gen->add_option("--dims", gd.dims, "Dimensions per frame");
  gen->add_option("--obs-noise", gd.obs_noise, "Observation noise std-dev");
  gen->add_option("--corrupt", gd.corrupt, "'default' also writes pretrain.rdp; 'none' writes only real.rdp")
      ->check(CLI::IsMember({"default", "none"}));
  gen->add_option("--jitter", gd.corruption.jitter, "Corruption: jitter std-dev");
  gen->add_option("--drop", gd.corruption.drop, "Corruption: frozen-frame rate");
  gen->add_option("--kink", gd.corruption.kink, "Corruption: velocity-kink rate");
  gen->add_option("--kink-scale", gd.corruption.kink_scale, "Corruption: velocity-kink std-dev");
  add_common(gen, gd);

  auto* pre = app.add_subcommand("pretrain", "Train the base model on the corrupted corpus");
  pre->add_option("--data", pt.data_path, "Pretraining corpus (.rdp)")->required();
  pre->add_option("--out", pt.out, "Output checkpoint (.rdc)")->required();
  pre->add_option("--metrics", pt.metrics, "Metrics CSV path");
  pre->add_option("--steps", pt.steps, "Optimizer steps");
  pre->add_option("--batch", pt.batch, "Batch size");
  pre->add_option("--lr", pt.lr, "Learning rate");
  pre->add_option("--clip-norm", pt.clip_norm, "Global gradient-norm clip");
  pre->add_option("--checkpoint-every", pt.checkpoint_every, "Write intermediate checkpoints every N steps (0 = never)");
  add_arch(pre, pt);
  add_timestep(pre, pt.k_min, pt.k_max);
  add_common(pre, pt);

  auto* neg = app.add_subcommand("sample-negatives", "Sample K negatives per real record from a frozen checkpoint");
  neg->add_option("--ckpt", ng.ckpt, "Base checkpoint (.rdc)")->required();
  neg->add_option("--data", ng.data_path, "Real corpus (.rdp)")->required();
  neg->add_option("--out", ng.out, "Output cache (.rdn)")->required();
  neg->add_option("--k", ng.k, "Negatives per prompt");
  neg->add_option("--steps", ng.sampler_steps, "Euler sampler steps");
  add_common(neg, ng);

  auto* aln = app.add_subcommand("align", "Align a base checkpoint with RealDPO or SFT");
  aln->add_option("--method", al.method, "realdpo|sft")->check(CLI::IsMember({"realdpo", "sft"}));
  aln->add_option("--ckpt", al.ckpt, "Base checkpoint (.rdc)")->required();
  aln->add_option("--data", al.data_path, "Real corpus (.rdp)")->required();
  aln->add_option("--negatives", al.negatives, "Negative cache (.rdn), realdpo only");
  aln->add_option("--out", al.out, "Output checkpoint (.rdc)")->required();
  aln->add_option("--metrics", al.metrics, "Metrics CSV path");
  aln->add_option("--steps", al.steps, "Optimizer steps");
  aln->add_option("--batch", al.batch, "Batch size");
  aln->add_option("--lr", al.lr, "Learning rate");
  aln->add_option("--beta", al.beta, "Preference temperature beta");
  aln->add_option("--weighting", al.weighting, "Margin coefficient: constant (0.5*beta) | snr (beta*T*omega)")
      ->check(CLI::IsMember({"constant", "snr"}));
  aln->add_option("--T", al.T, "Nominal step count T (snr weighting)");
  aln->add_option("--omega-lambda", al.omega_lambda, "Weighting-function value (snr weighting)");
  aln->add_option("--ema-decay", al.ema_decay, "Reference EMA decay");
  aln->add_option("--ref-interval", al.ref_interval, "Steps between reference updates");
  aln->add_option("--negative-selection", al.negative_selection, "round_robin|average_all")
      ->check(CLI::IsMember({"round_robin", "average_all"}));
  aln->add_flag("--independent-noise", al.independent_noise, "Draw separate noise for win and lose samples");
  aln->add_option("--clip-norm", al.clip_norm, "Global gradient-norm clip");
  aln->add_option("--checkpoint-every", al.checkpoint_every, "Write intermediate checkpoints every N steps (0 = never)");
  aln->add_flag("--allow-fingerprint-mismatch", al.allow_mismatch,
                "Accept a negative cache sampled from a different checkpoint");
  add_timestep(aln, al.k_min, al.k_max);
  add_common(aln, al);

  auto* evl = app.add_subcommand("eval", "Oracle-judged head-to-head win rates between checkpoints");
  evl->add_option("--pair", ev.pairs, "Comparison 'a.rdc,b.rdc' (repeatable)")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->delimiter(';');
  evl->add_option("--out", ev.out, "Comparison CSV path")->required();
  evl->add_option("--prompts", ev.prompts, "Prompts per comparison (cond = index mod classes)");
  evl->add_option("--steps", ev.sampler_steps, "Euler sampler steps");
  evl->add_option("--dims", ev.dims, "Dimensions per frame of the latent");
  evl->add_option("--mu", ev.mu, "Smoothness weight in the combined score");
  evl->add_option("--grid", ev.grid_points, "Grid points per nonlinear family parameter");
  evl->add_option("--data", ev.data_path, "Optional corpus whose manifest supplies the family ranges");
  add_common(evl, ev);

  auto* grc = app.add_subcommand("gradcheck", "Compare reverse-mode gradients with central finite differences");
  grc->add_option("--instances", gc.instances, "Random instances per loss");
  grc->add_option("--fd-step", gc.h, "Finite-difference step");
  grc->add_option("--tol", gc.tol, "Maximum allowed relative error");
  grc->add_option("--frames", gc.frames, "Frames of the toy latent");
  grc->add_option("--dims", gc.dims, "Dims of the toy latent");
  grc->add_option("--classes", gc.classes, "Classes of the toy model");
  grc->add_option("--hidden", gc.hidden, "Hidden widths");
  grc->add_option("--cond-embed", gc.cond_embed, "Condition embedding width");
  grc->add_option("--time-embed", gc.time_embed, "Timestep feature count");
  grc->add_option("--activation", gc.activation, "Hidden activation (silu|tanh)");
  grc->add_option("--beta", gc.beta, "Beta of the preference loss");
  add_common(grc, gc);

  try {
    auto argv = expand_config(args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  out << "effective config (" << sub->get_name() << "): " << effective_config(*sub).dump() << "\n";
  try {
    if (sub == gen) return cmd_gen_data(gd, out);
    if (sub == pre) return cmd_pretrain(pt, out);
    if (sub == neg) return cmd_sample_negatives(ng, out);
    if (sub == aln) return cmd_align(al, out);
    if (sub == evl) return cmd_eval(ev, out);
    if (sub == grc) return cmd_gradcheck(gc, out);
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    // Format, pairing, shape and I/O problems with input files.
    err << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace realdpo::cli
