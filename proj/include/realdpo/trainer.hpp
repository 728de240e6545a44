// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "realdpo/checkpoint.hpp"
#include "realdpo/core.hpp"
#include "realdpo/data.hpp"
#include "realdpo/diffusion.hpp"
#include "realdpo/dpo.hpp"
#include "realdpo/model.hpp"
#include "realdpo/refmodel.hpp"
#include "realdpo/sampling.hpp"

namespace realdpo::trainer {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  Vec m, v;
  std::uint64_t step = 0;
  AdamHyper hyper;

  static OptimizerState zeros(std::size_t n) { return {Vec(n, 0.0), Vec(n, 0.0), 0, {}}; }
};

/// Bias-corrected adaptive-moment update, in place.
inline void adam_step(Vec& params, std::span<const double> grads, OptimizerState& st, double lr) {
  require_same_size(params.size(), grads.size(), "adam_step: grads");
  require_same_size(params.size(), st.m.size(), "adam_step: first moment");
  require_same_size(params.size(), st.v.size(), "adam_step: second moment");
  if (!all_finite(grads)) throw NumericError("adam_step: non-finite gradient");
  const auto& h = st.hyper;
  ++st.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * grads[i];
    st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

inline double l2_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// Rescales g to norm `max_norm` if it is longer. Returns whether it did.
inline bool clip_global_norm(Vec& g, double max_norm, double norm) {
  if (!(max_norm > 0.0) || norm <= max_norm) return false;
  const double s = max_norm / norm;
  for (auto& x : g) x *= s;
  return true;
}

// ---------------------------------------------------------------------------
// Loss functionals. Each is callable as double(GradTape&) so the same object
// drives loss_grad (exact gradient) and fd_grad (finite-difference oracle).

struct NoisedItem {
  const Vec* x0 = nullptr;
  Vec eps;
  double k = 0.5;
  ConditionId cond;
};

/// Mean squared velocity error, averaged over items and elements.
struct PretrainLoss {
  std::vector<NoisedItem> items;

  double operator()(GradTape& tape) const {
    const double inv_b = 1.0 / static_cast<double>(items.size());
    double total = 0.0;
    for (const auto& it : items) {
      const Vec target = diffusion::velocity_target(*it.x0, it.eps);
      const Vec xk = diffusion::interpolate(*it.x0, it.eps, it.k);
      const auto h = tape.forward(xk, it.k, it.cond);
      const Vec& vhat = tape.output(h);
      const double inv_n = 1.0 / static_cast<double>(vhat.size());
      double se = 0.0;
      Vec adj(vhat.size());
      for (std::size_t i = 0; i < vhat.size(); ++i) {
        const double d = vhat[i] - target[i];
        se += d * d;
        adj[i] = 2.0 * d * inv_n * inv_b;
      }
      total += se * inv_n;
      tape.backward(h, adj);
    }
    return total * inv_b;
  }
};

/// Mean squared x0-reconstruction error on real samples.
struct SftLoss {
  std::vector<NoisedItem> items;

  double operator()(GradTape& tape) const {
    const double inv_b = 1.0 / static_cast<double>(items.size());
    double total = 0.0;
    for (const auto& it : items) {
      const Vec xk = diffusion::interpolate(*it.x0, it.eps, it.k);
      const auto h = tape.forward(xk, it.k, it.cond);
      const Vec xhat = diffusion::predict_x0(xk, tape.output(h), it.k);
      total += dpo::sft_loss(*it.x0, xhat);
      tape.backward(h, diffusion::predict_x0_vjp(dpo::sft_adjoint(*it.x0, xhat, inv_b), it.k));
    }
    return total * inv_b;
  }
};

struct PairItem {
  const Vec* x0_w = nullptr;
  const Vec* x0_l = nullptr;
  Vec eps_w, eps_l;
  double k = 0.5;
  ConditionId cond;
};

/// Latent-space preference loss against a fixed reference, averaged over items.
struct RealDpoLoss {
  const DenoiserParams* reference = nullptr;
  dpo::LossWeighting weighting;
  std::vector<PairItem> items;
  mutable std::vector<dpo::LossBreakdown> last;

  double operator()(GradTape& tape) const {
    const double inv_b = 1.0 / static_cast<double>(items.size());
    last.clear();
    double total = 0.0;
    for (const auto& it : items) {
      std::vector<GradTape::Handle> handles;
      auto trainer = [&](std::span<const double> x, double k, ConditionId c) {
        handles.push_back(tape.forward(x, k, c));
        return tape.output(handles.back());
      };
      auto ref = [&](std::span<const double> x, double k, ConditionId c) { return forward(*reference, x, k, c); };
      const auto q = sampling::build_quad(trainer, ref, *it.x0_w, *it.x0_l, it.cond, it.k, it.eps_w, it.eps_l);
      const dpo::LatentPredictions p{q.x0_w, q.xhat0_w, q.xtilde0_w, q.x0_l, q.xhat0_l, q.xtilde0_l};
      const auto b = dpo::realdpo_loss(p, weighting);
      last.push_back(b);
      total += b.loss;
      if (tape.tracking()) {
        const auto adj = dpo::realdpo_adjoint(p, b, weighting, inv_b);
        tape.backward(handles[0], diffusion::predict_x0_vjp(adj.d_xhat0_w, it.k));
        tape.backward(handles[1], diffusion::predict_x0_vjp(adj.d_xhat0_l, it.k));
      }
    }
    return total * inv_b;
  }
};

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  std::uint64_t step = 0;
  std::string method;
  double loss = 0.0;
  double margin = 0.0;
  double implicit_acc = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  std::uint64_t ref_updates = 0;
  double beta = 0.0;
  double lr = 0.0;
  std::int64_t wall_ms = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "step,method,loss,margin,implicit_acc,grad_norm,clipped,ref_updates,beta,lr,wall_ms";

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.step) + ',' + r.method + ',' + format_real(r.loss) + ',' + format_real(r.margin) + ',' +
           format_real(r.implicit_acc) + ',' + format_real(r.grad_norm) + ',' + (r.clipped ? "1" : "0") + ',' +
           std::to_string(r.ref_updates) + ',' + format_real(r.beta) + ',' + format_real(r.lr) + ',' +
           std::to_string(r.wall_ms) + '\n';
  }
  return out;
}

class WallClock {
 public:
  explicit WallClock(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  std::int64_t elapsed_ms() const {
    if (!enabled_) return 0;
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

using CheckpointHook = std::function<void(std::uint64_t step, const DenoiserParams&)>;

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  std::uint64_t steps = 3000;
  std::uint32_t batch_size = 16;
  double learning_rate = 1e-3;
  double k_min = diffusion::kDefaultKMin;
  double k_max = diffusion::kDefaultKMax;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;
  bool record_wall_clock = false;

  void validate() const {
    if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("pretrain: learning_rate must be >= 0");
    if (!(k_min > 0.0 && k_min <= k_max && k_max < 1.0)) throw ConfigError("pretrain: require 0 < k_min <= k_max < 1");
  }
};

struct TrainResult {
  DenoiserParams params;
  std::vector<MetricsRow> metrics;
  std::uint64_t ref_updates = 0;
};

inline constexpr std::uint64_t kInitStream = 0x696e6974;  // "init"

/// Rectified-flow regression from a fresh initialization.
inline TrainResult pretrain(const data::Corpus& corpus, const ModelArch& arch, const PretrainConfig& cfg,
                            const CheckpointHook& on_checkpoint = {}) {
  cfg.validate();
  if (corpus.size() == 0) throw ConfigError("pretrain: corpus is empty");
  if (arch.latent_dim != corpus.latent_dim()) throw ShapeError("pretrain: arch latent_dim does not match corpus");
  if (arch.num_classes < corpus.num_classes) throw ShapeError("pretrain: arch has fewer classes than corpus");

  Rng init_rng(child_seed(cfg.seed, kInitStream));
  TrainResult res{init_params(init_rng, arch), {}, 0};
  auto opt = OptimizerState::zeros(res.params.size());
  Rng rng(cfg.seed);
  const WallClock clock(cfg.record_wall_clock);

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    PretrainLoss loss;
    for (std::uint32_t b = 0; b < cfg.batch_size; ++b) {
      const auto& rec = corpus.records[rng.below(corpus.size())];
      NoisedItem it;
      it.x0 = &rec.sample.values;
      it.k = diffusion::select_timestep(rng, cfg.k_min, cfg.k_max).value();
      it.eps = rng.normal_vec(rec.sample.size());
      it.cond = rec.cond;
      loss.items.push_back(std::move(it));
    }
    LossAndGrad lg;
    try {
      lg = loss_grad(res.params, loss);
    } catch (const NumericError& e) {
      throw NumericError("pretrain step " + std::to_string(step) + ": " + e.what());
    }
    const double norm = l2_norm(lg.grad);
    const bool clipped = clip_global_norm(lg.grad, cfg.clip_norm, norm);
    adam_step(res.params.values, lg.grad, opt, cfg.learning_rate);
    res.metrics.push_back({step, "pretrain", lg.loss, 0.0, 0.0, norm, clipped, 0, 0.0, cfg.learning_rate,
                           clock.elapsed_ms()});
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      on_checkpoint(step + 1, res.params);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Alignment

enum class Method { realdpo, sft };
enum class NegativeSelection { round_robin, average_all };

inline std::string to_string(Method m) { return m == Method::realdpo ? "realdpo" : "sft"; }
inline Method method_from_string(const std::string& s) {
  if (s == "realdpo") return Method::realdpo;
  if (s == "sft") return Method::sft;
  throw ConfigError("unknown method '" + s + "' (expected realdpo|sft)");
}
inline std::string to_string(NegativeSelection m) { return m == NegativeSelection::round_robin ? "round_robin" : "average_all"; }
inline NegativeSelection negative_selection_from_string(const std::string& s) {
  if (s == "round_robin") return NegativeSelection::round_robin;
  if (s == "average_all") return NegativeSelection::average_all;
  throw ConfigError("unknown negative selection '" + s + "' (expected round_robin|average_all)");
}

struct AlignConfig {
  Method method = Method::realdpo;
  std::uint64_t steps = 2000;
  std::uint32_t batch_size = 16;
  double learning_rate = 1e-3;
  dpo::LossWeighting weighting;
  refmodel::RefModelConfig ref_cfg;
  double k_min = diffusion::kDefaultKMin;
  double k_max = diffusion::kDefaultKMax;
  std::uint64_t seed = 0;
  NegativeSelection negative_selection = NegativeSelection::round_robin;
  bool independent_noise = false;
  double clip_norm = 10.0;
  std::uint64_t checkpoint_every = 0;
  bool allow_fingerprint_mismatch = false;
  bool record_wall_clock = false;

  void validate() const {
    if (steps < 1) throw ConfigError("align: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("align: batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("align: learning_rate must be >= 0");
    weighting.validate();
    ref_cfg.validate();
    if (!(k_min > 0.0 && k_min <= k_max && k_max < 1.0)) throw ConfigError("align: require 0 < k_min <= k_max < 1");
  }
};

/// The declared base checkpoint and the one the negative cache was sampled from differ.
struct FingerprintMismatch : FormatError {
  using FormatError::FormatError;
};

struct AlignInputs {
  const DenoiserParams* base = nullptr;
  Fingerprint base_fingerprint{};
  const data::Corpus* corpus = nullptr;
  const sampling::NegativeCache* cache = nullptr;  // must be null for SFT
};

struct AlignResult {
  DenoiserParams params;
  DenoiserParams reference;
  std::vector<MetricsRow> metrics;
  std::uint64_t ref_updates = 0;
};

inline AlignResult align(const AlignInputs& in, const AlignConfig& cfg, const CheckpointHook& on_checkpoint = {}) {
  cfg.validate();
  if (!in.base || !in.corpus) throw ConfigError("align: base checkpoint and corpus are required");
  const auto& corpus = *in.corpus;
  if (corpus.size() == 0) throw ConfigError("align: corpus is empty");
  if (in.base->arch.latent_dim != corpus.latent_dim()) throw ShapeError("align: checkpoint latent_dim does not match corpus");

  std::vector<sampling::PreferencePair> pairs;
  if (cfg.method == Method::realdpo) {
    if (!in.cache) throw ConfigError("align: realdpo requires a negative cache");
    if (in.cache->fingerprint != in.base_fingerprint && !cfg.allow_fingerprint_mismatch)
      throw FingerprintMismatch("negative cache was sampled from checkpoint " + to_hex(in.cache->fingerprint) +
                                " but the base checkpoint is " + to_hex(in.base_fingerprint));
    pairs = sampling::assemble_pairs(corpus, *in.cache);
  } else if (in.cache) {
    throw ConfigError("align: sft does not take a negative cache");
  }

  AlignResult res{*in.base, *in.base, {}, 0};
  auto opt = OptimizerState::zeros(res.params.size());
  Rng rng(cfg.seed);
  const WallClock clock(cfg.record_wall_clock);
  const sampling::QuadOptions qopt{cfg.k_min, cfg.k_max, cfg.independent_noise};
  const double beta_col = cfg.method == Method::realdpo ? cfg.weighting.beta : 0.0;

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    if (cfg.method == Method::realdpo && refmodel::maybe_update(step, res.reference, res.params, cfg.ref_cfg))
      ++res.ref_updates;

    MetricsRow row;
    row.step = step;
    row.method = to_string(cfg.method);
    row.ref_updates = res.ref_updates;
    row.beta = beta_col;
    row.lr = cfg.learning_rate;
    LossAndGrad lg;
    try {
      if (cfg.method == Method::realdpo) {
        RealDpoLoss loss{&res.reference, cfg.weighting, {}, {}};
        for (std::uint32_t b = 0; b < cfg.batch_size; ++b) {
          const auto& pair = pairs[rng.below(pairs.size())];
          const auto K = static_cast<std::uint32_t>(pair.loses.size());
          std::vector<std::uint32_t> chosen;
          if (cfg.negative_selection == NegativeSelection::round_robin)
            chosen.push_back(static_cast<std::uint32_t>((step + pair.prompt_index) % K));
          else
            for (std::uint32_t j = 0; j < K; ++j) chosen.push_back(j);
          for (auto j : chosen) {
            PairItem it;
            it.x0_w = &pair.win->values;
            it.x0_l = &pair.loses[j]->values;
            it.cond = pair.cond;
            sampling::draw_quad_noise(rng, pair.win->size(), qopt, it.k, it.eps_w, it.eps_l);
            loss.items.push_back(std::move(it));
          }
        }
        lg = loss_grad(res.params, loss);
        double margin = 0.0, correct = 0.0;
        for (const auto& b : loss.last) {
          margin += b.margin;
          correct += b.implicit_correct ? 1.0 : 0.0;
        }
        row.margin = margin / static_cast<double>(loss.last.size());
        row.implicit_acc = correct / static_cast<double>(loss.last.size());
      } else {
        SftLoss loss;
        for (std::uint32_t b = 0; b < cfg.batch_size; ++b) {
          const auto& rec = corpus.records[rng.below(corpus.size())];
          NoisedItem it;
          it.x0 = &rec.sample.values;
          it.cond = rec.cond;
          // Same draw order as the preference path: timestep, then noise.
          it.k = diffusion::select_timestep(rng, cfg.k_min, cfg.k_max).value();
          it.eps = rng.normal_vec(rec.sample.size());
          loss.items.push_back(std::move(it));
        }
        lg = loss_grad(res.params, loss);
      }
    } catch (const NumericError& e) {
      throw NumericError("align step " + std::to_string(step) + ": " + e.what());
    }
    row.loss = lg.loss;
    row.grad_norm = l2_norm(lg.grad);
    row.clipped = clip_global_norm(lg.grad, cfg.clip_norm, row.grad_norm);
    adam_step(res.params.values, lg.grad, opt, cfg.learning_rate);
    row.wall_ms = clock.elapsed_ms();
    res.metrics.push_back(std::move(row));
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      on_checkpoint(step + 1, res.params);
  }
  return res;
}

}  // namespace realdpo::trainer
