// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "realdpo/core.hpp"

namespace realdpo {

enum class Activation { silu, tanh };

inline std::string to_string(Activation a) { return a == Activation::silu ? "silu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "' (piecewise-linear activations are not supported)");
}

/// Fixed MLP velocity predictor. Input is [x_k | time features | condition embedding].
struct ModelArch {
  std::uint32_t latent_dim = 32;
  std::uint32_t num_classes = 3;
  std::uint32_t cond_embed_dim = 8;
  std::uint32_t time_embed_dim = 8;
  std::vector<std::uint32_t> hidden_dims{96, 96};
  Activation activation = Activation::silu;

  friend bool operator==(const ModelArch&, const ModelArch&) = default;

  void validate() const {
    if (latent_dim < 1 || num_classes < 1 || cond_embed_dim < 1 || time_embed_dim < 1)
      throw ConfigError("ModelArch: all dimensions must be >= 1");
    if (hidden_dims.empty()) throw ConfigError("ModelArch: hidden_dims must be non-empty");
    for (auto h : hidden_dims)
      if (h < 1) throw ConfigError("ModelArch: hidden width must be >= 1");
  }

  std::size_t input_dim() const { return latent_dim + time_embed_dim + cond_embed_dim; }

  /// Widths of every layer boundary: input, hidden..., output.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim()};
    for (auto h : hidden_dims) w.push_back(h);
    w.push_back(latent_dim);
    return w;
  }

  std::size_t num_layers() const { return hidden_dims.size() + 1; }

  std::size_t param_count() const {
    const auto w = widths();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l + 1] * w[l] + w[l + 1];
    return n + std::size_t{num_classes} * cond_embed_dim;
  }
};

/// Offsets into the flat parameter vector.
///
/// Layout: for each layer in order, the weight matrix (out x in, row-major)
/// followed by its bias; then the condition embedding table (classes x embed,
/// row-major).
struct ParamLayout {
  std::vector<std::size_t> weight_offset;
  std::vector<std::size_t> bias_offset;
  std::size_t embed_offset = 0;
  std::size_t total = 0;

  explicit ParamLayout(const ModelArch& arch) {
    const auto w = arch.widths();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      weight_offset.push_back(off);
      off += w[l + 1] * w[l];
      bias_offset.push_back(off);
      off += w[l + 1];
    }
    embed_offset = off;
    total = off + std::size_t{arch.num_classes} * arch.cond_embed_dim;
  }
};

/// Parameter set of the denoiser. Trainer and reference are both values of this type.
struct DenoiserParams {
  ModelArch arch;
  Vec values;

  DenoiserParams() = default;
  DenoiserParams(ModelArch a, Vec v) : arch(std::move(a)), values(std::move(v)) {
    arch.validate();
    if (values.size() != arch.param_count())
      throw ShapeError("DenoiserParams: expected " + std::to_string(arch.param_count()) +
                       " parameters, got " + std::to_string(values.size()));
  }

  std::size_t size() const { return values.size(); }
  friend bool operator==(const DenoiserParams&, const DenoiserParams&) = default;
};

inline void require_same_arch(const DenoiserParams& a, const DenoiserParams& b, std::string_view what) {
  if (!(a.arch == b.arch)) throw ShapeError(std::string(what) + ": architecture mismatch");
}

/// Sinusoidal features of the timestep: sin/cos pairs at frequencies pi * 2^m.
inline Vec time_features(double k, std::size_t count) {
  Vec out(count);
  for (std::size_t j = 0; j < count; ++j) {
    const double freq = std::numbers::pi * std::ldexp(1.0, static_cast<int>(j / 2));
    out[j] = (j % 2 == 0) ? std::sin(freq * k) : std::cos(freq * k);
  }
  return out;
}

namespace detail {

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double activate(Activation a, double z) {
  return a == Activation::silu ? z * sigmoid(z) : std::tanh(z);
}

inline double activate_grad(Activation a, double z) {
  if (a == Activation::silu) {
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
  }
  const double t = std::tanh(z);
  return 1.0 - t * t;
}

inline void check_inputs(const ModelArch& arch, std::span<const double> x_k, double k, ConditionId cond) {
  require_same_size(x_k.size(), arch.latent_dim, "forward: x_k");
  if (!(k >= 0.0 && k <= 1.0)) throw ShapeError("forward: timestep outside [0, 1]");
  if (cond.value >= arch.num_classes)
    throw ShapeError("forward: condition id " + std::to_string(cond.value) + " out of range");
}

/// Activations of one forward pass, kept for the backward sweep.
struct ForwardTrace {
  ConditionId cond;
  std::vector<Vec> pre;   // pre-activation per layer
  std::vector<Vec> post;  // post[0] = input, post[l+1] = output of layer l
};

inline ForwardTrace run_forward(const DenoiserParams& p, std::span<const double> x_k, double k,
                                ConditionId cond) {
  const auto& arch = p.arch;
  check_inputs(arch, x_k, k, cond);
  const ParamLayout layout(arch);
  const auto w = arch.widths();

  ForwardTrace tr;
  tr.cond = cond;
  Vec input;
  input.reserve(arch.input_dim());
  input.insert(input.end(), x_k.begin(), x_k.end());
  const Vec tf = time_features(k, arch.time_embed_dim);
  input.insert(input.end(), tf.begin(), tf.end());
  const double* emb = p.values.data() + layout.embed_offset + std::size_t{cond.value} * arch.cond_embed_dim;
  input.insert(input.end(), emb, emb + arch.cond_embed_dim);
  tr.post.push_back(std::move(input));

  const std::size_t layers = arch.num_layers();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = w[l], out = w[l + 1];
    const double* W = p.values.data() + layout.weight_offset[l];
    const double* b = p.values.data() + layout.bias_offset[l];
    const Vec& a = tr.post.back();
    Vec z(out);
    for (std::size_t r = 0; r < out; ++r) {
      double acc = b[r];
      const double* row = W + r * in;
      for (std::size_t c = 0; c < in; ++c) acc += row[c] * a[c];
      z[r] = acc;
    }
    Vec h = z;
    if (l + 1 < layers)
      for (auto& v : h) v = activate(arch.activation, v);
    tr.pre.push_back(std::move(z));
    tr.post.push_back(std::move(h));
  }
  return tr;
}

}  // namespace detail

/// Velocity prediction v(x_k, k, cond). Pure.
inline Vec forward(const DenoiserParams& params, std::span<const double> x_k, double k, ConditionId cond) {
  return std::move(detail::run_forward(params, x_k, k, cond).post.back());
}

/// Scaled-normal initialization with a zero final layer, so a fresh model predicts zero velocity.
inline DenoiserParams init_params(Rng& rng, const ModelArch& arch) {
  arch.validate();
  const ParamLayout layout(arch);
  const auto w = arch.widths();
  Vec v(layout.total, 0.0);
  for (std::size_t l = 0; l + 1 < arch.num_layers(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(w[l]));
    for (std::size_t i = 0; i < w[l + 1] * w[l]; ++i) v[layout.weight_offset[l] + i] = scale * rng.normal();
  }
  for (std::size_t i = layout.embed_offset; i < layout.total; ++i) v[i] = rng.normal();
  return DenoiserParams(arch, std::move(v));
}

/// Records forward passes against a fixed parameter set and accumulates the
/// parameter gradient from output adjoints supplied by the caller.
///
/// A loss functional is any callable `double(GradTape&)` that obtains model
/// outputs through `forward()` and, for each output it depends on, passes
/// dLoss/dOutput to `backward()`. With `track = false` the tape only evaluates,
/// which is what the finite-difference oracle uses.
class GradTape {
 public:
  explicit GradTape(const DenoiserParams& params, bool track = true)
      : params_(params), layout_(params.arch), track_(track) {
    if (track_) grad_.assign(params.size(), 0.0);
  }

  const DenoiserParams& params() const { return params_; }
  bool tracking() const { return track_; }
  std::size_t forward_count() const { return forward_count_; }

  struct Handle {
    std::size_t index;
  };

  /// Returns a handle; the output vector is available via output(handle).
  Handle forward(std::span<const double> x_k, double k, ConditionId cond) {
    auto tr = detail::run_forward(params_, x_k, k, cond);
    if (!all_finite(tr.post.back())) throw NumericError("forward produced a non-finite output");
    traces_.push_back(std::move(tr));
    ++forward_count_;
    return Handle{traces_.size() - 1};
  }

  const Vec& output(Handle h) const { return traces_.at(h.index).post.back(); }

  void backward(Handle h, std::span<const double> out_adjoint) {
    if (!track_) return;
    const auto& tr = traces_.at(h.index);
    const auto& arch = params_.arch;
    require_same_size(out_adjoint.size(), arch.latent_dim, "backward: adjoint");
    if (!all_finite(out_adjoint)) throw NumericError("backward: non-finite output adjoint");
    const auto w = arch.widths();
    Vec delta(out_adjoint.begin(), out_adjoint.end());
    for (std::size_t l = arch.num_layers(); l-- > 0;) {
      const std::size_t in = w[l], out = w[l + 1];
      const Vec& a = tr.post[l];
      double* gW = grad_.data() + layout_.weight_offset[l];
      double* gb = grad_.data() + layout_.bias_offset[l];
      const double* W = params_.values.data() + layout_.weight_offset[l];
      Vec prev(in, 0.0);
      for (std::size_t r = 0; r < out; ++r) {
        const double d = delta[r];
        gb[r] += d;
        double* grow = gW + r * in;
        const double* wrow = W + r * in;
        for (std::size_t c = 0; c < in; ++c) {
          grow[c] += d * a[c];
          prev[c] += wrow[c] * d;
        }
      }
      if (l > 0) {
        const Vec& z = tr.pre[l - 1];
        for (std::size_t c = 0; c < in; ++c) prev[c] *= detail::activate_grad(arch.activation, z[c]);
      } else {
        // Only the embedding slice of the input carries parameters.
        const std::size_t first = arch.latent_dim + arch.time_embed_dim;
        double* ge = grad_.data() + layout_.embed_offset + std::size_t{tr.cond.value} * arch.cond_embed_dim;
        for (std::size_t e = 0; e < arch.cond_embed_dim; ++e) ge[e] += prev[first + e];
      }
      delta = std::move(prev);
    }
  }

  const Vec& gradient() const { return grad_; }

 private:
  const DenoiserParams& params_;
  ParamLayout layout_;
  bool track_;
  std::vector<detail::ForwardTrace> traces_;
  Vec grad_;
  std::size_t forward_count_ = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  Vec grad;
};

/// Exact reverse-mode gradient of a loss functional (see GradTape).
template <class LossEval>
LossAndGrad loss_grad(const DenoiserParams& params, LossEval&& loss_eval) {
  GradTape tape(params, true);
  const double loss = loss_eval(tape);
  if (!std::isfinite(loss)) throw NumericError("loss_grad: non-finite loss");
  if (!all_finite(tape.gradient())) throw NumericError("loss_grad: non-finite gradient");
  return {loss, tape.gradient()};
}

/// Evaluates a loss functional without gradient bookkeeping.
template <class LossEval>
double loss_value(const DenoiserParams& params, LossEval&& loss_eval) {
  GradTape tape(params, false);
  return loss_eval(tape);
}

/// Central finite differences, one coordinate at a time.
template <class LossEval>
Vec fd_grad(const DenoiserParams& params, LossEval&& loss_eval, double h) {
  if (!(h > 0.0)) throw ConfigError("fd_grad: step must be positive");
  Vec g(params.size());
  DenoiserParams probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe.values[i];
    probe.values[i] = orig + h;
    const double up = loss_value(probe, loss_eval);
    probe.values[i] = orig - h;
    const double down = loss_value(probe, loss_eval);
    probe.values[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, 1e-8) with Euclidean norms over the whole gradient.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "relative_error");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8). Entries whose true gradient is tiny
/// are dominated by finite-difference truncation, so this is a diagnostic only.
inline double max_relative_error(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "max_relative_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace realdpo
