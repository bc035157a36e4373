#pragma once

// Single-layer multi-width CNN sentence classifier (embedding lookup, valid
// convolution + ReLU, max-over-time pooling, dropout, dense, softmax), its
// exact gradients, and the AdaDelta optimizer. All arithmetic is double.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nlrf/corpus.hpp"
#include "nlrf/error.hpp"
#include "nlrf/random.hpp"

namespace nlrf::neural {

using corpus::EncodedInstance;
using corpus::Label;

inline constexpr std::size_t kClasses = 2;

struct ModelShape {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> widths;
  std::size_t maps = 0;

  std::size_t features() const noexcept { return maps * widths.size(); }
  std::size_t max_width() const noexcept {
    return widths.empty() ? 0 : *std::max_element(widths.begin(), widths.end());
  }

  std::size_t parameter_count() const noexcept {
    std::size_t n = vocab_size * dim;
    for (auto w : widths) n += maps * w * dim + maps;
    return n + features() * kClasses + kClasses;
  }

  void validate() const {
    if (vocab_size < corpus::Vocab::kReserved || dim == 0 || maps == 0 || widths.empty())
      throw Error(Errc::ShapeError, "model shape has an empty dimension");
    for (auto w : widths)
      if (w == 0) throw Error(Errc::ShapeError, "filter width must be positive");
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Flat parameter storage with named views. The same layout backs both the
/// parameters and their gradients; the tag keeps the two from being mixed up.
///
/// Layout: embeddings (|V| x d) | per width: filters (m x w x d), bias (m) |
/// dense weights (features x 2) | dense bias (2).
template <class Tag>
class ParamBlocks {
 public:
  ParamBlocks() = default;
  explicit ParamBlocks(ModelShape shape) : shape_(std::move(shape)) {
    shape_.validate();
    values_.assign(shape_.parameter_count(), 0.0);
    std::size_t off = shape_.vocab_size * shape_.dim;
    for (auto w : shape_.widths) {
      conv_offsets_.push_back(off);
      off += shape_.maps * w * shape_.dim + shape_.maps;
    }
    dense_offset_ = off;
  }

  template <class Other>
  static ParamBlocks like(const ParamBlocks<Other>& other) { return ParamBlocks(other.shape()); }

  const ModelShape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<double> embeddings() noexcept { return values().first(shape_.vocab_size * shape_.dim); }
  std::span<const double> embeddings() const noexcept { return values().first(shape_.vocab_size * shape_.dim); }

  std::span<double> embedding_row(std::size_t i) noexcept { return values().subspan(i * shape_.dim, shape_.dim); }
  std::span<const double> embedding_row(std::size_t i) const noexcept {
    return values().subspan(i * shape_.dim, shape_.dim);
  }

  /// m filters of w*d weights, filter-major.
  std::span<double> conv_filters(std::size_t wi) noexcept { return values().subspan(conv_offsets_[wi], filter_len(wi)); }
  std::span<const double> conv_filters(std::size_t wi) const noexcept {
    return values().subspan(conv_offsets_[wi], filter_len(wi));
  }
  std::span<double> conv_bias(std::size_t wi) noexcept {
    return values().subspan(conv_offsets_[wi] + filter_len(wi), shape_.maps);
  }
  std::span<const double> conv_bias(std::size_t wi) const noexcept {
    return values().subspan(conv_offsets_[wi] + filter_len(wi), shape_.maps);
  }

  /// Row-major features x 2; column c holds the weights of class c.
  std::span<double> dense_weights() noexcept { return values().subspan(dense_offset_, shape_.features() * kClasses); }
  std::span<const double> dense_weights() const noexcept {
    return values().subspan(dense_offset_, shape_.features() * kClasses);
  }
  std::span<double> dense_bias() noexcept { return values().last(kClasses); }
  std::span<const double> dense_bias() const noexcept { return values().last(kClasses); }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const ParamBlocks& a, const ParamBlocks& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  std::size_t filter_len(std::size_t wi) const noexcept { return shape_.maps * shape_.widths[wi] * shape_.dim; }

  ModelShape shape_;
  std::vector<double> values_;
  std::vector<std::size_t> conv_offsets_;
  std::size_t dense_offset_ = 0;
};

struct ParamsTag;
struct GradsTag;
using ModelParams = ParamBlocks<ParamsTag>;
using Gradients = ParamBlocks<GradsTag>;

/// Embeddings uniform(-0.25, 0.25) (or copied from `table`), PAD row zero,
/// conv filters Glorot-uniform, conv and dense biases zero, dense weights zero.
inline ModelParams init_params(const ModelShape& shape, Rng& rng, const corpus::EmbeddingTable* table = nullptr) {
  ModelParams p(shape);
  if (table) {
    if (table->dim != shape.dim || table->rows() != shape.vocab_size)
      throw Error(Errc::ShapeError, "embedding table does not match model shape");
    std::copy(table->matrix.begin(), table->matrix.end(), p.embeddings().begin());
  } else {
    for (std::size_t r = 1; r < shape.vocab_size; ++r)
      for (auto& v : p.embedding_row(r)) v = rng.uniform(-corpus::kInitRange, corpus::kInitRange);
  }
  std::fill(p.embedding_row(corpus::Vocab::kPad).begin(), p.embedding_row(corpus::Vocab::kPad).end(), 0.0);
  for (std::size_t wi = 0; wi < shape.widths.size(); ++wi) {
    const double fan_in = static_cast<double>(shape.widths[wi] * shape.dim);
    const double fan_out = static_cast<double>(shape.maps * shape.widths[wi]);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : p.conv_filters(wi)) v = rng.uniform(-bound, bound);
  }
  return p;
}

enum class Mode { Train, Infer };

/// Softmax output, one row per instance.
struct PredictedDistribution {
  std::vector<std::array<double, kClasses>> rows;

  std::size_t size() const noexcept { return rows.size(); }
  friend bool operator==(const PredictedDistribution&, const PredictedDistribution&) = default;
};

namespace detail {

struct InstanceCache {
  std::vector<double> features;         // pooled, after dropout
  std::vector<double> mask;             // dropout scale per feature (1 when off)
  std::vector<std::size_t> argmax;      // winning window start per feature
  std::vector<char> active;             // pre-activation at the winner > 0
  std::array<double, kClasses> probs{};
};

inline void check_batch(const ModelShape& shape, std::span<const EncodedInstance> batch) {
  if (batch.empty()) throw Error(Errc::ShapeError, "batch is empty");
  const std::size_t need = shape.max_width();
  for (const auto& e : batch) {
    if (e.indices.size() < need)
      throw Error(Errc::ShapeError, "instance padded to " + std::to_string(e.indices.size()) +
                                        " < largest filter width " + std::to_string(need));
    if (e.length > e.indices.size()) throw Error(Errc::ShapeError, "instance length exceeds its padding");
    for (auto idx : e.indices)
      if (idx >= shape.vocab_size)
        throw Error(Errc::VocabOverflow, "index " + std::to_string(idx) + " >= vocabulary size " +
                                             std::to_string(shape.vocab_size));
  }
}

/// Number of window start positions pooled for width w. Windows never start
/// past the real tokens, so trailing PAD beyond a filter's reach is invisible.
inline std::size_t windows(const EncodedInstance& e, std::size_t w) noexcept {
  return std::max(e.length, w) - w + 1;
}

inline InstanceCache run_instance(const ModelParams& p, const EncodedInstance& e, double dropout, Mode mode,
                                  std::uint64_t seed, std::size_t position) {
  const auto& s = p.shape();
  const std::size_t d = s.dim, m = s.maps, F = s.features();
  InstanceCache c;
  c.features.assign(F, 0.0);
  c.mask.assign(F, 1.0);
  c.argmax.assign(F, 0);
  c.active.assign(F, 0);

  std::vector<double> window;
  for (std::size_t wi = 0; wi < s.widths.size(); ++wi) {
    const std::size_t w = s.widths[wi];
    const auto filters = p.conv_filters(wi);
    const auto bias = p.conv_bias(wi);
    window.resize(w * d);
    std::vector<double> best(m, 0.0);
    std::vector<double> best_z(m, 0.0);
    std::vector<std::size_t> best_t(m, 0);
    const std::size_t T = windows(e, w);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t k = 0; k < w; ++k) {
        const auto row = p.embedding_row(e.indices[t + k]);
        std::copy(row.begin(), row.end(), window.begin() + static_cast<std::ptrdiff_t>(k * d));
      }
      for (std::size_t f = 0; f < m; ++f) {
        const double* fw = filters.data() + f * w * d;
        double z = bias[f];
        for (std::size_t j = 0; j < w * d; ++j) z += fw[j] * window[j];
        const double a = z > 0.0 ? z : 0.0;
        if (t == 0 || a > best[f]) {
          best[f] = a;
          best_z[f] = z;
          best_t[f] = t;
        }
      }
    }
    for (std::size_t f = 0; f < m; ++f) {
      const std::size_t o = wi * m + f;
      c.features[o] = best[f];
      c.argmax[o] = best_t[f];
      c.active[o] = best_z[f] > 0.0;
    }
  }

  if (mode == Mode::Train && dropout > 0.0) {
    Rng rng = Rng::derive(seed, {0x64726f70ULL, position});
    const double keep_scale = 1.0 / (1.0 - dropout);
    for (std::size_t o = 0; o < F; ++o) {
      c.mask[o] = rng.uniform() < dropout ? 0.0 : keep_scale;
      c.features[o] *= c.mask[o];
    }
  }

  const auto W = p.dense_weights();
  const auto b = p.dense_bias();
  std::array<double, kClasses> logits{b[0], b[1]};
  for (std::size_t o = 0; o < F; ++o) {
    logits[0] += W[o * kClasses + 0] * c.features[o];
    logits[1] += W[o * kClasses + 1] * c.features[o];
  }
  const double mx = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
  c.probs = {e0 / (e0 + e1), e1 / (e0 + e1)};
  return c;
}

inline void check_dropout(double dropout) {
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(Errc::InvalidConfig, "dropout must be in [0, 1)");
}

}  // namespace detail

/// p_theta(y | x) for every instance of the batch. Infer mode ignores
/// dropout and is bit-deterministic; train mode draws inverted-dropout masks
/// from `seed` and the instance's batch position.
inline PredictedDistribution forward(const ModelParams& params, std::span<const EncodedInstance> batch,
                                     double dropout, Mode mode, std::uint64_t seed = 0) {
  detail::check_dropout(dropout);
  detail::check_batch(params.shape(), batch);
  PredictedDistribution out;
  out.rows.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    out.rows.push_back(detail::run_instance(params, batch[i], dropout, mode, seed, i).probs);
  return out;
}

inline constexpr double kProbFloor = 1e-12;

/// Mean cross-entropy of the gold class.
inline double loss(const PredictedDistribution& pred, std::span<const Label> labels) {
  if (pred.size() != labels.size())
    throw Error(Errc::ShapeError, "prediction count " + std::to_string(pred.size()) + " != label count " +
                                      std::to_string(labels.size()));
  if (labels.empty()) throw Error(Errc::ShapeError, "empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= kClasses) throw Error(Errc::ShapeError, "label out of range");
    total += -std::log(std::max(pred.rows[i][y], kProbFloor));
  }
  return total / static_cast<double>(labels.size());
}

inline std::vector<Label> labels_of(std::span<const EncodedInstance> batch) {
  std::vector<Label> out;
  out.reserve(batch.size());
  for (const auto& e : batch) out.push_back(e.label);
  return out;
}

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

/// Exact gradients of `loss` w.r.t. every parameter, using the same dropout
/// masks as `forward(..., Mode::Train, seed)`. The PAD row is a constant and
/// always receives a zero gradient.
inline LossAndGradients backward(const ModelParams& params, std::span<const EncodedInstance> batch,
                                 std::span<const Label> labels, double dropout, std::uint64_t seed = 0) {
  detail::check_dropout(dropout);
  detail::check_batch(params.shape(), batch);
  if (labels.size() != batch.size()) throw Error(Errc::ShapeError, "label count does not match batch");

  const auto& s = params.shape();
  const std::size_t d = s.dim, m = s.maps, F = s.features();
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  LossAndGradients out{0.0, Gradients(s)};
  auto& g = out.grads;
  const auto W = params.dense_weights();
  auto gW = g.dense_weights();
  auto gb = g.dense_bias();
  std::vector<double> dfeat(F);

  PredictedDistribution pred;
  pred.rows.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& e = batch[i];
    const auto c = detail::run_instance(params, e, dropout, Mode::Train, seed, i);
    pred.rows.push_back(c.probs);

    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= kClasses) throw Error(Errc::ShapeError, "label out of range");
    std::array<double, kClasses> dlogit{c.probs[0] * inv_n, c.probs[1] * inv_n};
    dlogit[y] -= inv_n;

    gb[0] += dlogit[0];
    gb[1] += dlogit[1];
    for (std::size_t o = 0; o < F; ++o) {
      gW[o * kClasses + 0] += c.features[o] * dlogit[0];
      gW[o * kClasses + 1] += c.features[o] * dlogit[1];
      dfeat[o] = (W[o * kClasses + 0] * dlogit[0] + W[o * kClasses + 1] * dlogit[1]) * c.mask[o];
    }

    for (std::size_t wi = 0; wi < s.widths.size(); ++wi) {
      const std::size_t w = s.widths[wi];
      const auto filters = params.conv_filters(wi);
      auto gF = g.conv_filters(wi);
      auto gcb = g.conv_bias(wi);
      for (std::size_t f = 0; f < m; ++f) {
        const std::size_t o = wi * m + f;
        if (!c.active[o] || dfeat[o] == 0.0) continue;
        const double dz = dfeat[o];
        const std::size_t t = c.argmax[o];
        gcb[f] += dz;
        for (std::size_t k = 0; k < w; ++k) {
          const std::size_t idx = e.indices[t + k];
          const auto row = params.embedding_row(idx);
          auto grow = g.embedding_row(idx);
          const double* fw = filters.data() + f * w * d + k * d;
          double* gfw = gF.data() + f * w * d + k * d;
          for (std::size_t j = 0; j < d; ++j) {
            gfw[j] += dz * row[j];
            grow[j] += dz * fw[j];
          }
        }
      }
    }
  }
  auto pad = g.embedding_row(corpus::Vocab::kPad);
  std::fill(pad.begin(), pad.end(), 0.0);
  out.loss = loss(pred, labels);
  return out;
}

struct AdaDeltaConfig {
  double rho = 0.95;
  double epsilon = 1e-6;
  /// Max L2 norm of each dense-weight column; <= 0 disables the constraint.
  double max_norm = 3.0;

  friend bool operator==(const AdaDeltaConfig&, const AdaDeltaConfig&) = default;
};

/// Running averages E[g^2] and E[dx^2], one per parameter.
struct OptimizerState {
  AdaDeltaConfig config;
  std::vector<double> sq_grad;
  std::vector<double> sq_delta;

  static OptimizerState fresh(std::size_t n, AdaDeltaConfig cfg = {}) {
    if (!(cfg.rho > 0.0 && cfg.rho < 1.0) || !(cfg.epsilon > 0.0))
      throw Error(Errc::InvalidConfig, "AdaDelta requires rho in (0,1) and epsilon > 0");
    return {cfg, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  }
};

/// The bare AdaDelta rule, element-wise over spans of equal length.
inline void adadelta_update(std::span<double> x, std::span<const double> g, std::span<double> sq_grad,
                            std::span<double> sq_delta, double rho, double epsilon) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    sq_grad[i] = rho * sq_grad[i] + (1.0 - rho) * g[i] * g[i];
    const double delta = -(std::sqrt(sq_delta[i] + epsilon) / std::sqrt(sq_grad[i] + epsilon)) * g[i];
    sq_delta[i] = rho * sq_delta[i] + (1.0 - rho) * delta * delta;
    x[i] += delta;
  }
}

/// Rescales each class column of the dense weights to L2 norm <= max_norm.
inline void constrain_dense_columns(ModelParams& params, double max_norm) {
  if (max_norm <= 0.0) return;
  auto W = params.dense_weights();
  const std::size_t F = params.shape().features();
  for (std::size_t c = 0; c < kClasses; ++c) {
    double sq = 0.0;
    for (std::size_t o = 0; o < F; ++o) sq += W[o * kClasses + c] * W[o * kClasses + c];
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
      const double scale = max_norm / norm;
      for (std::size_t o = 0; o < F; ++o) W[o * kClasses + c] *= scale;
    }
  }
}

inline void adadelta_step(OptimizerState& state, ModelParams& params, const Gradients& grads) {
  if (grads.shape() != params.shape() || state.sq_grad.size() != params.size() ||
      state.sq_delta.size() != params.size())
    throw Error(Errc::ShapeError, "optimizer state, parameters and gradients disagree in shape");
  if (!grads.all_finite()) throw Error(Errc::NonFiniteGradient, "gradient contains NaN or Inf");
  adadelta_update(params.values(), grads.values(), state.sq_grad, state.sq_delta, state.config.rho,
                  state.config.epsilon);
  constrain_dense_columns(params, state.config.max_norm);
}

/// Compares `grad_fn(params)` against central differences of the
/// dropout-free loss on up to `samples` randomly chosen parameters (the
/// constant PAD row is excluded). Returns max |a-n| / max(|a|, |n|, 1e-8).
template <class GradFn>
double grad_check_with(const ModelParams& params, std::span<const EncodedInstance> batch,
                       std::span<const Label> labels, double epsilon, GradFn&& grad_fn,
                       std::size_t samples = 200, std::uint64_t seed = 0) {
  const LossAndGradients analytic = grad_fn(params);
  const std::size_t first = params.shape().dim;  // skip PAD row
  std::vector<std::size_t> candidates(params.size() - first);
  std::iota(candidates.begin(), candidates.end(), first);
  Rng rng(seed);
  rng.shuffle(candidates);
  candidates.resize(std::min(samples, candidates.size()));

  auto objective = [&](const ModelParams& p) { return loss(forward(p, batch, 0.0, Mode::Infer), labels); };
  ModelParams probe = params;
  double worst = 0.0;
  for (auto k : candidates) {
    const double x0 = probe.values()[k];
    probe.values()[k] = x0 + epsilon;
    const double up = objective(probe);
    probe.values()[k] = x0 - epsilon;
    const double down = objective(probe);
    probe.values()[k] = x0;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic.grads.values()[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

inline double grad_check(const ModelParams& params, std::span<const EncodedInstance> batch,
                         std::span<const Label> labels, double epsilon, std::size_t samples = 200,
                         std::uint64_t seed = 0) {
  return grad_check_with(
      params, batch, labels, epsilon,
      [&](const ModelParams& p) { return backward(p, batch, labels, 0.0); }, samples, seed);
}

}  // namespace nlrf::neural
