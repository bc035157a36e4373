#pragma once

// Training loop: per mini-batch rule application (D -> D*), forward pass,
// cross-entropy, backward pass and AdaDelta update, with dev-set early
// stopping. Also prediction and dev-split carving.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlrf/corpus.hpp"
#include "nlrf/error.hpp"
#include "nlrf/neural.hpp"
#include "nlrf/random.hpp"
#include "nlrf/rules.hpp"

namespace nlrf::pipeline {

using corpus::Dataset;
using corpus::Instance;
using corpus::Label;
using corpus::Vocab;
using neural::ModelParams;
using neural::PredictedDistribution;
using rules::RuleSet;

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 50;
  std::size_t dim = 50;
  std::vector<std::size_t> widths{2, 3, 4};
  std::size_t maps = 16;
  double dropout = 0.5;
  std::uint64_t seed = 42;
  std::size_t patience = 5;
  bool apply_rules_at_inference = true;
  std::string embeddings_path;  // empty: random initialization
  /// Minimum padded length; 0 pads to the largest filter width.
  std::size_t pad_to = 0;
  std::size_t min_freq = 1;
  /// Share of the training data held out as dev when no dev set is given
  /// (used by the CLI and cross-validation, not by train() itself).
  double dev_fraction = 0.1;
  neural::AdaDeltaConfig optimizer{};

  /// Filter widths, map count and embedding size of the original CNN-non-static setup.
  static TrainConfig full_scale() {
    TrainConfig c;
    c.dim = 300;
    c.widths = {3, 4, 5};
    c.maps = 100;
    return c;
  }

  std::size_t effective_pad() const {
    const std::size_t w = widths.empty() ? 1 : *std::max_element(widths.begin(), widths.end());
    return std::max(pad_to, w);
  }

  void validate() const {
    if (epochs < 1) throw Error(Errc::InvalidConfig, "epochs must be >= 1");
    if (batch_size < 1) throw Error(Errc::InvalidConfig, "batch_size must be >= 1");
    if (dim < 1 || maps < 1 || widths.empty()) throw Error(Errc::InvalidConfig, "empty model dimension");
    for (auto w : widths)
      if (w < 1) throw Error(Errc::InvalidConfig, "filter widths must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(Errc::InvalidConfig, "dropout must be in [0, 1)");
    if (!(dev_fraction >= 0.0 && dev_fraction < 1.0))
      throw Error(Errc::InvalidConfig, "dev_fraction must be in [0, 1)");
    if (min_freq < 1) throw Error(Errc::InvalidConfig, "min_freq must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  /// NaN when training ran without a dev set.
  double dev_accuracy = std::numeric_limits<double>::quiet_NaN();

  friend bool operator==(const EpochLog& a, const EpochLog& b) {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return a.epoch == b.epoch && same(a.train_loss, b.train_loss) && same(a.dev_accuracy, b.dev_accuracy);
  }
};

struct TrainedModel {
  ModelParams params;
  Vocab vocab;
  RuleSet rules;
  TrainConfig config;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // epoch whose parameters were returned
};

struct Prediction {
  std::vector<Label> labels;
  PredictedDistribution distribution;
};

/// Argmax; an exact 0.5/0.5 tie goes to class 0.
inline Label decide(const std::array<double, neural::kClasses>& p) noexcept { return p[1] > p[0] ? 1 : 0; }

/// Runs the network on already-transformed token sequences.
inline Prediction predict_tokens(const ModelParams& params, const Vocab& vocab, std::size_t pad_to,
                                 std::span<const Instance> instances) {
  Prediction out;
  out.labels.reserve(instances.size());
  out.distribution.rows.reserve(instances.size());
  constexpr std::size_t kChunk = 256;
  std::vector<corpus::EncodedInstance> enc;
  for (std::size_t lo = 0; lo < instances.size(); lo += kChunk) {
    const std::size_t hi = std::min(instances.size(), lo + kChunk);
    enc.clear();
    for (std::size_t i = lo; i < hi; ++i) enc.push_back(corpus::encode(instances[i], vocab, pad_to));
    auto dist = neural::forward(params, enc, 0.0, neural::Mode::Infer);
    for (const auto& row : dist.rows) {
      out.labels.push_back(decide(row));
      out.distribution.rows.push_back(row);
    }
  }
  return out;
}

/// Routes instances through the model's rule chain first unless the model
/// was configured with rules off at inference.
inline Prediction predict(const TrainedModel& model, std::span<const Instance> instances) {
  if (!model.config.apply_rules_at_inference || model.rules.empty())
    return predict_tokens(model.params, model.vocab, model.config.effective_pad(), instances);
  const auto chain = rules::compile(model.rules);
  std::vector<Instance> transformed;
  transformed.reserve(instances.size());
  for (const auto& t : rules::apply_batch(chain, instances)) transformed.push_back(rules::lower(t));
  return predict_tokens(model.params, model.vocab, model.config.effective_pad(), transformed);
}

inline Prediction predict(const TrainedModel& model, const Dataset& ds) {
  return predict(model, std::span<const Instance>(ds.instances));
}

inline double accuracy(std::span<const Label> predicted, std::span<const Instance> gold) {
  if (gold.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i].label;
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

/// Seeded split of `ds` into (train, dev) with round(fraction * N) dev
/// examples; both parts keep the original relative order.
inline std::pair<Dataset, Dataset> split_dev(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw Error(Errc::InvalidConfig, "dev fraction must be in [0, 1)");
  const auto n_dev = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, {0x646576ULL});
  rng.shuffle(order);
  std::vector<char> is_dev(ds.size(), 0);
  for (std::size_t i = 0; i < n_dev; ++i) is_dev[order[i]] = 1;
  Dataset train{ds.name + ".train", {}}, dev{ds.name + ".dev", {}};
  for (std::size_t i = 0; i < ds.size(); ++i) (is_dev[i] ? dev : train).instances.push_back(ds.instances[i]);
  return {std::move(train), std::move(dev)};
}

using ProgressFn = std::function<void(const EpochLog&)>;

/// Mini-batch training per the feature-extraction scheme: every batch is
/// passed through the rule chain before the forward pass. The vocabulary is
/// built over the transformed training set (what the network actually sees).
/// Returns the parameters of the best dev-accuracy epoch (earliest on ties);
/// with an empty dev set all epochs run and the last parameters are returned.
inline TrainedModel train(const TrainConfig& config, const Dataset& train_set, const Dataset& dev,
                          const RuleSet& ruleset, const ProgressFn& progress = {}) {
  config.validate();
  if (train_set.empty()) throw Error(Errc::EmptyDataset, "training set is empty");
  const auto chain = rules::compile(ruleset);

  TrainedModel model;
  model.rules = ruleset;
  model.config = config;
  model.vocab = corpus::build_vocab(rules::transform_dataset(chain, train_set), config.min_freq);

  neural::ModelShape shape{model.vocab.size(), config.dim, config.widths, config.maps};
  Rng init_rng = Rng::derive(config.seed, {0x696e6974ULL});
  if (!config.embeddings_path.empty()) {
    const auto table = corpus::load_embeddings(config.embeddings_path, model.vocab, config.seed);
    model.params = neural::init_params(shape, init_rng, &table);
  } else {
    model.params = neural::init_params(shape, init_rng);
  }

  auto state = neural::OptimizerState::fresh(model.params.size(), config.optimizer);
  const std::size_t pad = config.effective_pad();
  const std::size_t N = train_set.size();
  std::vector<std::size_t> order(N);

  ModelParams best = model.params;
  double best_acc = -1.0;
  std::size_t stale = 0;

  std::vector<Instance> batch;
  std::vector<corpus::EncodedInstance> encoded;
  std::vector<Label> labels;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = Rng::derive(config.seed, {0x73687566ULL, epoch});
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t lo = 0, b = 0; lo < N; lo += config.batch_size, ++b) {
      const std::size_t hi = std::min(N, lo + config.batch_size);
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(train_set.instances[order[i]]);

      // D* for this batch, then p_theta(Y | X*), then the parameter update.
      encoded.clear();
      labels.clear();
      for (const auto& t : rules::apply_batch(chain, batch)) {
        encoded.push_back(corpus::encode(t.tokens, t.label, model.vocab, pad));
        labels.push_back(t.label);
      }
      const std::uint64_t batch_seed = Rng::derive(config.seed, {0x626174ULL, epoch, b}).next();
      auto lg = neural::backward(model.params, encoded, labels, config.dropout, batch_seed);
      if (!std::isfinite(lg.loss)) {
        std::string ids;
        for (const auto& inst : batch) ids += (ids.empty() ? "" : ",") + std::to_string(inst.id);
        throw Error(Errc::NonFiniteLoss, "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                             " (instance ids " + ids + ")");
      }
      neural::adadelta_step(state, model.params, lg.grads);
      loss_sum += lg.loss * static_cast<double>(hi - lo);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(N);
    if (!dev.empty()) {
      TrainedModel probe_view{model.params, model.vocab, model.rules, model.config, {}, 0};
      entry.dev_accuracy = accuracy(predict(probe_view, dev).labels, dev.instances);
    }
    model.log.push_back(entry);
    if (progress) progress(entry);

    if (dev.empty()) {
      model.best_epoch = epoch;
      continue;
    }
    if (entry.dev_accuracy > best_acc) {
      best_acc = entry.dev_accuracy;
      best = model.params;
      model.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  if (!dev.empty()) model.params = std::move(best);
  return model;
}

}  // namespace nlrf::pipeline
