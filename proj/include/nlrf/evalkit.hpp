#pragma once

// Positive-class metrics, rule statistics, A-but-B subset evaluation,
// k-fold cross-validation with Student-t confidence intervals, and the
// with/without-rules gain/drop analysis.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "nlrf/corpus.hpp"
#include "nlrf/error.hpp"
#include "nlrf/io.hpp"
#include "nlrf/pipeline.hpp"
#include "nlrf/random.hpp"
#include "nlrf/rules.hpp"

namespace nlrf::eval {

using corpus::Dataset;
using corpus::Instance;
using corpus::Label;
using pipeline::TrainConfig;
using pipeline::TrainedModel;
using rules::RuleSet;

/// Positive class is label 1.
struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t total() const noexcept { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(std::span<const Label> preds, std::span<const Label> golds) {
  if (preds.size() != golds.size())
    throw Error(Errc::ShapeError, "prediction count " + std::to_string(preds.size()) + " != gold count " +
                                      std::to_string(golds.size()));
  if (preds.empty()) throw Error(Errc::ShapeError, "nothing to evaluate");
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == 1, g = golds[i] == 1;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  /// Set when a zero denominator forced a metric to 0.
  bool degenerate = false;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

inline constexpr std::array<std::string_view, 4> kMetricNames{"precision", "recall", "f1", "accuracy"};

inline std::array<double, 4> as_array(const Metrics& m) { return {m.precision, m.recall, m.f1, m.accuracy}; }

/// Zero denominators yield 0 and set `degenerate`.
inline Metrics metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw Error(Errc::ShapeError, "empty confusion counts");
  Metrics m;
  auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.f1 = 0.0;
    m.degenerate = true;
  }
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  return m;
}

inline std::vector<Label> gold_labels(std::span<const Instance> instances) {
  std::vector<Label> out;
  out.reserve(instances.size());
  for (const auto& i : instances) out.push_back(i.label);
  return out;
}

struct RuleStat {
  std::string rule;
  std::size_t matched = 0;  // instances with at least one grounding
  std::size_t total = 0;
};

inline std::vector<RuleStat> rule_stats(const Dataset& ds, const RuleSet& set) {
  std::vector<RuleStat> out;
  for (const auto& r : set.rules) {
    RuleStat s{r.name, 0, ds.size()};
    for (const auto& inst : ds.instances) s.matched += rules::ground(r, inst).fired();
    out.push_back(std::move(s));
  }
  return out;
}

/// Instances on which at least one rule grounds, in dataset order.
inline std::vector<Instance> rule_subset(std::span<const Instance> instances, const RuleSet& set) {
  std::vector<Instance> out;
  for (const auto& inst : instances)
    if (rules::any_grounds(set, inst)) out.push_back(inst);
  return out;
}

inline Metrics subset_eval(const TrainedModel& model, const Dataset& ds, const RuleSet& set) {
  const auto subset = rule_subset(ds.instances, set);
  if (subset.empty()) throw Error(Errc::EmptySubset, "no instance of '" + ds.name + "' matches any rule");
  const auto pred = pipeline::predict(model, subset);
  return metrics(confusion(pred.labels, gold_labels(subset)));
}

struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> folds;  // instance ids
};

/// Seeded shuffle followed by round-robin assignment. With `stratified`,
/// each class is shuffled separately and the classes are dealt in sequence,
/// which keeps per-class counts balanced as well.
inline FoldPlan kfold_split(const Dataset& ds, std::size_t k, std::uint64_t seed, bool stratified = false) {
  if (k < 2) throw Error(Errc::InvalidConfig, "k must be >= 2");
  if (ds.size() < k)
    throw Error(Errc::TooFewInstances, std::to_string(ds.size()) + " instances cannot fill " + std::to_string(k) + " folds");
  Rng rng = Rng::derive(seed, {0x666f6c64ULL});
  std::vector<std::size_t> order;
  order.reserve(ds.size());
  if (stratified) {
    std::array<std::vector<std::size_t>, 2> by_class;
    for (const auto& inst : ds.instances) by_class[inst.label == 1].push_back(inst.id);
    for (auto& cls : by_class) {
      rng.shuffle(cls);
      order.insert(order.end(), cls.begin(), cls.end());
    }
  } else {
    for (const auto& inst : ds.instances) order.push_back(inst.id);
    rng.shuffle(order);
  }
  FoldPlan plan;
  plan.k = k;
  plan.folds.resize(k);
  for (std::size_t i = 0; i < order.size(); ++i) plan.folds[i % k].push_back(order[i]);
  return plan;
}

/// (train, test) datasets for fold `f` of the plan.
inline std::pair<Dataset, Dataset> fold_datasets(const Dataset& ds, const FoldPlan& plan, std::size_t f) {
  std::unordered_map<std::size_t, std::size_t> fold_of;
  for (std::size_t i = 0; i < plan.folds.size(); ++i)
    for (auto id : plan.folds[i]) fold_of[id] = i;
  Dataset train{ds.name + ".fold" + std::to_string(f) + ".train", {}};
  Dataset test{ds.name + ".fold" + std::to_string(f) + ".test", {}};
  for (const auto& inst : ds.instances) (fold_of.at(inst.id) == f ? test : train).instances.push_back(inst);
  return {std::move(train), std::move(test)};
}

struct CIStat {
  std::size_t n = 0;
  double mean = 0.0;
  double half_width = 0.0;  // two-sided 95%, Student t with n-1 dof

  double lower() const noexcept { return mean - half_width; }
  double upper() const noexcept { return mean + half_width; }
};

inline double t_quantile_975(std::size_t dof) {
  boost::math::students_t dist(static_cast<double>(dof));
  return boost::math::quantile(dist, 0.975);
}

inline CIStat ci95(std::span<const double> samples) {
  const std::size_t n = samples.size();
  if (n < 2) throw Error(Errc::TooFewSamples, "a confidence interval needs at least 2 samples");
  if (std::all_of(samples.begin(), samples.end(), [&](double x) { return x == samples[0]; }))
    return {n, samples[0], 0.0};
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return {n, mean, t_quantile_975(n - 1) * sd / std::sqrt(static_cast<double>(n))};
}

struct MetricSummary {
  CIStat precision, recall, f1, accuracy;

  std::array<CIStat, 4> as_array() const { return {precision, recall, f1, accuracy}; }
};

inline std::optional<MetricSummary> summarize(std::span<const Metrics> rows) {
  if (rows.size() < 2) return std::nullopt;
  std::array<std::vector<double>, 4> cols;
  for (const auto& m : rows) {
    const auto a = as_array(m);
    for (std::size_t j = 0; j < 4; ++j) cols[j].push_back(a[j]);
  }
  return MetricSummary{ci95(cols[0]), ci95(cols[1]), ci95(cols[2]), ci95(cols[3])};
}

struct FoldResult {
  std::size_t fold = 0;
  std::size_t test_size = 0;
  Metrics whole;
  std::size_t subset_size = 0;
  std::optional<Metrics> subset;  // absent when no test instance grounds
};

struct CvReport {
  std::size_t k = 0;
  std::vector<FoldResult> folds;
  MetricSummary whole;
  std::optional<MetricSummary> subset;
};

struct CvOptions {
  bool stratified = false;
  /// Folds trained concurrently; results do not depend on this.
  unsigned workers = 1;
};

/// Generic cross-validation. `fit(fold_config, train, dev)` returns the
/// model for one fold; fold f uses seed config.seed + f and carves
/// config.dev_fraction of its training part as the inner dev split. The
/// subset view covers test instances where any rule of `subset_rules` grounds.
template <class Fit>
CvReport cross_validate_with(const TrainConfig& config, const Dataset& ds, std::size_t k,
                             const RuleSet& subset_rules, Fit&& fit, CvOptions options = {}) {
  const FoldPlan plan = kfold_split(ds, k, config.seed, options.stratified);
  std::vector<FoldResult> results(k);
  std::vector<std::exception_ptr> errors(k);

  auto run_fold = [&](std::size_t f) {
    try {
      TrainConfig fold_config = config;
      fold_config.seed = config.seed + f;
      auto [train_part, test] = fold_datasets(ds, plan, f);
      auto [inner_train, dev] = pipeline::split_dev(train_part, config.dev_fraction, fold_config.seed);
      const TrainedModel model = fit(fold_config, inner_train, dev);

      const auto pred = pipeline::predict(model, test);
      FoldResult r;
      r.fold = f;
      r.test_size = test.size();
      r.whole = metrics(confusion(pred.labels, gold_labels(test.instances)));
      std::vector<Label> sp, sg;
      for (std::size_t i = 0; i < test.size(); ++i) {
        if (rules::any_grounds(subset_rules, test.instances[i])) {
          sp.push_back(pred.labels[i]);
          sg.push_back(test.instances[i].label);
        }
      }
      r.subset_size = sp.size();
      if (!sp.empty()) r.subset = metrics(confusion(sp, sg));
      results[f] = std::move(r);
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(options.workers, static_cast<unsigned>(k)));
  if (workers == 1) {
    for (std::size_t f = 0; f < k; ++f) run_fold(f);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t f = w; f < k; f += workers) run_fold(f);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  CvReport report;
  report.k = k;
  report.folds = std::move(results);
  std::vector<Metrics> whole, subset;
  for (const auto& r : report.folds) {
    whole.push_back(r.whole);
    if (r.subset) subset.push_back(*r.subset);
  }
  report.whole = *summarize(whole);
  report.subset = summarize(subset);
  return report;
}

inline CvReport cross_validate(const TrainConfig& config, const Dataset& ds, const RuleSet& ruleset, std::size_t k,
                               CvOptions options = {}) {
  return cross_validate_with(
      config, ds, k, ruleset,
      [&](const TrainConfig& c, const Dataset& tr, const Dataset& dev) { return pipeline::train(c, tr, dev, ruleset); },
      options);
}

struct MetricDelta {
  std::string metric;
  double with_rules = 0.0;
  double without_rules = 0.0;
  double delta = 0.0;  // with - without; > 0 gain, < 0 drop
};

struct FoldDelta {
  std::size_t fold = 0;
  std::vector<MetricDelta> whole;
  std::vector<MetricDelta> subset;  // empty when the fold has no grounded instance
};

struct GainDropReport {
  std::vector<MetricDelta> whole;   // fold means
  std::vector<MetricDelta> subset;  // fold means; empty without a subset view
  std::vector<FoldDelta> folds;
  CvReport with_rules;
  CvReport without_rules;
};

inline std::vector<MetricDelta> deltas(const Metrics& with, const Metrics& without) {
  std::vector<MetricDelta> out;
  const auto a = as_array(with), b = as_array(without);
  for (std::size_t j = 0; j < 4; ++j) out.push_back({std::string(kMetricNames[j]), a[j], b[j], a[j] - b[j]});
  return out;
}

inline std::vector<MetricDelta> deltas(const MetricSummary& with, const MetricSummary& without) {
  std::vector<MetricDelta> out;
  const auto a = with.as_array(), b = without.as_array();
  for (std::size_t j = 0; j < 4; ++j)
    out.push_back({std::string(kMetricNames[j]), a[j].mean, b[j].mean, a[j].mean - b[j].mean});
  return out;
}

/// Cross-validates twice under identical seeds, with `ruleset` and with no
/// rules, and reports per-metric deltas on the whole test folds and on the
/// instances where the ruleset grounds.
template <class FitFactory>
GainDropReport gain_drop_with(const TrainConfig& config, const Dataset& ds, const RuleSet& ruleset, std::size_t k,
                              FitFactory&& make_fit, CvOptions options = {}) {
  GainDropReport rep;
  rep.with_rules = cross_validate_with(config, ds, k, ruleset, make_fit(ruleset), options);
  rep.without_rules = cross_validate_with(config, ds, k, ruleset, make_fit(RuleSet{}), options);
  rep.whole = deltas(rep.with_rules.whole, rep.without_rules.whole);
  if (rep.with_rules.subset && rep.without_rules.subset)
    rep.subset = deltas(*rep.with_rules.subset, *rep.without_rules.subset);
  for (std::size_t f = 0; f < k; ++f) {
    const auto& a = rep.with_rules.folds[f];
    const auto& b = rep.without_rules.folds[f];
    FoldDelta fd{f, deltas(a.whole, b.whole), {}};
    if (a.subset && b.subset) fd.subset = deltas(*a.subset, *b.subset);
    rep.folds.push_back(std::move(fd));
  }
  return rep;
}

inline GainDropReport gain_drop(const TrainConfig& config, const Dataset& ds, const RuleSet& ruleset, std::size_t k,
                                CvOptions options = {}) {
  return gain_drop_with(
      config, ds, ruleset, k,
      [](const RuleSet& rs) {
        return [rs](const TrainConfig& c, const Dataset& tr, const Dataset& dev) { return pipeline::train(c, tr, dev, rs); };
      },
      options);
}

// ---- report writers ---------------------------------------------------------

inline std::string fixed3(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << v;
  return s.str();
}

inline std::string fixed3(const CIStat& c) { return fixed3(c.mean) + "\xC2\xB1" + fixed3(c.half_width); }

/// Method x metric table, tab-separated.
inline void write_metric_table(std::ostream& out, const std::vector<std::pair<std::string, Metrics>>& rows) {
  out << "method\tprecision\trecall\tf1\taccuracy\n";
  for (const auto& [name, m] : rows)
    out << name << '\t' << fixed3(m.precision) << '\t' << fixed3(m.recall) << '\t' << fixed3(m.f1) << '\t'
        << fixed3(m.accuracy) << '\n';
}

inline void write_summary_table(std::ostream& out, const std::vector<std::pair<std::string, MetricSummary>>& rows) {
  out << "method\tprecision\trecall\tf1\taccuracy\n";
  for (const auto& [name, s] : rows)
    out << name << '\t' << fixed3(s.precision) << '\t' << fixed3(s.recall) << '\t' << fixed3(s.f1) << '\t'
        << fixed3(s.accuracy) << '\n';
}

/// Per-fold rows followed by a mean +- CI row, for one view (whole/subset).
inline void write_cv_table(std::ostream& out, const CvReport& rep, bool subset_view) {
  out << "fold\tn\tprecision\trecall\tf1\taccuracy\n";
  for (const auto& r : rep.folds) {
    const std::optional<Metrics> m = subset_view ? r.subset : std::optional<Metrics>(r.whole);
    out << r.fold << '\t' << (subset_view ? r.subset_size : r.test_size);
    if (m) {
      out << '\t' << fixed3(m->precision) << '\t' << fixed3(m->recall) << '\t' << fixed3(m->f1) << '\t'
          << fixed3(m->accuracy) << '\n';
    } else {
      out << "\t-\t-\t-\t-\n";
    }
  }
  const std::optional<MetricSummary> s = subset_view ? rep.subset : std::optional<MetricSummary>(rep.whole);
  if (s)
    out << "mean\t" << rep.folds.size() << '\t' << fixed3(s->precision) << '\t' << fixed3(s->recall) << '\t'
        << fixed3(s->f1) << '\t' << fixed3(s->accuracy) << '\n';
}

inline void write_delta_table(std::ostream& out, const std::vector<MetricDelta>& whole,
                              const std::vector<MetricDelta>& subset) {
  out << "view\tmetric\twith_rules\twithout_rules\tdelta\n";
  auto rows = [&](std::string_view view, const std::vector<MetricDelta>& ds) {
    for (const auto& d : ds)
      out << view << '\t' << d.metric << '\t' << fixed3(d.with_rules) << '\t' << fixed3(d.without_rules) << '\t'
          << fixed3(d.delta) << '\n';
  };
  rows("whole", whole);
  rows("subset", subset);
}

inline void write_kv(std::ostream& out, std::string_view key, double v) {
  out << key << '=' << io::format_double(v) << '\n';
}

inline void write_kv(std::ostream& out, const std::string& prefix, const Metrics& m) {
  const auto a = as_array(m);
  for (std::size_t j = 0; j < 4; ++j) write_kv(out, prefix + "." + std::string(kMetricNames[j]), a[j]);
}

inline void write_kv(std::ostream& out, const std::string& prefix, const MetricSummary& s) {
  const auto a = s.as_array();
  for (std::size_t j = 0; j < 4; ++j) {
    const std::string key = prefix + "." + std::string(kMetricNames[j]);
    write_kv(out, key + ".mean", a[j].mean);
    write_kv(out, key + ".ci95", a[j].half_width);
  }
}

inline void write_kv(std::ostream& out, const std::string& prefix, const CvReport& rep) {
  out << prefix << ".k=" << rep.k << '\n';
  for (const auto& r : rep.folds) {
    const std::string fp = prefix + ".fold." + std::to_string(r.fold);
    out << fp << ".n=" << r.test_size << '\n';
    write_kv(out, fp + ".whole", r.whole);
    out << fp << ".subset.n=" << r.subset_size << '\n';
    if (r.subset) write_kv(out, fp + ".subset", *r.subset);
  }
  write_kv(out, prefix + ".whole", rep.whole);
  if (rep.subset) write_kv(out, prefix + ".subset", *rep.subset);
}

inline void write_kv(std::ostream& out, const std::string& prefix, const std::vector<MetricDelta>& ds) {
  for (const auto& d : ds) {
    const std::string key = prefix + "." + d.metric;
    write_kv(out, key + ".with", d.with_rules);
    write_kv(out, key + ".without", d.without_rules);
    write_kv(out, key + ".delta", d.delta);
  }
}

inline void write_kv(std::ostream& out, const std::string& prefix, const GainDropReport& rep) {
  write_kv(out, prefix + ".whole", rep.whole);
  write_kv(out, prefix + ".subset", rep.subset);
  for (const auto& f : rep.folds) {
    write_kv(out, prefix + ".fold." + std::to_string(f.fold) + ".whole", f.whole);
    write_kv(out, prefix + ".fold." + std::to_string(f.fold) + ".subset", f.subset);
  }
  write_kv(out, prefix + ".with_rules", rep.with_rules);
  write_kv(out, prefix + ".without_rules", rep.without_rules);
}

}  // namespace nlrf::eval
