#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "nlrf/evalkit.hpp"
#include "support/synthetic.hpp"

namespace {

using namespace nlrf;
using namespace nlrf::eval;

TEST(Confusion, Example) {
  const std::vector<int> p{1, 1, 0, 1, 0}, g{1, 0, 0, 1, 1};
  EXPECT_EQ(confusion(p, g), (ConfusionCounts{2, 1, 1, 1}));
  EXPECT_EQ(confusion(g, g), (ConfusionCounts{3, 0, 0, 2}));
}

TEST(Confusion, ShapeErrors) {
  const std::vector<int> a{1, 0}, b{1}, none;
  EXPECT_THROW(confusion(a, b), Error);
  EXPECT_THROW(confusion(none, none), Error);
}

TEST(Confusion, MatchesBruteForceCounting) {
  Rng rng(17);
  for (std::size_t n : {1u, 7u, 1000u, 10000u}) {
    std::vector<int> p(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng.below(2));
      g[i] = static_cast<int>(rng.below(2));
    }
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp += p[i] == 1 && g[i] == 1;
      fp += p[i] == 1 && g[i] == 0;
      fn += p[i] == 0 && g[i] == 1;
      tn += p[i] == 0 && g[i] == 0;
    }
    const auto c = confusion(p, g);
    EXPECT_EQ(c, (ConfusionCounts{tp, fp, fn, tn}));
    const auto m = metrics(c);
    EXPECT_EQ(m.accuracy, static_cast<double>(tp + tn) / static_cast<double>(n));
  }
}

TEST(Metrics, Example) {
  const auto m = metrics({8, 2, 1, 9});
  EXPECT_DOUBLE_EQ(m.precision, 0.8);
  EXPECT_DOUBLE_EQ(m.recall, 8.0 / 9.0);
  EXPECT_NEAR(m.f1, 0.8421052631578947, 1e-15);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.85);
  EXPECT_FALSE(m.degenerate);
}

TEST(Metrics, ZeroDenominators) {
  const auto m = metrics({0, 0, 3, 7});
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.f1, 0.0);
  EXPECT_EQ(m.accuracy, 0.7);
  EXPECT_TRUE(m.degenerate);
  EXPECT_THROW(metrics({}), Error);
}

TEST(Metrics, MatchesFormulaOnRandomCounts) {
  Rng rng(5);
  for (int iter = 0; iter < 2000; ++iter) {
    const ConfusionCounts c{rng.below(50) + 1, rng.below(50), rng.below(50), rng.below(50)};
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn),
                 tn = static_cast<double>(c.tn);
    const double p = tp / (tp + fp), r = tp / (tp + fn);
    const auto m = metrics(c);
    EXPECT_NEAR(m.precision, p, 1e-12);
    EXPECT_NEAR(m.recall, r, 1e-12);
    EXPECT_NEAR(m.f1, 2 * tp / (2 * tp + fp + fn), 1e-12);
    EXPECT_NEAR(m.accuracy, (tp + tn) / (tp + fp + fn + tn), 1e-12);
  }
}

corpus::Dataset labelled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  corpus::Dataset ds{"fixture", {}};
  for (std::size_t i = 0; i < n; ++i)
    ds.instances.push_back({i, corpus::tokenize("w" + std::to_string(i)), static_cast<int>(rng.below(2))});
  return ds;
}

TEST(KFold, Examples) {
  const auto ten = kfold_split(labelled(10, 1), 10, 3);
  for (const auto& f : ten.folds) EXPECT_EQ(f.size(), 1u);

  const auto mr = kfold_split(labelled(10662, 1), 10, 3);
  std::vector<std::size_t> sizes;
  for (const auto& f : mr.folds) sizes.push_back(f.size());
  EXPECT_EQ(std::count(sizes.begin(), sizes.end(), 1066u), 8);
  EXPECT_EQ(std::count(sizes.begin(), sizes.end(), 1067u), 2);

  EXPECT_EQ(kfold_split(labelled(50, 1), 5, 9).folds, kfold_split(labelled(50, 1), 5, 9).folds);
  EXPECT_NE(kfold_split(labelled(50, 1), 5, 9).folds, kfold_split(labelled(50, 1), 5, 10).folds);
}

TEST(KFold, Errors) {
  try {
    kfold_split(labelled(3, 1), 4, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TooFewInstances);
  }
  EXPECT_THROW(kfold_split(labelled(3, 1), 1, 1), Error);
}

TEST(KFold, PartitionProperties) {
  for (std::size_t k = 2; k <= 10; ++k) {
    for (std::size_t n = k; n <= 1000; n += (n < 40 ? 1 : 37)) {
      const auto ds = labelled(n, n);
      for (bool strat : {false, true}) {
        const auto plan = kfold_split(ds, k, n * 31 + k, strat);
        ASSERT_EQ(plan.folds.size(), k);
        std::vector<std::size_t> all;
        std::size_t lo = n, hi = 0;
        for (const auto& f : plan.folds) {
          all.insert(all.end(), f.begin(), f.end());
          lo = std::min(lo, f.size());
          hi = std::max(hi, f.size());
        }
        std::sort(all.begin(), all.end());
        ASSERT_EQ(all.size(), n);
        for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(all[i], i);
        ASSERT_LE(hi - lo, 1u) << "k=" << k << " n=" << n;
      }
    }
  }
}

TEST(KFold, StratifiedBalancesClasses) {
  const auto ds = labelled(503, 4);
  const auto plan = kfold_split(ds, 10, 1, true);
  std::vector<std::size_t> pos;
  for (const auto& f : plan.folds) {
    std::size_t c = 0;
    for (auto id : f) c += ds.instances[id].label;
    pos.push_back(c);
  }
  EXPECT_LE(*std::max_element(pos.begin(), pos.end()) - *std::min_element(pos.begin(), pos.end()), 1u);
}

TEST(FoldDatasets, HoldsOutExactlyTheFold) {
  const auto ds = labelled(23, 2);
  const auto plan = kfold_split(ds, 4, 2);
  for (std::size_t f = 0; f < 4; ++f) {
    const auto [tr, te] = fold_datasets(ds, plan, f);
    EXPECT_EQ(te.size(), plan.folds[f].size());
    EXPECT_EQ(tr.size() + te.size(), ds.size());
    const std::set<std::size_t> ids(plan.folds[f].begin(), plan.folds[f].end());
    for (const auto& i : te.instances) EXPECT_TRUE(ids.count(i.id));
    for (const auto& i : tr.instances) EXPECT_FALSE(ids.count(i.id));
  }
}

TEST(Ci95, TQuantiles) {
  // 40-digit reference values
  EXPECT_NEAR(t_quantile_975(9), 2.2621571627982055, 1e-12);
  EXPECT_NEAR(t_quantile_975(1), 12.706204736174704, 1e-12);
  EXPECT_NEAR(t_quantile_975(2), 4.3026527297494637, 1e-12);
}

TEST(Ci95, Examples) {
  const std::vector<double> flat(10, 0.8);
  const auto c0 = ci95(flat);
  EXPECT_NEAR(c0.mean, 0.8, 1e-15);
  EXPECT_EQ(c0.half_width, 0.0);

  std::vector<double> seq;
  for (int i = 0; i < 10; ++i) seq.push_back(0.80 + 0.01 * i);
  const auto c = ci95(seq);
  EXPECT_EQ(c.n, 10u);
  EXPECT_NEAR(c.mean, 0.845, 1e-12);
  EXPECT_NEAR(c.half_width, 0.021658505896681696, 1e-9);
  EXPECT_NEAR(c.half_width, 2.2621571627982055 * 0.030276503540974917 / std::sqrt(10.0), 1e-12);
}

TEST(Ci95, TooFewSamples) {
  const std::vector<double> one{0.5};
  try {
    ci95(one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TooFewSamples);
  }
}

TEST(Ci95, TranslationAndScaleEquivariance) {
  Rng rng(8);
  for (int iter = 0; iter < 200; ++iter) {
    std::vector<double> xs(2 + rng.below(20));
    for (auto& x : xs) x = rng.uniform();
    const auto base = ci95(xs);
    const double shift = rng.uniform(-5, 5), scale = rng.uniform(0.1, 4);
    std::vector<double> moved = xs, stretched = xs;
    for (auto& x : moved) x += shift;
    for (auto& x : stretched) x = base.mean + scale * (x - base.mean);
    const auto m = ci95(moved), s = ci95(stretched);
    EXPECT_NEAR(m.mean, base.mean + shift, 1e-12);
    EXPECT_NEAR(m.half_width, base.half_width, 1e-12);
    EXPECT_NEAR(s.mean, base.mean, 1e-12);
    EXPECT_NEAR(s.half_width, scale * base.half_width, 1e-12);
  }
}

// A model that always predicts class 1: zero network, positive class bias.
TrainedModel always_positive() {
  TrainedModel m;
  m.config.widths = {1};
  m.config.dim = 1;
  m.config.maps = 1;
  m.params = neural::ModelParams(neural::ModelShape{corpus::Vocab::kReserved, 1, {1}, 1});
  m.params.dense_bias()[1] = 1.0;
  return m;
}

corpus::Dataset fixture_ten() {
  const std::vector<std::pair<std::string, int>> rows{
      {"great film", 1},          {"good but long", 1},    {"dull", 0},       {"fun cast but weak plot", 0},
      {"boring", 0},              {"charming", 1},         {"bad", 0},        {"slow but moving", 1},
      {"awful script", 0},        {"lovely", 1}};
  corpus::Dataset ds{"ten", {}};
  for (std::size_t i = 0; i < rows.size(); ++i) ds.instances.push_back({i, corpus::tokenize(rows[i].first), rows[i].second});
  return ds;
}

TEST(SubsetEval, MetricsOverExactlyTheMatchingInstances) {
  const auto ds = fixture_ten();
  const auto ruleset = rules::parse_rules(rules::kAButBSource);
  pipeline::TrainConfig cfg;
  cfg.dim = 6;
  cfg.maps = 3;
  cfg.widths = {1, 2};
  cfg.epochs = 3;
  const auto model = pipeline::train(cfg, ds, {}, ruleset);

  const std::vector<corpus::Instance> manual{ds.instances[1], ds.instances[3], ds.instances[7]};
  const auto pred = pipeline::predict(model, manual);
  EXPECT_EQ(subset_eval(model, ds, ruleset), metrics(confusion(pred.labels, gold_labels(manual))));
  EXPECT_EQ(rule_stats(ds, ruleset).front().matched, 3u);

  auto bigger = ds;
  bigger.instances.push_back({10, corpus::tokenize("no pivot at all"), 1});
  EXPECT_EQ(subset_eval(model, bigger, ruleset), subset_eval(model, ds, ruleset));
}

TEST(SubsetEval, AllMatchingEqualsWhole) {
  const auto model = always_positive();
  auto ds = fixture_ten();
  for (auto& i : ds.instances) i.tokens = corpus::tokenize("x but y");
  const auto ruleset = rules::parse_rules(rules::kAButBSource);
  const auto pred = pipeline::predict(model, ds);
  EXPECT_EQ(subset_eval(model, ds, ruleset), metrics(confusion(pred.labels, gold_labels(ds.instances))));
}

TEST(SubsetEval, EmptySubset) {
  auto ds = fixture_ten();
  ds.instances = {ds.instances[0], ds.instances[2]};
  try {
    subset_eval(always_positive(), ds, rules::parse_rules(rules::kAButBSource));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptySubset);
  }
}

TEST(CrossValidate, ConstantModelGivesFoldPositiveRates) {
  const auto ds = labelled(203, 12);
  pipeline::TrainConfig cfg;
  cfg.seed = 5;
  const auto ruleset = rules::parse_rules(rules::kAButBSource);
  std::size_t fits = 0;
  const auto rep = cross_validate_with(cfg, ds, 10, ruleset, [&](auto&&...) {
    ++fits;
    return always_positive();
  });
  EXPECT_EQ(fits, 10u);
  const auto plan = kfold_split(ds, 10, cfg.seed);
  std::vector<double> rates;
  for (std::size_t f = 0; f < 10; ++f) {
    std::size_t pos = 0;
    for (auto id : plan.folds[f]) pos += ds.instances[id].label;
    const double rate = static_cast<double>(pos) / static_cast<double>(plan.folds[f].size());
    rates.push_back(rate);
    EXPECT_EQ(rep.folds[f].whole.accuracy, rate);
    EXPECT_EQ(rep.folds[f].whole.recall, 1.0);
    EXPECT_EQ(rep.folds[f].test_size, plan.folds[f].size());
  }
  const auto ci = ci95(rates);
  EXPECT_NEAR(rep.whole.accuracy.mean, ci.mean, 1e-15);
  EXPECT_NEAR(rep.whole.accuracy.half_width, ci.half_width, 1e-15);
  EXPECT_FALSE(rep.subset.has_value());  // no fixture sentence has "but"
}

TEST(CrossValidate, InnerDevSplitAndFoldSeeds) {
  const auto ds = labelled(100, 3);
  pipeline::TrainConfig cfg;
  cfg.seed = 40;
  std::vector<std::uint64_t> seeds;
  cross_validate_with(cfg, ds, 4, RuleSet{}, [&](const TrainConfig& c, const Dataset& tr, const Dataset& dev) {
    seeds.push_back(c.seed);
    EXPECT_EQ(tr.size() + dev.size(), 75u);
    EXPECT_EQ(dev.size(), 8u);
    return always_positive();
  });
  EXPECT_EQ(seeds, (std::vector<std::uint64_t>{40, 41, 42, 43}));
}

pipeline::TrainConfig cv_config() {
  pipeline::TrainConfig c;
  c.epochs = 3;
  c.dim = 8;
  c.maps = 4;
  c.widths = {2, 3};
  c.batch_size = 20;
  return c;
}

TEST(CrossValidate, TwoFoldStructureAndDeterminism) {
  const auto ds = synth::make_synthetic({synth::SyntheticKind::RuleConsistent, 20, 0.9, 6});
  const auto ruleset = rules::parse_rules(rules::kAButBSource);
  const auto a = cross_validate(cv_config(), ds, ruleset, 2);
  ASSERT_EQ(a.folds.size(), 2u);
  EXPECT_EQ(a.folds[0].test_size + a.folds[1].test_size, 20u);
  EXPECT_EQ(a.folds[0].subset_size, a.folds[0].test_size);  // every sentence has "but"
  const auto b = cross_validate(cv_config(), ds, ruleset, 2, {false, 2});
  for (std::size_t f = 0; f < 2; ++f) {
    EXPECT_EQ(a.folds[f].whole, b.folds[f].whole);
    EXPECT_EQ(a.folds[f].subset, b.folds[f].subset);
  }
  EXPECT_EQ(a.whole.f1.mean, b.whole.f1.mean);
}

TEST(CrossValidate, PropagatesFitErrors) {
  const auto ds = labelled(20, 1);
  EXPECT_THROW(cross_validate_with(cv_config(), ds, 2, RuleSet{},
                                   [](auto&&...) -> TrainedModel { throw Error(Errc::NonFiniteLoss, "boom"); },
                                   {false, 2}),
               Error);
}

TEST(GainDrop, EmptyRuleSetIsIdenticallyZero) {
  const auto ds = synth::make_synthetic({synth::SyntheticKind::RuleConsistent, 40, 0.9, 7});
  const auto rep = gain_drop(cv_config(), ds, RuleSet{}, 2);
  ASSERT_EQ(rep.whole.size(), 4u);
  for (const auto& d : rep.whole) EXPECT_EQ(d.delta, 0.0);
  for (const auto& f : rep.folds)
    for (const auto& d : f.whole) EXPECT_EQ(d.delta, 0.0);
  EXPECT_TRUE(rep.subset.empty());
}

TEST(GainDrop, DeltaIsWithMinusWithout) {
  const auto ds = synth::make_synthetic({synth::SyntheticKind::RuleConsistent, 40, 0.9, 8});
  const auto rep = gain_drop(cv_config(), ds, rules::parse_rules(rules::kAButBSource), 2);
  ASSERT_EQ(rep.subset.size(), 4u);
  for (const auto& d : rep.whole) EXPECT_EQ(d.delta, d.with_rules - d.without_rules);
  for (const auto& d : rep.subset) EXPECT_EQ(d.delta, d.with_rules - d.without_rules);
  EXPECT_EQ(rep.whole[3].with_rules, rep.with_rules.whole.accuracy.mean);
}

TEST(Reports, TablesAndKeyValues) {
  std::ostringstream t;
  write_metric_table(t, {{"cnn", metrics({8, 2, 1, 9})}});
  EXPECT_EQ(t.str(), "method\tprecision\trecall\tf1\taccuracy\ncnn\t0.800\t0.889\t0.842\t0.850\n");
  std::ostringstream kv;
  write_kv(kv, "m", metrics({8, 2, 1, 9}));
  EXPECT_NE(kv.str().find("m.precision=0.8\n"), std::string::npos);
  EXPECT_NE(kv.str().find("m.accuracy=0.85\n"), std::string::npos);
}

}  // namespace
