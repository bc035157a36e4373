#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "nlrf/checkpoint.hpp"
#include "nlrf/pipeline.hpp"
#include "support/synthetic.hpp"

namespace {

using namespace nlrf;
using namespace nlrf::pipeline;

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 4;
  c.batch_size = 25;
  c.dim = 12;
  c.widths = {2, 3};
  c.maps = 6;
  c.seed = 7;
  return c;
}

RuleSet a_but_b() { return rules::parse_rules(rules::kAButBSource); }

corpus::Dataset corpus_of(std::size_t n, std::uint64_t seed,
                          synth::SyntheticKind kind = synth::SyntheticKind::RuleConsistent) {
  return synth::make_synthetic({kind, n, 0.9, seed});
}

TEST(Train, IsDeterministic) {
  const auto data = corpus_of(200, 1);
  const auto [tr, dev] = split_dev(data, 0.1, 3);
  const auto a = train(small_config(), tr, dev, a_but_b());
  const auto b = train(small_config(), tr, dev, a_but_b());
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
}

TEST(Train, SeedChangesTheModel) {
  const auto data = corpus_of(100, 1);
  auto other = small_config();
  other.seed = 8;
  EXPECT_NE(train(small_config(), data, {}, a_but_b()).params, train(other, data, {}, a_but_b()).params);
}

TEST(Train, EmptyRuleSetOnRuleFreeDataMatchesRules) {
  // Without any "but", the rule chain is the identity, so both runs coincide.
  auto data = corpus_of(120, 2);
  for (auto& inst : data.instances)
    std::erase_if(inst.tokens, [](const corpus::Token& t) { return t.text == "but"; });
  const auto with = train(small_config(), data, {}, a_but_b());
  const auto without = train(small_config(), data, {}, RuleSet{});
  EXPECT_EQ(with.params, without.params);
  EXPECT_EQ(with.log, without.log);
}

TEST(Train, RuleLocationEquivalence) {
  const auto data = corpus_of(200, 3);
  const auto [tr, dev] = split_dev(data, 0.1, 3);
  const auto chain = rules::compile(a_but_b());
  const auto online = train(small_config(), tr, dev, a_but_b());
  const auto offline =
      train(small_config(), rules::transform_dataset(chain, tr), rules::transform_dataset(chain, dev), RuleSet{});
  EXPECT_EQ(online.vocab, offline.vocab);
  EXPECT_EQ(online.params, offline.params);
  EXPECT_EQ(online.log, offline.log);
}

TEST(Train, ReturnsBestDevEpoch) {
  const auto data = corpus_of(300, 4);
  const auto [tr, dev] = split_dev(data, 0.2, 4);
  auto cfg = small_config();
  cfg.epochs = 8;
  cfg.patience = 8;
  const auto m = train(cfg, tr, dev, a_but_b());
  const auto best = std::max_element(m.log.begin(), m.log.end(), [](const EpochLog& a, const EpochLog& b) {
    return a.dev_accuracy < b.dev_accuracy;
  });
  EXPECT_EQ(m.best_epoch, best->epoch);
  EXPECT_EQ(accuracy(predict(m, dev).labels, dev.instances), best->dev_accuracy);
}

TEST(Train, EarlyStoppingHonoursPatience) {
  const auto data = corpus_of(200, 5);
  const auto [tr, dev] = split_dev(data, 0.1, 5);
  auto cfg = small_config();
  cfg.epochs = 40;
  cfg.patience = 2;
  const auto m = train(cfg, tr, dev, a_but_b());
  ASSERT_LT(m.log.size(), 40u);
  EXPECT_EQ(m.log.size(), m.best_epoch + cfg.patience);
}

TEST(Train, WithoutDevRunsEveryEpoch) {
  const auto m = train(small_config(), corpus_of(80, 6), {}, a_but_b());
  EXPECT_EQ(m.log.size(), 4u);
  EXPECT_EQ(m.best_epoch, 4u);
  for (const auto& e : m.log) EXPECT_TRUE(std::isnan(e.dev_accuracy));
}

TEST(Train, ProgressCallbackSeesEveryEpoch) {
  std::vector<EpochLog> seen;
  const auto m = train(small_config(), corpus_of(60, 7), {}, a_but_b(), [&](const EpochLog& e) { seen.push_back(e); });
  EXPECT_EQ(seen, m.log);
}

TEST(Train, RejectsBadInput) {
  try {
    train(small_config(), corpus::Dataset{}, {}, a_but_b());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyDataset);
  }
  auto cfg = small_config();
  cfg.dropout = 1.0;
  EXPECT_THROW(train(cfg, corpus_of(10, 1), {}, a_but_b()), Error);
  EXPECT_THROW(train(small_config(), corpus_of(10, 1), {},
                     rules::parse_rules("rule s (confidence 0.5): on token \"but\" keep after;")),
               Error);
}

TEST(Train, LearnsTheSyntheticCorpus) {
  const auto data = corpus_of(1000, 8);
  auto cfg = small_config();
  cfg.epochs = 20;
  cfg.dim = 16;
  cfg.maps = 8;
  const auto m = train(cfg, data, {}, a_but_b());
  EXPECT_GE(accuracy(predict(m, data).labels, data.instances), 0.95);
  EXPECT_LT(m.log.back().train_loss, m.log.front().train_loss);
}

TEST(Predict, TieGoesToClassZero) {
  EXPECT_EQ(decide({0.5, 0.5}), 0);
  EXPECT_EQ(decide({0.4, 0.6}), 1);
  EXPECT_EQ(decide({0.6, 0.4}), 0);
}

TEST(Predict, RulesApplyAtInference) {
  const auto m = train(small_config(), corpus_of(100, 9), {}, a_but_b());
  const corpus::Instance full{0, corpus::tokenize("you can taste it , but there 's no fizz"), 0};
  const corpus::Instance b_only{0, corpus::tokenize("there 's no fizz"), 0};
  const std::vector<corpus::Instance> one{full}, other{b_only};
  EXPECT_EQ(predict(m, one).distribution, predict_tokens(m.params, m.vocab, m.config.effective_pad(), other).distribution);

  auto off = m;
  off.config.apply_rules_at_inference = false;
  EXPECT_EQ(predict(off, one).distribution,
            predict_tokens(m.params, m.vocab, m.config.effective_pad(), one).distribution);

  const std::vector<corpus::Instance> plain{{0, corpus::tokenize("a great film"), 1}};
  EXPECT_EQ(predict(m, plain).distribution, predict(off, plain).distribution);
}

TEST(Predict, UnknownWordsAndShortSentences) {
  const auto m = train(small_config(), corpus_of(60, 10), {}, a_but_b());
  const std::vector<corpus::Instance> odd{{0, corpus::tokenize("zzz"), 1}, {1, corpus::tokenize("qq rr ss tt"), 0}};
  const auto p = predict(m, odd);
  ASSERT_EQ(p.labels.size(), 2u);
  for (const auto& r : p.distribution.rows) EXPECT_NEAR(r[0] + r[1], 1.0, 1e-12);
}

TEST(SplitDev, PartitionsAndIsSeeded) {
  const auto data = corpus_of(101, 11);
  const auto [tr, dev] = split_dev(data, 0.1, 1);
  EXPECT_EQ(dev.size(), 10u);
  EXPECT_EQ(tr.size() + dev.size(), data.size());
  std::vector<std::size_t> ids;
  for (const auto& i : tr.instances) ids.push_back(i.id);
  for (const auto& i : dev.instances) ids.push_back(i.id);
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) EXPECT_EQ(ids[i], i);
  EXPECT_EQ(split_dev(data, 0.1, 1).second.instances.front().id, dev.instances.front().id);
}

class Checkpoint : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto data = corpus_of(120, 12);
    const auto [tr, dev] = split_dev(data, 0.1, 1);
    model_ = new TrainedModel(train(small_config(), tr, dev, a_but_b()));
  }
  static void TearDownTestSuite() { delete model_; }
  static TrainedModel* model_;
};
TrainedModel* Checkpoint::model_ = nullptr;

TEST_F(Checkpoint, RoundTripIsBitIdentical) {
  const auto bytes = serialize_model(*model_);
  const auto back = deserialize_model(bytes);
  EXPECT_EQ(back.params, model_->params);
  EXPECT_EQ(back.vocab, model_->vocab);
  EXPECT_EQ(back.rules, model_->rules);
  EXPECT_EQ(back.config, model_->config);
  EXPECT_EQ(back.log, model_->log);
  EXPECT_EQ(back.best_epoch, model_->best_epoch);
  EXPECT_EQ(serialize_model(back), bytes);
}

TEST_F(Checkpoint, FileLayoutSize) {
  const auto path = std::filesystem::temp_directory_path() / "nlrf_checkpoint_test.bin";
  save_model(*model_, path);
  const auto manifest = checkpoint_manifest(*model_);
  EXPECT_EQ(std::filesystem::file_size(path),
            kCheckpointHeaderBytes + manifest.size() + 8 * model_->params.size() + kCheckpointTrailerBytes);
  EXPECT_EQ(load_model(path).params, model_->params);
  std::filesystem::remove(path);
}

TEST_F(Checkpoint, RejectsForeignFiles) {
  auto bytes = serialize_model(*model_);
  bytes[0] = 'X';
  try {
    deserialize_model(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IncompatibleCheckpoint);
  }
  bytes = serialize_model(*model_);
  bytes[4] = 9;
  try {
    deserialize_model(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IncompatibleCheckpoint);
  }
}

TEST_F(Checkpoint, DetectsTruncationAndDamage) {
  const auto bytes = serialize_model(*model_);
  for (std::size_t cut : {std::size_t{6}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      deserialize_model(std::string_view(bytes).substr(0, cut));
      FAIL() << cut;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::CorruptCheckpoint) << cut;
    }
  }
  auto flipped = bytes;
  flipped[bytes.size() - 20] ^= 0x01;
  try {
    deserialize_model(flipped);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::CorruptCheckpoint);
  }
}

TEST_F(Checkpoint, LoadedModelPredictsIdentically) {
  const auto back = deserialize_model(serialize_model(*model_));
  const auto data = corpus_of(50, 99);
  EXPECT_EQ(predict(back, data).distribution, predict(*model_, data).distribution);
}

}  // namespace
