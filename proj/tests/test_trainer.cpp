#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support.hpp"

using namespace tsmi;

namespace {

TEST(Evaluate, PerfectAndConfusion) {
  auto r = evaluate_predictions({0, 1, 2, 2}, {0, 1, 2, 2}, 3);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.confusion[2][2], 2u);
  r = evaluate_predictions({0, 1, 2, 2}, {1, 1, 0, 2}, 3);
  EXPECT_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.confusion[0][1], 1u);
  EXPECT_EQ(r.confusion[2][0], 1u);
  EXPECT_THROW(evaluate_predictions({}, {}, 3), std::invalid_argument);
}

TEST(Evaluate, RandomPredictionsNearChance) {
  Rng rng(11, "chance");
  std::vector<int> truth, pred;
  for (int i = 0; i < 9000; ++i) {
    truth.push_back(i % 9);
    pred.push_back(static_cast<int>(rng.below(9)));
  }
  EXPECT_NEAR(evaluate_predictions(truth, pred, 9).accuracy, 1.0 / 9, 0.015);
}

InstanceScore score(std::size_t id, int cls, int pred, double p) { return {id, cls, pred, p}; }

TEST(SelectPairs, StrictThresholdsAndRanking) {
  std::vector<InstanceScore> s = {
      score(0, 0, 0, 0.95),    // exactly at the clean bound: not clean
      score(1, 0, 0, 0.99),    // clean
      score(2, 0, 1, 0.5),     // exactly at the corrupt bound: not corrupt
      score(3, 0, 1, 0.2),     // corrupt
      score(4, 0, 2, 0.1),     // corrupt
      score(5, 1, 1, 0.999),   // clean, class 1
      score(6, 1, 0, 0.3),     // corrupt, class 1
      score(7, 2, 2, 0.97),    // clean, no corrupt partner
      score(8, 0, 0, 0.99),    // clean, ties with id 1
  };
  auto pairs = select_pairs(s);
  ASSERT_EQ(pairs.size(), 5u);
  auto ids = [&](std::size_t i) { return std::pair{pairs[i].clean.id, pairs[i].corrupt.id}; };
  EXPECT_EQ(ids(0), (std::pair<std::size_t, std::size_t>{5, 6}));
  EXPECT_EQ(ids(1), (std::pair<std::size_t, std::size_t>{1, 4}));
  EXPECT_EQ(ids(2), (std::pair<std::size_t, std::size_t>{8, 4}));
  EXPECT_EQ(ids(3), (std::pair<std::size_t, std::size_t>{1, 3}));
  EXPECT_EQ(ids(4), (std::pair<std::size_t, std::size_t>{8, 3}));
  for (const auto& p : pairs) {
    EXPECT_EQ(p.clean.true_class, p.corrupt.true_class);
    EXPECT_EQ(p.true_class, p.clean.true_class);
  }
}

TEST(SelectPairs, HighConfidenceWrongPredictionIsNotClean) {
  // p_true > 0.95 with a different argmax cannot happen for a softmax, but
  // the predicate must still require a correct prediction.
  EXPECT_FALSE(is_clean(score(0, 0, 1, 0.96)));
  EXPECT_TRUE(select_pairs({score(0, 0, 1, 0.96), score(1, 0, 1, 0.1)}).empty());
}

TEST(SelectPairs, EmptyWhenNoClassHasBoth) {
  EXPECT_TRUE(select_pairs({score(0, 0, 0, 0.99), score(1, 1, 0, 0.1)}).empty());
  EXPECT_TRUE(select_pairs({}).empty());
}

TrainConfig quick(std::size_t epochs, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = epochs;
  t.seed = seed;
  t.batch_size = 4;
  return t;
}

double eval_loss(Model& m, const std::vector<TimeSeriesInstance>& split) {
  double s = 0;
  for (const auto& inst : split) s -= std::log(static_cast<double>(m.predict(inst.values)[inst.label]));
  return s / static_cast<double>(split.size());
}

TEST(Train, OneEpochOnSmallSubsetDescends) {
  const std::string dir = TSMI_SOURCE_DIR "/data/";
  Dataset ds = load_dataset(dir + "JapaneseVowels_TRAIN.ts", dir + "JapaneseVowels_TEST.ts", 25);
  ds.train.resize(8);
  ds.test.resize(8);
  Model m(ModelConfig{}, 0);
  const double before = eval_loss(m, ds.train);
  auto log = train(m, ds, quick(1, 0));
  ASSERT_EQ(log.size(), 1u);
  EXPECT_TRUE(std::isfinite(log[0].train_loss));
  const double after = eval_loss(m, ds.train);
  EXPECT_LT(after, before);
}

TEST(Train, SyntheticTaskIsLearned) {
  const auto cfg = test::tiny_config();
  Dataset ds = test::synthetic_dataset(cfg, 12, 1);
  Model m(cfg, 0);
  auto log = train(m, ds, quick(30, 0));
  EXPECT_LT(log.back().train_loss, log.front().train_loss);
  EXPECT_LT(log.back().train_loss, std::log(3.0));
  EXPECT_GT(log.back().test_acc, 0.5);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto cfg = test::tiny_config();
  Dataset ds = test::synthetic_dataset(cfg, 6, 2);
  Model a(cfg, 3), b(cfg, 3), c(cfg, 3);
  auto la = train(a, ds, quick(2, 7));
  auto lb = train(b, ds, quick(2, 7), {}, 4);
  auto lc = train(c, ds, quick(2, 8));
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].train_loss, lb[i].train_loss);
    EXPECT_EQ(la[i].test_acc, lb[i].test_acc);
  }
  EXPECT_NE(la.back().train_loss, lc.back().train_loss);
  auto ca = model_container(a), cb = model_container(b);
  for (std::size_t i = 0; i < ca.tensors.size(); ++i) EXPECT_EQ(ca.tensors[i].second, cb.tensors[i].second);
}

TEST(Train, CallbackSeesEveryEpoch) {
  const auto cfg = test::tiny_config();
  Dataset ds = test::synthetic_dataset(cfg, 3, 3);
  Model m(cfg, 1);
  std::vector<std::size_t> seen;
  train(m, ds, quick(3, 0), [&](const EpochMetrics& e) { seen.push_back(e.epoch); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Train, NonFiniteLossAborts) {
  const auto cfg = test::tiny_config();
  Dataset ds = test::synthetic_dataset(cfg, 3, 4);
  for (auto& inst : ds.train) inst.values[0] = std::numeric_limits<float>::quiet_NaN();
  Model m(cfg, 2);
  try {
    train(m, ds, quick(1, 0));
    FAIL();
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, step 0"), std::string::npos) << e.what();
  }
}

TEST(Train, InvalidConfigRejected) {
  const auto cfg = test::tiny_config();
  Dataset ds = test::synthetic_dataset(cfg, 1, 5);
  Model m(cfg, 0);
  TrainConfig t;
  t.batch_size = 0;
  EXPECT_THROW(train(m, ds, t), std::invalid_argument);
}

}  // namespace
