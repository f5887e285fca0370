#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace tsmi;
using tsmi::test::random_tensor;

namespace {

class PatchingTest : public ::testing::Test {
 protected:
  Model model{ModelConfig{}, 21};
  Rng rng{5, "patching"};
  Tensor<float> clean = random_tensor({12, 25}, rng);
  Tensor<float> corrupt = random_tensor({12, 25}, rng);
};

TEST_F(PatchingTest, SelfPairGivesExactZeros) {
  PatchSession s(model, corrupt, corrupt, 4);
  for (const auto& r : sweep_layers(s).results) EXPECT_EQ(r.delta_p, 0.0);
  for (const auto& r : sweep_heads(s).results) EXPECT_EQ(r.delta_p, 0.0);
  for (const auto& rep : sweep_all_positions(s))
    for (const auto& r : rep.results) EXPECT_EQ(r.delta_p, 0.0);
}

TEST_F(PatchingTest, EmptyTargetsAreBaseline) {
  PatchSession s(model, clean, corrupt, 2);
  auto r = s.delta_p({});
  EXPECT_EQ(r.delta_p, 0.0);
  EXPECT_EQ(r.p_patched, s.p_orig());
  EXPECT_EQ(r.p_orig, static_cast<double>(model.predict(corrupt)[2]));
}

TEST_F(PatchingTest, GranularitiesCompose) {
  PatchSession s(model, clean, corrupt, 0);
  for (std::size_t l = 0; l < 3; ++l) {
    std::vector<TapPoint> heads, cells;
    for (std::size_t h = 0; h < 8; ++h) {
      heads.push_back(TapPoint::single_head(l, h));
      for (std::size_t t = 0; t < 25; ++t) cells.push_back(TapPoint::head_pos(l, h, t));
    }
    const double whole = s.delta_p({TapPoint::whole_layer(l)}).p_patched;
    EXPECT_EQ(s.delta_p(heads).p_patched, whole);
    EXPECT_EQ(s.delta_p(cells).p_patched, whole);
  }
  // duplicate targets are idempotent
  auto one = s.delta_p({TapPoint::single_head(1, 3)});
  auto two = s.delta_p({TapPoint::single_head(1, 3), TapPoint::single_head(1, 3)});
  EXPECT_EQ(one.p_patched, two.p_patched);
}

TEST_F(PatchingTest, PatchingEverythingAtLayerZeroMatchesDirectOverwrite) {
  // Oracle: rebuild the plan by hand from the donor cache.
  PatchSession s(model, clean, corrupt, 1);
  PatchPlan<float> plan;
  plan.layers.resize(3);
  auto& lp = plan.layers[0];
  lp.context_mask.assign(25 * 64, 1);
  lp.context_values = Tensor<float>({1, 25, 64});
  const auto& ctx = s.donor().head_context[0];
  for (std::size_t h = 0; h < 8; ++h)
    for (std::size_t t = 0; t < 25; ++t)
      for (std::size_t c = 0; c < 8; ++c) lp.context_values[t * 64 + h * 8 + c] = ctx[(h * 25 + t) * 8 + c];
  EXPECT_EQ(s.run_plan(plan)[1], s.delta_p({TapPoint::whole_layer(0)}).p_patched);
}

TEST_F(PatchingTest, SweepIsIndependentOfJobs) {
  PatchSession s(model, clean, corrupt, 3);
  auto a = sweep_all_positions(s, 1), b = sweep_all_positions(s, 4);
  ASSERT_EQ(a.size(), 24u);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t t = 0; t < 25; ++t) EXPECT_EQ(a[i].results[t].delta_p, b[i].results[t].delta_p);
  auto h1 = sweep_heads(s, 1), h4 = sweep_heads(s, 3);
  for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(h1.results[i].delta_p, h4.results[i].delta_p);
}

TEST_F(PatchingTest, PositionSweepMatchesAllPositions) {
  PatchSession s(model, clean, corrupt, 5);
  auto all = sweep_all_positions(s);
  auto one = sweep_positions(s, 2, 6);
  EXPECT_EQ(one.layer, 2u);
  EXPECT_EQ(one.head, 6u);
  for (std::size_t t = 0; t < 25; ++t) EXPECT_EQ(one.results[t].delta_p, all[2 * 8 + 6].results[t].delta_p);
  EXPECT_THROW(sweep_positions(s, 3, 0), std::out_of_range);
}

TEST_F(PatchingTest, SessionValidation) {
  EXPECT_THROW(PatchSession(model, clean, corrupt, 9), std::out_of_range);
  TimeSeriesInstance a{0, clean, 1, 25}, b{1, corrupt, 2, 25};
  EXPECT_THROW(PatchSession(model, a, b), std::invalid_argument);
  PatchSession s(model, clean, corrupt, 0);
  EXPECT_THROW(s.delta_p({TapPoint::head_pos(0, 0, 25)}), std::out_of_range);
}

SweepReport fake_sweep(std::vector<std::pair<TapPoint, double>> rows) {
  SweepReport r;
  r.granularity = Granularity::Position;
  for (auto& [tp, d] : rows) r.results.push_back({{tp}, 0.1, 0.1 + d, d, 0});
  return r;
}

TEST(Critical, StrictThresholdAndTieBreak) {
  auto sw = fake_sweep({{TapPoint::head_pos(1, 0, 3), 0.05},
                        {TapPoint::head_pos(0, 2, 9), 0.2},
                        {TapPoint::head_pos(0, 1, 4), 0.2},
                        {TapPoint::head_pos(0, 1, 2), 0.2},
                        {TapPoint::head_pos(2, 7, 0), -0.3}});
  auto c = find_critical({sw}, 0.05);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c[0].tap.to_string(), "L0H1T2");
  EXPECT_EQ(c[1].tap.to_string(), "L0H1T4");
  EXPECT_EQ(c[2].tap.to_string(), "L0H2T9");
  EXPECT_EQ(find_critical({sw}, 0.0).size(), 4u);
  EXPECT_THROW(find_critical({sw}, -0.1), std::invalid_argument);
  auto all = rank_all({sw});
  ASSERT_EQ(all.size(), 5u);
  EXPECT_EQ(all.back().delta_p, -0.3);
}

TEST_F(PatchingTest, TopkTruncatesWithNotice) {
  PatchSession s(model, clean, corrupt, 0);
  auto ranked = rank_all(sweep_all_positions(s));
  ranked.resize(4);
  std::ostringstream note;
  auto rows = accumulate_topk(s, ranked, 10, 1, &note);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_NE(note.str().find("only 4"), std::string::npos);
  EXPECT_EQ(rows[0].delta_p, ranked[0].delta_p);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    EXPECT_EQ(rows[k].k, k + 1);
    std::vector<TapPoint> taps;
    for (std::size_t j = 0; j <= k; ++j) taps.push_back(ranked[j].tap);
    EXPECT_EQ(rows[k].delta_p, s.delta_p(taps).delta_p);
  }
  EXPECT_TRUE(accumulate_topk(s, {}, 3, 1, nullptr).empty());
}

}  // namespace
