#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <vector>

#include "d2v/masking.hpp"

using namespace d2v;

namespace {

// Expected covered fraction when each position starts a span with probability p
// and spans truncate at the end: position i is reachable from min(i + 1, span) starts.
double span_coverage_oracle(std::size_t length, double p, std::size_t span) {
  double total = 0;
  for (std::size_t i = 0; i < length; ++i) total += 1.0 - std::pow(1.0 - p, double(std::min(i + 1, span)));
  return total / double(length);
}

}  // namespace

TEST(BlockMask, ImageGridReachesTarget) {
  Rng rng(7);
  for (int draw = 0; draw < 200; ++draw) {
    auto plan = block_mask(14, 14, 0.6, 16, rng);
    plan.validate();
    EXPECT_GE(plan.count(), 118u);
  }
}

TEST(BlockMask, MeanFractionOverTenThousandDraws) {
  Rng rng(11);
  double total = 0;
  std::size_t min_count = 196;
  for (int draw = 0; draw < 10000; ++draw) {
    Rng r = rng.split(draw);
    auto plan = block_mask(14, 14, 0.6, 16, r);
    total += plan.fraction();
    min_count = std::min(min_count, plan.count());
  }
  const double mean = total / 10000;
  EXPECT_GE(mean, 0.60);
  EXPECT_LE(mean, 0.70);
  EXPECT_GE(min_count, 118u);
}

TEST(BlockMask, SingleBlockCoveringGrid) {
  Rng rng(3);
  auto plan = block_mask(4, 4, 0.5, 16, rng);
  EXPECT_EQ(plan.count(), 16u);
}

TEST(BlockMask, InfeasibleMinBlockIsConfigError) {
  Rng rng(3);
  EXPECT_THROW(block_mask(3, 3, 0.5, 10, rng), ConfigError);
  EXPECT_THROW(block_mask(3, 3, 1.0, 4, rng), ConfigError);
}

TEST(BlockMask, ActionsAreAlwaysReplace) {
  Rng rng(5);
  auto plan = block_mask(6, 6, 0.6, 4, rng);
  for (auto a : plan.actions) EXPECT_EQ(a, MaskAction::ReplaceMask);
}

TEST(SpanMask, ExtremeProbabilities) {
  Rng rng(1);
  EXPECT_TRUE(span_mask(100, 0.0, 10, rng).empty());
  EXPECT_EQ(span_mask(100, 1.0, 10, rng).count(), 100u);
}

TEST(SpanMask, SpeechStatistic) {
  Rng rng(2024);
  double total = 0;
  for (int draw = 0; draw < 10000; ++draw) total += span_mask(500, 0.065, 10, rng).fraction();
  const double mean = total / 10000;
  EXPECT_GE(mean, 0.47);
  EXPECT_LE(mean, 0.51);
  EXPECT_NEAR(mean, span_coverage_oracle(500, 0.065, 10), 0.005);
}

TEST(SpanMask, SpansTruncateAtEnd) {
  Rng rng(9);
  for (int draw = 0; draw < 500; ++draw) {
    auto plan = span_mask(20, 0.05, 10, rng);
    for (auto pos : plan.masked) EXPECT_LT(pos, 20u);
  }
}

TEST(SpanMask, ShortSequenceRejected) {
  Rng rng(1);
  EXPECT_THROW(span_mask(5, 0.1, 10, rng), ConfigError);
}

TEST(TokenMask, RateZeroIsIdentity) {
  Rng rng(1);
  EXPECT_TRUE(token_mask(64, 0.0, rng, {{0.8, 0.1, 0.1}, 2, 10}).empty());
}

TEST(TokenMask, RateOneForcedReplace) {
  Rng rng(1);
  auto plan = token_mask(64, 1.0, rng, {{1.0, 0.0, 0.0}, 0, 0});
  EXPECT_EQ(plan.count(), 64u);
  for (auto a : plan.actions) EXPECT_EQ(a, MaskAction::ReplaceMask);
}

TEST(TokenMask, RateAndActionSplit) {
  Rng rng(77);
  std::size_t selected = 0, total = 0;
  std::array<std::size_t, 3> actions{};
  for (int draw = 0; draw < 10000; ++draw) {
    auto plan = token_mask(512, 0.15, rng, {{0.8, 0.1, 0.1}, 3, 40});
    selected += plan.count();
    total += 512;
    for (std::size_t i = 0; i < plan.count(); ++i) {
      ++actions[static_cast<std::size_t>(plan.actions[i])];
      if (plan.actions[i] == MaskAction::RandomToken) {
        EXPECT_GE(plan.random_ids[i], 3);
        EXPECT_LT(plan.random_ids[i], 40);
      }
    }
  }
  const double rate = double(selected) / double(total);
  EXPECT_GE(rate, 0.145);
  EXPECT_LE(rate, 0.155);
  EXPECT_NEAR(double(actions[0]) / double(selected), 0.8, 0.01);
  EXPECT_NEAR(double(actions[1]) / double(selected), 0.1, 0.01);
  EXPECT_NEAR(double(actions[2]) / double(selected), 0.1, 0.01);
}

TEST(TokenMask, RandomIdsAppliedOnlyAtRandomActions) {
  Rng rng(4);
  auto plan = token_mask(200, 0.5, rng, {{0.0, 0.0, 1.0}, 5, 6});
  std::vector<int> ids(200, 2);
  auto out = apply_random_tokens(ids, plan);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_EQ(out[i], plan.is_masked(i) ? 5 : 2);
}

TEST(SpanTokenMask, CoverageMatchesEdgeCorrectedOracle) {
  Rng rng(31);
  double total = 0;
  for (int draw = 0; draw < 10000; ++draw) {
    auto plan = span_token_mask(512, 0.35, 4, rng);
    total += plan.fraction();
    for (auto a : plan.actions) ASSERT_EQ(a, MaskAction::ReplaceMask);
  }
  const double mean = total / 10000;
  EXPECT_NEAR(mean, span_coverage_oracle(512, 0.35, 4), 0.02);
  EXPECT_NEAR(mean, 1.0 - std::pow(0.65, 4), 0.02);
}

TEST(SpanTokenMask, PZeroIsEmpty) {
  Rng rng(8);
  EXPECT_TRUE(span_token_mask(30, 0.0, 4, rng).empty());
}

TEST(Masking, SameSeedSamePlan) {
  Rng a(99), b(99);
  auto pa = block_mask(8, 8, 0.6, 4, a);
  auto pb = block_mask(8, 8, 0.6, 4, b);
  EXPECT_EQ(pa.masked, pb.masked);
  Rng c(5), d(5);
  auto ta = token_mask(100, 0.3, c, {{0.8, 0.1, 0.1}, 2, 9});
  auto tb = token_mask(100, 0.3, d, {{0.8, 0.1, 0.1}, 2, 9});
  EXPECT_EQ(ta.masked, tb.masked);
  EXPECT_EQ(ta.actions, tb.actions);
  EXPECT_EQ(ta.random_ids, tb.random_ids);
}

TEST(Masking, FuzzedPlansSatisfyInvariants) {
  Rng fuzz(2718);
  for (int trial = 0; trial < 100000; ++trial) {
    Rng r = fuzz.split(trial);
    MaskPlan plan;
    switch (r.below(4)) {
      case 0: {
        const std::size_t h = 1 + r.below(10), w = 1 + r.below(10);
        const std::size_t min_block = 1 + r.below(h * w);
        const double ratio = r.uniform(0.01, 0.99);
        plan = block_mask(h, w, ratio, min_block, r);
        ASSERT_GE(plan.count(), std::size_t(std::ceil(ratio * double(h * w) - 1e-9)));
        break;
      }
      case 1: {
        const std::size_t span = 1 + r.below(12);
        plan = span_mask(span + r.below(40), r.uniform(), span, r);
        break;
      }
      case 2: {
        const double a = r.uniform(), b = r.uniform() * (1 - a);
        plan = token_mask(1 + r.below(64), r.uniform(), r, {{a, b, 1 - a - b}, 2, 20});
        break;
      }
      default: {
        const std::size_t span = 1 + r.below(6);
        plan = span_token_mask(span + r.below(40), r.uniform(), span, r);
      }
    }
    ASSERT_NO_THROW(plan.validate());
  }
}
