#include <gtest/gtest.h>

#include <cmath>

#include "../common/oracles.hpp"
#include "mecca/env.hpp"
#include "mecca/error.hpp"

using namespace mecca;

namespace {

ActionMap random_actions(Shape3 s, Rng& rng) {
  std::vector<std::uint8_t> idx(s.voxels());
  for (auto& k : idx) k = static_cast<std::uint8_t>(rng.uniform_int(0, kActionCount - 1));
  return ActionMap::from_indices(s, std::move(idx));
}

ActionMap constant_actions(Shape3 s, int k) {
  return ActionMap::from_indices(s, std::vector<std::uint8_t>(s.voxels(), static_cast<std::uint8_t>(k)));
}

EpisodeState state_with(Volume prob) {
  EpisodeState st = EpisodeState::initial(Volume(prob.shape(), 0.0f));
  st.prob = std::move(prob);
  return st;
}

}  // namespace

TEST(Actions, SetIsSymmetricAndSorted) {
  for (int k = 0; k < kActionCount; ++k) {
    EXPECT_EQ(kActionValues[k], -kActionValues[kActionCount - 1 - k]);
    if (k > 0) EXPECT_LT(kActionValues[k - 1], kActionValues[k]);
  }
  Rng rng(1);
  const ActionMap a = random_actions(Shape3{2, 3, 4}, rng);
  const ActionMap m = a.negated();
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_EQ(m.values[i], -a.values[i]);
  EXPECT_THROW(ActionMap::from_indices(Shape3{1, 1, 1}, {6}), Error);
}

TEST(Apply, ClipExamples) {
  const Shape3 s{1, 1, 1};
  struct Case {
    float p;
    int action;
    float expected;
  };
  // Indices: 0:-0.4 1:-0.2 2:-0.1 3:+0.1 4:+0.2 5:+0.4
  const Case cases[] = {{0.5f, 5, 0.5f + 0.4f}, {0.95f, 3, 1.0f}, {0.05f, 2, 0.0f}, {0.0f, 0, 0.0f},
                        {1.0f, 5, 1.0f},        {0.3f, 1, 0.3f - 0.2f}, {0.7f, 0, 0.7f - 0.4f}};
  for (const auto& c : cases) {
    const EpisodeState next = apply_actions(state_with(Volume(s, c.p)), constant_actions(s, c.action));
    EXPECT_EQ(next.prob[0], c.expected) << c.p << " + " << kActionValues[c.action];
    EXPECT_EQ(next.step, 1);
  }
}

TEST(Apply, ClipIsIdempotentAndStaysInRange) {
  Rng rng(2);
  const Shape3 s{4, 5, 6};
  for (int trial = 0; trial < 50; ++trial) {
    const Volume raw = oracle::random_volume(s, rng, -1.0f, 2.0f);
    const Volume once = elementwise_clip(raw, 0.0f, 1.0f);
    EXPECT_EQ(elementwise_clip(once, 0.0f, 1.0f), once);
    EpisodeState st = state_with(oracle::random_volume(s, rng));
    for (int t = 0; t < 5; ++t) {
      st = apply_actions(st, random_actions(s, rng));
      for (float v : st.prob.values()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    }
  }
}

TEST(Apply, CarriesImageAndHint) {
  Rng rng(3);
  const Shape3 s{2, 2, 2};
  EpisodeState st = EpisodeState::initial(oracle::random_volume(s, rng));
  st.hint = oracle::random_volume(s, rng);
  for (float v : st.prob.values()) EXPECT_EQ(v, 0.5f);
  const EpisodeState next = apply_actions(st, random_actions(s, rng));
  EXPECT_EQ(next.image, st.image);
  EXPECT_EQ(next.hint, st.hint);
}

TEST(Gain, MatchesIndependentArithmetic) {
  Rng rng(4);
  const Shape3 s{3, 4, 5};
  for (int trial = 0; trial < 20; ++trial) {
    const Volume p0 = oracle::random_volume(s, rng);
    const Volume p1 = oracle::random_volume(s, rng);
    const BinaryMask y = oracle::random_mask(s, rng);
    const Volume x0 = cross_entropy_map(p0, y);
    const Volume g = gain_map(p0, p1, y);
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto ce = [](double p, int t) {
        p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
        return t ? -std::log(p) : -std::log(1.0 - p);
      };
      ASSERT_NEAR(x0[i], ce(p0[i], y[i]), 1e-6 * std::max(1.0, ce(p0[i], y[i])));
      ASSERT_NEAR(g[i], ce(p0[i], y[i]) - ce(p1[i], y[i]), 1e-6);
    }
  }
}

TEST(Gain, CrossEntropyIsFiniteAtTheEnds) {
  const Shape3 s{1, 1, 2};
  const Volume p(s, std::vector<float>{0.0f, 1.0f});
  const BinaryMask y(s, std::vector<std::uint8_t>{1, 0});
  const Volume x = cross_entropy_map(p, y);
  EXPECT_NEAR(x[0], -std::log(1e-7), 1e-4);
  EXPECT_NEAR(x[1], -std::log(1e-7), 1e-4);
}

TEST(Gain, TelescopesOverAnEpisode) {
  Rng rng(5);
  const Shape3 s{4, 4, 4};
  for (int trial = 0; trial < 30; ++trial) {
    const BinaryMask y = oracle::random_mask(s, rng);
    EpisodeState st = state_with(Volume(s, 0.5f));
    const Volume x0 = cross_entropy_map(st.prob, y);
    std::vector<double> sum(s.voxels(), 0.0);
    for (int t = 0; t < 5; ++t) {
      const EpisodeState next = apply_actions(st, random_actions(s, rng));
      const Volume g = gain_map(st.prob, next.prob, y);
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
      st = next;
    }
    const Volume xT = cross_entropy_map(st.prob, y);
    for (std::size_t i = 0; i < sum.size(); ++i) ASSERT_NEAR(sum[i], x0[i] - xT[i], 1e-5);
  }
}

TEST(Reward, MatchesRecomputationWithPaperConstants) {
  EpisodeConfig cfg;
  EXPECT_EQ(cfg.alpha, 0.8);
  EXPECT_EQ(cfg.beta, 1.0);
  EXPECT_EQ(cfg.gamma, 0.95);
  EXPECT_EQ(cfg.horizon, 5);
  Rng rng(6);
  const Shape3 s{3, 3, 3};
  for (int trial = 0; trial < 50; ++trial) {
    const Volume gain = oracle::random_volume(s, rng, -3.0f, 3.0f);
    const Volume conf = oracle::random_volume(s, rng);
    const RewardMap r = self_adaptive_reward(gain, conf, cfg);
    double total = 0.0;
    for (std::size_t i = 0; i < gain.size(); ++i) {
      const double expect = 0.8 * (2.0 - conf[i]) * gain[i];
      ASSERT_NEAR(r.reward[i], expect, 1e-6);
      // The weight lies in [1, 2] * alpha, so the sign always follows the gain.
      ASSERT_EQ(r.reward[i] > 0, gain[i] > 0);
      ASSERT_EQ(r.reward[i] < 0, gain[i] < 0);
      total += expect;
    }
    EXPECT_NEAR(r.total, total, 1e-5);
  }
}

TEST(Returns, PerVoxelMatchesBruteForce) {
  Rng rng(7);
  const Shape3 s{4, 4, 4};
  EpisodeConfig cfg;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<RewardMap> rewards(5);
    std::vector<std::vector<double>> raw(5), means(5);
    for (int t = 0; t < 5; ++t) {
      rewards[t].reward = oracle::random_volume(s, rng, -1.0f, 1.0f);
      for (float v : rewards[t].reward.values()) raw[t].push_back(v);
      double m = 0.0;
      for (double v : raw[t]) m += v;
      means[t].assign(raw[t].size(), m / static_cast<double>(raw[t].size()));
    }
    const auto per_voxel = discounted_returns(rewards, cfg, AdvantageMode::kPerVoxel);
    const auto mean_mode = discounted_returns(rewards, cfg, AdvantageMode::kMeanReward);
    const auto expect_pv = oracle::returns(raw, 0.95);
    const auto expect_mean = oracle::returns(means, 0.95);
    for (int t = 0; t < 5; ++t) {
      for (std::size_t i = 0; i < raw[t].size(); ++i) {
        ASSERT_NEAR(per_voxel[t][i], expect_pv[t][i], 1e-6);
        ASSERT_NEAR(mean_mode[t][i], expect_mean[t][i], 1e-6);
      }
    }
  }
}

TEST(Returns, ModesCoincideOnConstantRewardFields) {
  Rng rng(8);
  const Shape3 s{4, 4, 4};
  EpisodeConfig cfg;
  std::vector<RewardMap> rewards(5);
  for (auto& r : rewards) r.reward = Volume(s, static_cast<float>(rng.uniform(-1, 1)));
  const auto a = discounted_returns(rewards, cfg, AdvantageMode::kPerVoxel);
  const auto b = discounted_returns(rewards, cfg, AdvantageMode::kMeanReward);
  for (int t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i) ASSERT_NEAR(a[t][i], b[t][i], 1e-6);
}

TEST(Returns, AdvantageSubtractsValues) {
  Rng rng(9);
  const Shape3 s{2, 2, 2};
  EpisodeConfig cfg;
  std::vector<RewardMap> rewards(3);
  std::vector<Volume> values(3);
  for (int t = 0; t < 3; ++t) {
    rewards[t].reward = oracle::random_volume(s, rng);
    values[t] = oracle::random_volume(s, rng);
  }
  const auto g = discounted_returns(rewards, cfg, AdvantageMode::kPerVoxel);
  const auto a = returns_and_advantages(rewards, values, cfg, AdvantageMode::kPerVoxel);
  for (int t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < s.voxels(); ++i) EXPECT_FLOAT_EQ(a[t][i], g[t][i] - values[t][i]);
  values.pop_back();
  EXPECT_THROW(returns_and_advantages(rewards, values, cfg, AdvantageMode::kPerVoxel), Error);
}

TEST(Misunderstanding, CountsWrongDirectionsAmongChangedVoxels) {
  const Shape3 s{1, 1, 4};
  const Volume before(s, std::vector<float>{0.5f, 0.5f, 0.5f, 0.5f});
  const Volume after(s, std::vector<float>{0.6f, 0.4f, 0.5f, 0.9f});
  const BinaryMask y(s, std::vector<std::uint8_t>{1, 1, 0, 0});
  // Changed: 0 (up, fg: right), 1 (down, fg: wrong), 3 (up, bg: wrong).
  EXPECT_DOUBLE_EQ(misunderstanding_rate(before, after, y), 2.0 / 3.0);
  EXPECT_EQ(misunderstanding_rate(before, before, y), 0.0);
}

TEST(Sampling, ArgmaxBreaksTiesLow) {
  const Shape3 s{1, 1, 2};
  nn::Activation pol(kActionCount, s);
  for (int c = 0; c < kActionCount; ++c) {
    pol.data[c * 2 + 0] = 1.0f / kActionCount;
    pol.data[c * 2 + 1] = c == 4 ? 0.5f : 0.1f;
  }
  Rng rng(0);
  const ActionMap a = sample_actions(pol, rng, SampleMode::kArgmax);
  EXPECT_EQ(a.indices[0], 0);
  EXPECT_EQ(a.indices[1], 4);
}

TEST(Sampling, FrequenciesFollowThePolicy) {
  const Shape3 s{1, 1, 1};
  nn::Activation pol(kActionCount, s);
  const float p[kActionCount] = {0.05f, 0.1f, 0.15f, 0.2f, 0.25f, 0.25f};
  for (int c = 0; c < kActionCount; ++c) pol.data[c] = p[c];
  Rng rng(11);
  std::vector<int> counts(kActionCount, 0);
  const int n = 30000;
  for (int i = 0; i < n; ++i) ++counts[sample_actions(pol, rng, SampleMode::kSample).indices[0]];
  for (int c = 0; c < kActionCount; ++c) EXPECT_NEAR(counts[c] / double(n), p[c], 0.01);
}

TEST(Sampling, RejectsInvalidRows) {
  const Shape3 s{1, 1, 1};
  nn::Activation pol(kActionCount, s, 0.1f);
  Rng rng(0);
  EXPECT_THROW(sample_actions(pol, rng, SampleMode::kSample), Error);
  nn::Activation neg(kActionCount, s, 0.0f);
  neg.data[0] = 1.5f;
  neg.data[1] = -0.5f;
  EXPECT_THROW(sample_actions(neg, rng, SampleMode::kSample), Error);
}
