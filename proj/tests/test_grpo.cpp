#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dots/grpo.hpp"
#include "dots/rng.hpp"

using namespace dots;

namespace {

PolicyParams random_policy(int L, int V, int h, std::uint64_t seed, double scale = 1.0) {
  PolicyParams p(L, V, h);
  auto rng = seeded_rng_stream(seed, StreamPurpose::test, 100);
  for (double& w : p.weights) w = scale * rng.normal();
  return p;
}

std::vector<double> random_embedding(int h, RngStream& rng) {
  std::vector<double> z(h);
  for (double& x : z) x = rng.normal() / std::sqrt(h);
  return z;
}

// Responses sampled from `behavior`, rewards drawn independently.
RolloutGroup sampled_group(const PolicyParams& behavior, std::span<const double> z, int G, RngStream& rng,
                           double p_reward = 0.5) {
  const auto lp = position_log_probs(behavior, z);
  RolloutGroup g;
  for (int i = 0; i < G; ++i) {
    TokenSequence o(behavior.L);
    std::vector<double> lps(behavior.L);
    for (int l = 0; l < behavior.L; ++l) {
      std::vector<double> pr(behavior.V);
      for (int v = 0; v < behavior.V; ++v) pr[v] = lp.prob(l, v);
      o[l] = static_cast<Token>(rng.categorical(pr));
      lps[l] = lp(l, o[l]);
    }
    g.responses.push_back(o);
    g.behavior_logprobs.push_back(lps);
    g.rewards.push_back(rng.bernoulli(p_reward) ? 1.0 : 0.0);
  }
  g.mean_reward = mean(g.rewards);
  g.advantages = compute_advantages(g.rewards);
  return g;
}

struct Batch {
  std::vector<std::vector<double>> embeddings;
  std::vector<RolloutGroup> groups;
  std::vector<GroupView> views() const {
    std::vector<GroupView> v;
    for (std::size_t i = 0; i < groups.size(); ++i) v.push_back({&groups[i], embeddings[i]});
    return v;
  }
};

Batch make_batch(const PolicyParams& behavior, int n, int G, std::uint64_t seed) {
  auto rng = seeded_rng_stream(seed, StreamPurpose::test, 200);
  Batch b;
  for (int i = 0; i < n; ++i) {
    b.embeddings.push_back(random_embedding(behavior.h, rng));
    b.groups.push_back(sampled_group(behavior, b.embeddings.back(), G, rng));
  }
  return b;
}

// Independent oracle: sum_{l,v} p log(p/q) / L by brute force over explicit softmaxes.
double brute_force_kl(const PolicyParams& p, const PolicyParams& q, std::span<const double> z) {
  double total = 0.0;
  for (int l = 0; l < p.L; ++l) {
    std::vector<double> lp(p.V), lq(p.V);
    for (int v = 0; v < p.V; ++v) {
      for (int k = 0; k < p.h; ++k) {
        lp[v] += p.weights[p.index(l, v, k)] * z[k];
        lq[v] += q.weights[q.index(l, v, k)] * z[k];
      }
    }
    double zp = 0, zq = 0;
    for (int v = 0; v < p.V; ++v) zp += std::exp(lp[v]), zq += std::exp(lq[v]);
    for (int v = 0; v < p.V; ++v) {
      const double pv = std::exp(lp[v]) / zp, qv = std::exp(lq[v]) / zq;
      total += pv * std::log(pv / qv);
    }
  }
  return total / p.L;
}

}  // namespace

TEST(Advantages, ForcedValues) {
  EXPECT_EQ(compute_advantages(std::vector<double>{1, 1, 0, 0}), (std::vector<double>{0.5, 0.5, -0.5, -0.5}));
  EXPECT_EQ(compute_advantages(std::vector<double>{1, 1, 1, 1}), (std::vector<double>{0, 0, 0, 0}));
  const auto a = compute_advantages(std::vector<double>{1, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(a[0], 0.875);
  for (int i = 1; i < 8; ++i) EXPECT_DOUBLE_EQ(a[i], -0.125);
}

TEST(Advantages, RejectsSingleton) { EXPECT_THROW(compute_advantages(std::vector<double>{1.0}), std::invalid_argument); }

TEST(Advantages, ZeroSumProperty) {
  auto rng = seeded_rng_stream(5, StreamPurpose::test, 0);
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> r(2 + rng.below(30));
    for (double& x : r) x = rng.uniform() < 0.3 ? 1.0 : 0.0;
    const auto a = compute_advantages(r);
    ASSERT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 0.0, 1e-12);
  }
}

TEST(Policy, LogProbsNormalize) {
  const auto p = random_policy(3, 5, 4, 1, 2.0);
  auto rng = seeded_rng_stream(1, StreamPurpose::test, 1);
  const auto z = random_embedding(4, rng);
  const auto lp = position_log_probs(p, z);
  for (int l = 0; l < 3; ++l) {
    double s = 0.0;
    for (int v = 0; v < 5; ++v) s += lp.prob(l, v);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(position_log_probs(p, std::vector<double>(3)), std::invalid_argument);
}

TEST(Policy, UniformSuccessProbability) {
  const PolicyParams p(2, 4, 3);
  const std::vector<double> z = {0.2, 0.3, 0.1};
  const TokenSequence key = {1, 3};
  EXPECT_NEAR(sequence_success_probability(p, z, key), 1.0 / 16.0, 1e-15);
}

TEST(Loss, FreshOnPolicyGroupsHaveUnitRatios) {
  const auto p = random_policy(4, 8, 6, 2);
  const auto b = make_batch(p, 6, 8, 3);
  const auto views = b.views();
  const auto rep = grpo_loss(views, p, p, 0.2, 0.0);
  EXPECT_EQ(rep.mean_ratio, 1.0);
  EXPECT_EQ(rep.clipped_fraction, 0.0);
  EXPECT_EQ(rep.tokens, 6u * 8 * 4);
  EXPECT_NEAR(rep.surrogate, 0.0, 1e-15);  // advantages sum to zero per group
}

TEST(Loss, OnPolicyEqualsRecomputedBehavior) {
  const auto p = random_policy(4, 8, 6, 2);
  auto b = make_batch(p, 4, 8, 4);
  const auto direct = grpo_loss(b.views(), p, p, 0.2, 0.0);
  for (std::size_t gi = 0; gi < b.groups.size(); ++gi) {
    const auto lp = position_log_probs(p, b.embeddings[gi]);
    auto& g = b.groups[gi];
    for (std::size_t i = 0; i < g.group_size(); ++i)
      for (int l = 0; l < p.L; ++l) g.behavior_logprobs[i][l] = lp(l, g.responses[i][l]);
  }
  const auto recomputed = grpo_loss(b.views(), p, p, 0.2, 0.0);
  EXPECT_EQ(direct.surrogate, recomputed.surrogate);
  EXPECT_EQ(direct.mean_ratio, recomputed.mean_ratio);
  EXPECT_EQ(direct.gradient, recomputed.gradient);
}

TEST(Loss, DegenerateGroupsGiveExactlyZeroGradient) {
  const auto p = random_policy(3, 6, 5, 6);
  const auto behavior = random_policy(3, 6, 5, 7);
  auto b = make_batch(behavior, 5, 8, 8);
  for (auto& g : b.groups) {
    std::fill(g.rewards.begin(), g.rewards.end(), 1.0);
    g.mean_reward = 1.0;
    g.advantages = compute_advantages(g.rewards);
  }
  const auto rep = grpo_loss(b.views(), p, p, 0.2, 0.0);
  for (double x : rep.gradient) ASSERT_EQ(x, 0.0);
  EXPECT_EQ(rep.surrogate, 0.0);
}

TEST(Loss, StaleRatiosAreClippedOnlyAboveTheBand) {
  // One response, two tokens, advantage +1, ratios 0.5 and 1.5 at eps 0.2:
  // min(0.5, 0.5) = 0.5 and min(1.5, 1.2) = 1.2, token average 0.85.
  const PolicyParams p = random_policy(2, 3, 2, 9);
  const std::vector<double> z = {0.4, -0.3};
  const auto lp = position_log_probs(p, z);
  RolloutGroup g;
  g.responses = {{1, 2}};
  g.behavior_logprobs = {{lp(0, 1) - std::log(0.5), lp(1, 2) - std::log(1.5)}};
  g.rewards = {1.0};
  g.advantages = {1.0};
  g.mean_reward = 1.0;
  const GroupView view{&g, z};
  const auto rep = grpo_loss(std::span(&view, 1), p, p, 0.2, 0.0);
  EXPECT_NEAR(rep.surrogate, 0.85, 1e-12);
  EXPECT_DOUBLE_EQ(rep.clipped_fraction, 0.5);
  EXPECT_NEAR(rep.mean_ratio, 1.0, 1e-12);
}

TEST(Loss, ClipMonotoneInEpsForPositiveAdvantage) {
  const auto behavior = random_policy(3, 5, 4, 10);
  auto p = behavior;
  auto rng = seeded_rng_stream(10, StreamPurpose::test, 1);
  for (double& w : p.weights) w += 0.5 * rng.normal();
  auto b = make_batch(behavior, 6, 8, 11);
  for (auto& g : b.groups) {
    std::fill(g.advantages.begin(), g.advantages.end(), 1.0);
  }
  double prev = -1e300;
  for (double eps : {0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 2.0}) {
    const double s = grpo_loss(b.views(), p, p, eps, 0.0).surrogate;
    EXPECT_GE(s, prev);
    prev = s;
  }
}

TEST(Loss, RejectsMalformedGroups) {
  const PolicyParams p(2, 3, 2);
  const std::vector<double> z = {0.1, 0.2};
  RolloutGroup g;
  g.responses = {{1, 2}, {0, 1}};
  g.behavior_logprobs = {{-1.0, -1.0}};
  g.rewards = {1, 0};
  g.advantages = {0.5, -0.5};
  const GroupView view{&g, z};
  EXPECT_THROW(grpo_loss(std::span(&view, 1), p, p, 0.2, 0.0), std::invalid_argument);
  g.behavior_logprobs = {{-1.0, NAN}, {-1.0, -1.0}};
  EXPECT_THROW(grpo_loss(std::span(&view, 1), p, p, 0.2, 0.0), std::invalid_argument);
  g.behavior_logprobs = {{-1.0, -1.0}, {-1.0, -1.0}};
  g.responses = {{1, 2}, {0}};
  EXPECT_THROW(grpo_loss(std::span(&view, 1), p, p, 0.2, 0.0), std::invalid_argument);
}

TEST(Kl, ZeroForIdenticalPolicies) {
  const auto p = random_policy(3, 4, 3, 12);
  const auto b = make_batch(p, 3, 4, 13);
  EXPECT_EQ(kl_penalty(p, p, b.views()), 0.0);
}

TEST(Kl, MatchesBruteForceSum) {
  const auto p = random_policy(2, 3, 2, 14);
  const auto q = random_policy(2, 3, 2, 15);
  const auto b = make_batch(p, 5, 2, 16);
  double oracle = 0.0;
  for (const auto& e : b.embeddings) oracle += brute_force_kl(p, q, e);
  oracle /= static_cast<double>(b.embeddings.size());
  EXPECT_NEAR(kl_penalty(p, q, b.views()), oracle, 1e-12);
  EXPECT_GT(kl_penalty(p, q, b.views()), 0.0);
}

TEST(Kl, BetaZeroIgnoresDivergence) {
  const auto p = random_policy(2, 3, 2, 17);
  const auto q = random_policy(2, 3, 2, 18);
  const auto b = make_batch(p, 3, 4, 19);
  const auto with_ref = grpo_loss(b.views(), p, q, 0.2, 0.0);
  const auto self_ref = grpo_loss(b.views(), p, p, 0.2, 0.0);
  EXPECT_EQ(with_ref.objective, self_ref.objective);
  EXPECT_EQ(with_ref.gradient, self_ref.gradient);
}

TEST(Kl, PenaltyEntersObjective) {
  const auto p = random_policy(2, 3, 2, 20);
  const auto q = random_policy(2, 3, 2, 21);
  const auto b = make_batch(p, 3, 4, 22);
  const auto rep = grpo_loss(b.views(), p, q, 0.2, 0.5);
  EXPECT_NEAR(rep.objective, rep.surrogate - 0.5 * kl_penalty(p, q, b.views()), 1e-14);
}

TEST(GradientCheck, RandomSmallPolicyFourGroups) {
  const auto behavior = random_policy(3, 4, 5, 23);
  auto p = behavior;
  auto rng = seeded_rng_stream(23, StreamPurpose::test, 2);
  for (double& w : p.weights) w += 0.02 * rng.normal();
  const auto b = make_batch(behavior, 4, 6, 24);
  EXPECT_LT(gradient_check(p, b.views(), behavior, 0.2, 0.0, 1e-6, p.size()), 1e-5);
}

TEST(GradientCheck, WithKlTerm) {
  const auto behavior = random_policy(3, 4, 5, 25);
  const auto ref = random_policy(3, 4, 5, 26);
  const auto b = make_batch(behavior, 4, 6, 27);
  EXPECT_LT(gradient_check(behavior, b.views(), ref, 0.2, 0.3, 1e-6, behavior.size()), 1e-5);
}

TEST(GradientCheck, ZeroAdvantageBatchHasZeroGradient) {
  const auto p = random_policy(2, 3, 3, 28);
  auto b = make_batch(p, 3, 4, 29);
  for (auto& g : b.groups) std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  const auto rep = grpo_loss(b.views(), p, p, 0.2, 0.0);
  for (double x : rep.gradient) EXPECT_EQ(x, 0.0);
  EXPECT_LT(gradient_check(p, b.views(), p, 0.2, 0.0, 1e-6, p.size()), 1e-5);
}

TEST(GradientCheck, ClippedTokensHeldOut) {
  const auto behavior = random_policy(3, 4, 5, 30);
  auto p = behavior;
  auto rng = seeded_rng_stream(30, StreamPurpose::test, 3);
  for (double& w : p.weights) w += 1.5 * rng.normal();  // far enough that many tokens clip
  const auto b = make_batch(behavior, 6, 8, 31);
  const auto rep = grpo_loss(b.views(), p, behavior, 0.2, 0.0);
  ASSERT_GT(rep.clipped_fraction, 0.1);
  EXPECT_LT(gradient_check(p, b.views(), behavior, 0.2, 0.0, 1e-6, p.size()), 1e-5);
}

TEST(GradientCheck, RejectsBadStep) {
  const auto p = random_policy(2, 3, 3, 32);
  const auto b = make_batch(p, 1, 2, 33);
  EXPECT_THROW(gradient_check(p, b.views(), p, 0.2, 0.0, 1e-2), std::invalid_argument);
}

TEST(PolicyFile, RoundTrip) {
  auto p = random_policy(2, 3, 4, 34);
  p.version = 17;
  const std::string path = ::testing::TempDir() + "/policy.bin";
  save_policy(p, path);
  EXPECT_EQ(load_policy(path), p);
}
