#include <gtest/gtest.h>

#include <functional>
#include <sstream>

#include "dots/core.hpp"
#include "dots/serialize.hpp"

using namespace dots;

namespace {

std::string config_error(TrainerConfig c) {
  try {
    validate_config(c);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(TrainerConfig, DefaultsAreValid) {
  const TrainerConfig c;
  EXPECT_NO_THROW(validate_config(c));
  EXPECT_EQ(c.fresh_count(), 32);
  EXPECT_EQ(c.replay_count(), 32);
}

TEST(TrainerConfig, LargeBatchWithHalfFreshIsIntegral) {
  TrainerConfig c;
  c.B = 512;
  c.delta = 0.5;
  EXPECT_NO_THROW(validate_config(c));
  EXPECT_EQ(c.fresh_count(), 256);
}

TEST(TrainerConfig, RejectsZeroDelta) {
  TrainerConfig c;
  c.delta = 0.0;
  EXPECT_EQ(config_error(c), "delta must be in (0,1]");
}

TEST(TrainerConfig, RejectsSingletonGroups) {
  TrainerConfig c;
  c.G = 1;
  EXPECT_EQ(config_error(c), "G must be >= 2");
}

TEST(TrainerConfig, RejectsFractionalFreshCount) {
  TrainerConfig c;
  c.B = 63;
  c.delta = 0.5;
  EXPECT_EQ(config_error(c), "delta*B must be an integer");
}

TEST(TrainerConfig, RejectsEachBadField) {
  const std::vector<std::pair<std::function<void(TrainerConfig&)>, std::string>> cases = {
      {[](TrainerConfig& c) { c.B = 0; }, "B must be >= 1"},
      {[](TrainerConfig& c) { c.T = 0; }, "T must be >= 1"},
      {[](TrainerConfig& c) { c.K = 0; }, "K must be >= 1"},
      {[](TrainerConfig& c) { c.alpha = 1.5; }, "alpha must be in [0,1]"},
      {[](TrainerConfig& c) { c.tau = 0.0; }, "tau must be > 0"},
      {[](TrainerConfig& c) { c.delta = 1.5; }, "delta must be in (0,1]"},
      {[](TrainerConfig& c) { c.C = -1; }, "C must be >= 0"},
      {[](TrainerConfig& c) { c.mu = 0; }, "mu must be >= 1"},
      {[](TrainerConfig& c) { c.eps_clip = -0.1; }, "eps_clip must be >= 0"},
      {[](TrainerConfig& c) { c.beta = -1.0; }, "beta must be >= 0"},
      {[](TrainerConfig& c) { c.lr = 0.0; }, "lr must be finite and > 0"},
      {[](TrainerConfig& c) { c.momentum = 1.0; }, "momentum must be in [0,1)"},
      {[](TrainerConfig& c) { c.probe_size = -1; }, "probe_size must be >= 0"},
  };
  for (const auto& [mutate, message] : cases) {
    TrainerConfig c;
    mutate(c);
    EXPECT_EQ(config_error(c), message);
  }
}

TEST(TrainerConfig, FullScalePreset) {
  const TrainerConfig c = full_scale_config();
  EXPECT_EQ(c.B, 512);
  EXPECT_EQ(c.K, 256);
  EXPECT_EQ(c.G, 8);
  EXPECT_EQ(c.T, 60);
  EXPECT_NO_THROW(validate_config(c));
}

TEST(ConfigText, RoundTripsThroughFormat) {
  TrainerConfig c;
  c.B = 128;
  c.tau = 0.0123456789012345;
  c.seed = 18446744073709551615ull;
  c.lr = 1.0 / 3.0;
  std::istringstream in(format_config(c));
  EXPECT_EQ(apply_key_values(TrainerConfig{}, parse_key_values(in)), c);
}

TEST(ConfigText, CommentsAndWhitespace) {
  std::istringstream in("# header\n  B = 32   # trailing\n\n delta=0.25\n");
  const TrainerConfig c = apply_key_values(TrainerConfig{}, parse_key_values(in));
  EXPECT_EQ(c.B, 32);
  EXPECT_DOUBLE_EQ(c.delta, 0.25);
  EXPECT_EQ(c.fresh_count(), 8);
}

TEST(ConfigText, RejectsUnknownDuplicateAndMalformed) {
  std::istringstream unknown("batch = 3\n");
  EXPECT_THROW(apply_key_values(TrainerConfig{}, parse_key_values(unknown)), ConfigError);
  std::istringstream dup("B = 3\nB = 4\n");
  EXPECT_THROW(parse_key_values(dup), ConfigError);
  std::istringstream noeq("B 3\n");
  EXPECT_THROW(parse_key_values(noeq), ConfigError);
  std::istringstream junk("B = 3x\n");
  EXPECT_THROW(apply_key_values(TrainerConfig{}, parse_key_values(junk)), ConfigError);
}

TEST(Mean, EmptyIsZero) {
  EXPECT_EQ(mean(std::vector<double>{}), 0.0);
  EXPECT_DOUBLE_EQ(mean(std::vector<double>{1, 2, 3, 4}), 2.5);
}
