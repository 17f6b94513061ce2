#pragma once

// Domain types shared by every module: questions, rollout groups,
// difficulty estimates and the trainer configuration.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dots {

using QuestionId = std::int64_t;
using Token = std::int32_t;
using TokenSequence = std::vector<Token>;

/// Raised when a TrainerConfig (or any parsed configuration) violates an
/// invariant. The message names the violated field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Question {
  QuestionId id = 0;
  std::vector<double> embedding;
  TokenSequence answer_key;
  // Testbed-internal; the learner never reads it.
  double latent_difficulty = 0.0;

  bool operator==(const Question&) const = default;
};

/// G responses of one question together with everything the GRPO-RR loss
/// needs to score them later: per-token behavior log-probabilities, rewards
/// and group-relative advantages.
struct RolloutGroup {
  QuestionId question_id = 0;
  std::vector<TokenSequence> responses;
  std::vector<std::vector<double>> behavior_logprobs;
  std::vector<double> rewards;
  std::vector<double> advantages;
  double mean_reward = 0.0;
  int step_created = 0;
  // Version of the policy that generated the responses. Replayed groups keep
  // the tag from creation, so a scorer can tell stored log-probs apart from
  // ones that would come from the current parameters.
  std::uint64_t behavior_version = 0;

  std::size_t group_size() const { return responses.size(); }
  bool operator==(const RolloutGroup&) const = default;
};

enum class EstimateKind : std::uint8_t { ground_truth, predicted_raw, predicted_calibrated };

struct DifficultyEstimate {
  QuestionId question_id = 0;
  int step = 0;
  double value = 0.0;
  EstimateKind kind = EstimateKind::ground_truth;

  bool operator==(const DifficultyEstimate&) const = default;
};

struct TrainerConfig {
  int B = 64;            // training batch size (questions)
  int G = 8;             // rollouts per question
  int T = 60;            // total steps
  int K = 64;            // reference-set size
  double alpha = 0.5;    // target difficulty
  double tau = 1e-3;     // sampling temperature
  double delta = 0.5;    // fresh rollout fraction
  int C = 512;           // replay capacity (groups)
  int mu = 2;            // selection period
  double eps_clip = 0.2;
  double beta = 0.0;     // KL coefficient
  double lr = 30.0;
  std::uint64_t seed = 0;
  double momentum = 0.0;  // 0 gives plain gradient ascent
  int probe_size = 256;   // held-out questions rolled out per selection step to score the predictor

  int fresh_count() const { return static_cast<int>(std::lround(delta * B)); }
  int replay_count() const { return B - fresh_count(); }

  bool operator==(const TrainerConfig&) const = default;
};

inline TrainerConfig validate_config(const TrainerConfig& cfg) {
  if (cfg.B < 1) throw ConfigError("B must be >= 1");
  if (cfg.G < 2) throw ConfigError("G must be >= 2");
  if (cfg.T < 1) throw ConfigError("T must be >= 1");
  if (cfg.K < 1) throw ConfigError("K must be >= 1");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ConfigError("alpha must be in [0,1]");
  if (!(cfg.tau > 0.0)) throw ConfigError("tau must be > 0");
  if (!(cfg.delta > 0.0 && cfg.delta <= 1.0)) throw ConfigError("delta must be in (0,1]");
  const double fresh = cfg.delta * cfg.B;
  if (std::abs(fresh - std::round(fresh)) > 1e-9) throw ConfigError("delta*B must be an integer");
  if (cfg.C < 0) throw ConfigError("C must be >= 0");
  if (cfg.mu < 1) throw ConfigError("mu must be >= 1");
  if (!(cfg.eps_clip >= 0.0)) throw ConfigError("eps_clip must be >= 0");
  if (!(cfg.beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("lr must be finite and > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (cfg.probe_size < 0) throw ConfigError("probe_size must be >= 0");
  return cfg;
}

/// The larger configuration: B = 512, K = 256, everything else as default.
inline TrainerConfig full_scale_config() {
  TrainerConfig c;
  c.B = 512;
  c.K = 256;
  return c;
}

inline double mean(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace dots
