#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>

namespace dots {

/// Purposes that own disjoint ranges of stream ids. Each consumer of
/// randomness derives its stream from (purpose, step, index) so that, for
/// example, changing the replay fraction does not perturb rollout sampling.
enum class StreamPurpose : std::uint64_t {
  bank = 1,
  reference_pick = 2,
  reference_rollout = 3,
  batch_select = 4,
  fresh_rollout = 5,
  backfill_select = 6,
  replay_sample = 7,
  probe_pick = 8,
  probe_rollout = 9,
  harvest = 10,
  predictor_init = 11,
  predictor_shuffle = 12,
  gradient_probe = 13,
  curriculum_labels = 14,
  test = 63,
};

/// Packs purpose (6 bits), step (26 bits) and index (32 bits).
constexpr std::uint64_t stream_id(StreamPurpose purpose, std::uint64_t step, std::uint64_t index) {
  return (static_cast<std::uint64_t>(purpose) << 58) ^ ((step & 0x3ffffffULL) << 32) ^
         (index & 0xffffffffULL);
}

/// A 64-bit Mersenne Twister keyed by (seed, stream_id). The engine state is
/// the whole state: distributions are constructed per draw, so persisting
/// the engine is enough to resume the exact sequence.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      0x9e3779b9U};
    engine_.seed(seq);
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  double normal() {
    // Box-Muller; one value per call keeps the stream stateless beyond the engine.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Index drawn from an (unnormalized, nonnegative) weight vector.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return i;
    }
    // Rounding left a sliver of mass; return the last positive weight.
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > 0.0) return i;
    return weights.size() - 1;
  }

  std::mt19937_64& engine() { return engine_; }

  std::string save() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }

  void restore(const std::string& state) {
    std::istringstream in(state);
    in >> engine_;
    if (!in) throw std::runtime_error("corrupt RNG state");
  }

  bool operator==(const RngStream&) const = default;

 private:
  std::mt19937_64 engine_;
};

inline RngStream seeded_rng_stream(std::uint64_t seed, std::uint64_t stream) {
  return RngStream(seed, stream);
}

inline RngStream seeded_rng_stream(std::uint64_t seed, StreamPurpose purpose, std::uint64_t step,
                                   std::uint64_t index = 0) {
  return RngStream(seed, stream_id(purpose, step, index));
}

}  // namespace dots
