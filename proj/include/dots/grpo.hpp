#pragma once

// Toy token policy and the GRPO / GRPO-RR objectives with analytic gradients.
//
// The policy emits L tokens; position l draws its token from an independent
// V-way softmax over logits W_l z, where z is the question embedding. The
// group objective is
//
//   (1/G) sum_i (1/|o_i|) sum_t min(r_it A_i, clip(r_it, 1-eps, 1+eps) A_i)
//
// with r_it = exp(log pi(o_it) - stored behavior log-prob), averaged over the
// groups of a batch, minus beta times the closed-form categorical KL to the
// reference policy averaged over positions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "dots/core.hpp"
#include "dots/rng.hpp"
#include "dots/serialize.hpp"

namespace dots {

struct PolicyParams {
  int L = 0;
  int V = 0;
  int h = 0;
  // Row-major [position][token][embedding dim].
  std::vector<double> weights;
  std::uint64_t version = 0;

  PolicyParams() = default;
  PolicyParams(int positions, int vocab, int dim)
      : L(positions), V(vocab), h(dim), weights(static_cast<std::size_t>(positions) * vocab * dim, 0.0) {}

  std::size_t size() const { return weights.size(); }
  std::size_t index(int l, int v, int k) const {
    return (static_cast<std::size_t>(l) * V + v) * h + k;
  }
  std::span<const double> row(int l, int v) const { return {weights.data() + index(l, v, 0), size_t(h)}; }
  std::span<double> row(int l, int v) { return {weights.data() + index(l, v, 0), size_t(h)}; }

  bool all_finite() const {
    return std::all_of(weights.begin(), weights.end(), [](double w) { return std::isfinite(w); });
  }

  bool operator==(const PolicyParams&) const = default;
};

/// log pi(v | z, l) for every position and token, row-major L x V.
struct PositionLogProbs {
  int L = 0;
  int V = 0;
  std::vector<double> values;

  double operator()(int l, int v) const { return values[static_cast<std::size_t>(l) * V + v]; }
  double prob(int l, int v) const { return std::exp((*this)(l, v)); }
};

inline PositionLogProbs position_log_probs(const PolicyParams& policy, std::span<const double> z) {
  if (static_cast<int>(z.size()) != policy.h)
    throw std::invalid_argument("embedding dimension does not match policy");
  PositionLogProbs out{policy.L, policy.V, std::vector<double>(static_cast<std::size_t>(policy.L) * policy.V)};
  for (int l = 0; l < policy.L; ++l) {
    double* logits = out.values.data() + static_cast<std::size_t>(l) * policy.V;
    double top = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < policy.V; ++v) {
      const auto w = policy.row(l, v);
      double s = 0.0;
      for (int k = 0; k < policy.h; ++k) s += w[k] * z[k];
      logits[v] = s;
      top = std::max(top, s);
    }
    double norm = 0.0;
    for (int v = 0; v < policy.V; ++v) norm += std::exp(logits[v] - top);
    const double log_norm = top + std::log(norm);
    for (int v = 0; v < policy.V; ++v) logits[v] -= log_norm;
  }
  return out;
}

/// Probability that the policy reproduces `key` exactly.
inline double sequence_success_probability(const PolicyParams& policy, std::span<const double> z,
                                           std::span<const Token> key) {
  const auto lp = position_log_probs(policy, z);
  double s = 0.0;
  for (int l = 0; l < policy.L; ++l) s += lp(l, key[l]);
  return std::exp(s);
}

inline std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("advantages need a group of at least 2");
  const double m = mean(rewards);
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - m;
  return adv;
}

/// One group of a batch together with the embedding of its question.
struct GroupView {
  const RolloutGroup* group = nullptr;
  std::span<const double> embedding;
};

struct LossReport {
  double objective = 0.0;  // surrogate - beta * kl
  double surrogate = 0.0;
  double kl = 0.0;
  std::vector<double> gradient;  // d objective / d weights, same layout as PolicyParams
  double clipped_fraction = 0.0;
  double mean_ratio = 0.0;
  std::size_t tokens = 0;
};

namespace detail {

inline void check_group(const RolloutGroup& g, int L) {
  if (g.responses.empty()) throw std::invalid_argument("rollout group has no responses");
  if (g.behavior_logprobs.size() != g.responses.size() || g.advantages.size() != g.responses.size())
    throw std::invalid_argument("mismatched sequence lengths in rollout group");
  for (std::size_t i = 0; i < g.responses.size(); ++i) {
    if (g.responses[i].empty()) throw std::invalid_argument("empty response");
    if (static_cast<int>(g.responses[i].size()) != L || g.behavior_logprobs[i].size() != g.responses[i].size())
      throw std::invalid_argument("mismatched sequence lengths in rollout group");
    for (double lp : g.behavior_logprobs[i])
      if (!std::isfinite(lp)) throw std::invalid_argument("non-finite behavior log-prob");
  }
}

/// How each token's surrogate term is treated.
enum class TokenMode : std::uint8_t { active, clipped };

/// Shared evaluator. With `frozen` set, tokens are classified by that mask
/// instead of by their current ratio and clipped tokens contribute nothing;
/// this is the smooth function the finite-difference check differentiates.
inline LossReport evaluate_objective(std::span<const GroupView> batch, const PolicyParams& current,
                                     const PolicyParams* ref, double eps_clip, double beta, bool want_gradient,
                                     const std::vector<TokenMode>* frozen, std::vector<TokenMode>* modes_out) {
  LossReport rep;
  if (want_gradient) rep.gradient.assign(current.size(), 0.0);
  if (batch.empty()) return rep;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const int L = current.L;
  const int V = current.V;
  const int h = current.h;
  std::size_t clipped = 0;
  double ratio_sum = 0.0;
  std::size_t token_index = 0;
  std::vector<double> coef(static_cast<std::size_t>(L) * V);

  for (const GroupView& item : batch) {
    const RolloutGroup& g = *item.group;
    check_group(g, L);
    const auto lp = position_log_probs(current, item.embedding);
    const double inv_g = 1.0 / static_cast<double>(g.group_size());
    std::fill(coef.begin(), coef.end(), 0.0);
    double group_sum = 0.0;

    for (std::size_t i = 0; i < g.group_size(); ++i) {
      const auto& o = g.responses[i];
      const double a = g.advantages[i];
      const double inv_len = 1.0 / static_cast<double>(o.size());
      for (int t = 0; t < L; ++t, ++token_index) {
        const double log_ratio = lp(t, o[t]) - g.behavior_logprobs[i][t];
        const double ratio = std::exp(log_ratio);
        ratio_sum += ratio;
        const double clipped_ratio = std::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip);
        const double unclipped_term = ratio * a;
        const double clipped_term = clipped_ratio * a;
        TokenMode mode = clipped_term < unclipped_term ? TokenMode::clipped : TokenMode::active;
        if (frozen) mode = (*frozen)[token_index];
        if (modes_out) modes_out->push_back(mode);
        if (mode == TokenMode::clipped) {
          ++clipped;
          if (!frozen) group_sum += clipped_term * inv_len;
          continue;
        }
        group_sum += unclipped_term * inv_len;
        if (want_gradient && a != 0.0) {
          // d(r a)/d logits_v = r a (1[v = o_t] - pi_v)
          const double scale = unclipped_term * inv_len * inv_g * inv_batch;
          for (int v = 0; v < V; ++v) coef[static_cast<std::size_t>(t) * V + v] -= scale * lp.prob(t, v);
          coef[static_cast<std::size_t>(t) * V + o[t]] += scale;
        }
      }
    }
    rep.surrogate += group_sum * inv_g * inv_batch;

    if (ref && beta > 0.0) {
      const auto lq = position_log_probs(*ref, item.embedding);
      for (int t = 0; t < L; ++t) {
        double kl_t = 0.0;
        for (int v = 0; v < V; ++v) kl_t += lp.prob(t, v) * (lp(t, v) - lq(t, v));
        rep.kl += kl_t / L * inv_batch;
        if (want_gradient) {
          // d KL / d logits_u = p_u (log p_u - log q_u - KL)
          const double scale = beta / L * inv_batch;
          for (int v = 0; v < V; ++v)
            coef[static_cast<std::size_t>(t) * V + v] -= scale * lp.prob(t, v) * (lp(t, v) - lq(t, v) - kl_t);
        }
      }
    }

    if (want_gradient) {
      for (int t = 0; t < L; ++t)
        for (int v = 0; v < V; ++v) {
          const double c = coef[static_cast<std::size_t>(t) * V + v];
          if (c == 0.0) continue;
          double* row = rep.gradient.data() + current.index(t, v, 0);
          for (int k = 0; k < h; ++k) row[k] += c * item.embedding[k];
        }
    }
  }
  rep.tokens = token_index;
  rep.objective = rep.surrogate - beta * rep.kl;
  rep.clipped_fraction = token_index ? static_cast<double>(clipped) / static_cast<double>(token_index) : 0.0;
  rep.mean_ratio = token_index ? ratio_sum / static_cast<double>(token_index) : 0.0;
  return rep;
}

}  // namespace detail

/// Clipped surrogate over a batch, scored against each group's stored
/// behavior log-probs, minus beta times KL(current || ref).
inline LossReport grpo_loss(std::span<const GroupView> batch, const PolicyParams& current, const PolicyParams& ref,
                            double eps_clip, double beta) {
  return detail::evaluate_objective(batch, current, &ref, eps_clip, beta, true, nullptr, nullptr);
}

/// Token-averaged closed-form KL(current || ref) over the positions visited
/// by the batch's questions.
inline double kl_penalty(const PolicyParams& current, const PolicyParams& ref, std::span<const GroupView> batch) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const GroupView& item : batch) {
    const auto lp = position_log_probs(current, item.embedding);
    const auto lq = position_log_probs(ref, item.embedding);
    double per_question = 0.0;
    for (int t = 0; t < current.L; ++t)
      for (int v = 0; v < current.V; ++v) per_question += lp.prob(t, v) * (lp(t, v) - lq(t, v));
    total += per_question / current.L;
  }
  // Closed form is nonnegative; clamp rounding noise.
  return std::max(0.0, total / static_cast<double>(batch.size()));
}

/// Largest elementwise relative error between the analytic gradient of the
/// objective and a central finite difference, over `coordinates` randomly
/// chosen weights. Tokens clipped at `params` are held out of both sides.
/// Relative error uses max(|analytic|, |numeric|, 1e-4) as the denominator.
inline double gradient_check(const PolicyParams& params, std::span<const GroupView> batch, const PolicyParams& ref,
                             double eps_clip, double beta, double eps, std::size_t coordinates = 64,
                             std::uint64_t seed = 0) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite-difference eps must be in [1e-7, 1e-3]");
  std::vector<detail::TokenMode> modes;
  const LossReport base = detail::evaluate_objective(batch, params, &ref, eps_clip, beta, true, nullptr, &modes);
  auto rng = seeded_rng_stream(seed, StreamPurpose::test, 0, 0);
  PolicyParams probe = params;
  double worst = 0.0;
  const std::size_t n = std::min(coordinates, params.size());
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t j = coordinates >= params.size() ? c : rng.below(params.size());
    const double w0 = params.weights[j];
    probe.weights[j] = w0 + eps;
    const double up = detail::evaluate_objective(batch, probe, &ref, eps_clip, beta, false, &modes, nullptr).objective;
    probe.weights[j] = w0 - eps;
    const double down = detail::evaluate_objective(batch, probe, &ref, eps_clip, beta, false, &modes, nullptr).objective;
    probe.weights[j] = w0;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = base.gradient[j];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

// ---- persistence ----

inline void write(BinaryWriter& w, const PolicyParams& p) {
  w.put(p.L);
  w.put(p.V);
  w.put(p.h);
  w.put(p.version);
  w.put_vector(p.weights);
}

inline PolicyParams read_policy(BinaryReader& r) {
  PolicyParams p;
  p.L = r.get<int>();
  p.V = r.get<int>();
  p.h = r.get<int>();
  p.version = r.get<std::uint64_t>();
  p.weights = r.get_vector<double>();
  if (p.weights.size() != static_cast<std::size_t>(p.L) * p.V * p.h) throw FormatError("policy shape mismatch");
  return p;
}

inline constexpr std::string_view kPolicyMagic = "DOTSPOL1";

inline void save_policy(const PolicyParams& p, const std::string& path) {
  BinaryWriter w;
  w.put_header(kPolicyMagic, 1);
  write(w, p);
  w.write_file(path);
}

inline PolicyParams load_policy(const std::string& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_header(kPolicyMagic, 1);
  return read_policy(r);
}

}  // namespace dots
