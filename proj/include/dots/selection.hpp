#pragma once

// Batch samplers: difficulty-targeted selection, uniform selection and the
// static three-stage curriculum.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dots/rng.hpp"

namespace dots {

enum class SelectionStrategy : std::uint8_t { dots, uniform, curriculum };

inline std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::dots: return "dots";
    case SelectionStrategy::uniform: return "uniform";
    case SelectionStrategy::curriculum: return "curriculum";
  }
  return "?";
}

inline SelectionStrategy parse_strategy(const std::string& name) {
  if (name == "dots") return SelectionStrategy::dots;
  if (name == "uniform") return SelectionStrategy::uniform;
  if (name == "curriculum") return SelectionStrategy::curriculum;
  throw std::invalid_argument("unknown selection strategy '" + name + "'");
}

/// One rollout batch: pool indices in draw order plus the probability
/// vector they were drawn from.
struct SelectionPlan {
  std::vector<std::size_t> chosen;
  std::vector<double> probabilities;
  SelectionStrategy strategy = SelectionStrategy::uniform;

  double entropy() const {
    double h = 0.0;
    for (double p : probabilities)
      if (p > 0.0) h -= p * std::log(p);
    return h;
  }

  bool operator==(const SelectionPlan&) const = default;
};

namespace detail {

inline std::vector<double> normalize_log_weights(std::span<const double> log_w) {
  double top = -std::numeric_limits<double>::infinity();
  for (double x : log_w) top = std::max(top, x);
  std::vector<double> p(log_w.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp(log_w[i] - top));
  for (double& x : p) x /= total;
  return p;
}

inline std::vector<double> dots_log_weights(std::span<const double> d_hat, double alpha, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  std::vector<double> lw(d_hat.size());
  for (std::size_t i = 0; i < d_hat.size(); ++i) lw[i] = -std::abs(d_hat[i] - alpha) / tau;
  return lw;
}

}  // namespace detail

/// P(q) proportional to exp(-|d_q - alpha| / tau).
inline std::vector<double> dots_probabilities(std::span<const double> d_hat, double alpha, double tau) {
  if (d_hat.empty()) return {};
  return detail::normalize_log_weights(detail::dots_log_weights(d_hat, alpha, tau));
}

/// Sequential draws without replacement from unnormalized log-weights,
/// renormalizing over the remaining pool after each draw. Weights of -inf
/// are never drawn. Working in log space keeps tiny temperatures usable
/// after the dominant items are exhausted.
inline std::vector<std::size_t> sample_without_replacement(std::span<const double> log_weights,
                                                           std::size_t count, RngStream& rng,
                                                           std::span<const std::size_t> exclude = {}) {
  std::vector<double> lw(log_weights.begin(), log_weights.end());
  for (std::size_t e : exclude) lw.at(e) = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> out;
  out.reserve(count);
  std::vector<double> w(lw.size());
  for (std::size_t draw = 0; draw < count; ++draw) {
    double top = -std::numeric_limits<double>::infinity();
    for (double x : lw) top = std::max(top, x);
    if (top == -std::numeric_limits<double>::infinity())
      throw std::invalid_argument("batch size exceeds the pool's support");
    for (std::size_t i = 0; i < lw.size(); ++i) w[i] = std::exp(lw[i] - top);
    const std::size_t pick = rng.categorical(w);
    out.push_back(pick);
    lw[pick] = -std::numeric_limits<double>::infinity();
  }
  return out;
}

inline SelectionPlan sample_batch(std::span<const double> probabilities, std::size_t batch_size, RngStream& rng,
                                  SelectionStrategy strategy = SelectionStrategy::uniform) {
  if (batch_size > probabilities.size()) throw std::invalid_argument("batch size exceeds pool");
  std::vector<double> lw(probabilities.size());
  for (std::size_t i = 0; i < lw.size(); ++i)
    lw[i] = probabilities[i] > 0.0 ? std::log(probabilities[i]) : -std::numeric_limits<double>::infinity();
  SelectionPlan plan;
  plan.chosen = sample_without_replacement(lw, batch_size, rng);
  plan.probabilities.assign(probabilities.begin(), probabilities.end());
  plan.strategy = strategy;
  return plan;
}

/// Difficulty-targeted plan drawn directly from log-weights.
inline SelectionPlan dots_sample_batch(std::span<const double> d_hat, double alpha, double tau,
                                       std::size_t batch_size, RngStream& rng) {
  if (batch_size > d_hat.size()) throw std::invalid_argument("batch size exceeds pool");
  const auto lw = detail::dots_log_weights(d_hat, alpha, tau);
  SelectionPlan plan;
  plan.chosen = sample_without_replacement(lw, batch_size, rng);
  plan.probabilities = detail::normalize_log_weights(lw);
  plan.strategy = SelectionStrategy::dots;
  return plan;
}

inline SelectionPlan uniform_select(std::size_t pool, std::size_t batch_size, RngStream& rng) {
  if (pool == 0) throw std::invalid_argument("empty pool");
  return sample_batch(std::vector<double>(pool, 1.0 / static_cast<double>(pool)), batch_size, rng,
                      SelectionStrategy::uniform);
}

/// 0 = easiest third (steps 1..ceil(T/3)), 1 = middle (..ceil(2T/3)), 2 = hardest.
inline int curriculum_stage(int step, int T) {
  if (step < 1 || step > T) throw std::invalid_argument("curriculum step outside [1, T]");
  if (step <= (T + 2) / 3) return 0;
  if (step <= (2 * T + 2) / 3) return 1;
  return 2;
}

/// Pool indices of one curriculum stage: the pool sorted by static label
/// (ties by index) and split into thirds [0, n/3), [n/3, 2n/3), [2n/3, n).
inline std::vector<std::size_t> curriculum_pool(std::span<const double> static_labels, int stage) {
  const std::size_t n = static_labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return static_labels[a] < static_labels[b]; });
  const std::size_t lo = static_cast<std::size_t>(stage) * n / 3;
  const std::size_t hi = static_cast<std::size_t>(stage + 1) * n / 3;
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

inline SelectionPlan curriculum_select(std::span<const double> static_labels, int step, int T,
                                       std::size_t batch_size, RngStream& rng) {
  const auto pool = curriculum_pool(static_labels, curriculum_stage(step, T));
  std::vector<double> probs(static_labels.size(), 0.0);
  for (std::size_t i : pool) probs[i] = 1.0 / static_cast<double>(pool.size());
  return sample_batch(probs, batch_size, rng, SelectionStrategy::curriculum);
}

/// True when a fresh reference rollout and prediction pass runs at `step`
/// (1-based): steps 1, 1 + mu, 1 + 2 mu, ...
inline bool select_every_mu(int step, int mu) {
  if (mu < 1) throw std::invalid_argument("mu must be >= 1");
  return (step - 1) % mu == 0;
}

}  // namespace dots
