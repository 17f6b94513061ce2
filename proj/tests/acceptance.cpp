// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dots/dots.hpp"

using namespace dots;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shared by the end-to-end criteria: one bank and one pretrained predictor.
struct Testbed {
  QuestionBank bank;
  PredictorParams predictor;
  double pretrain_seconds = 0.0;
};

const Testbed& testbed() {
  static const Testbed tb = [] {
    const auto t0 = std::chrono::steady_clock::now();
    Testbed t;
    BankConfig bc;
    bc.N = 2048;
    bc.n_clusters = 16;
    bc.seed = 1;
    t.bank = generate_bank(bc);
    t.predictor = pretrain_predictor(t.bank, TrainerConfig{}, PretrainOptions{}).params;
    t.pretrain_seconds = seconds_since(t0);
    return t;
  }();
  return tb;
}

const std::vector<std::uint64_t> kSeeds = {1, 2, 3, 4, 5};

const ExperimentReport& desk_comparison() {
  static const ExperimentReport rep =
      run_experiment(testbed().bank, {"uniform", "curriculum", "dots"}, TrainerConfig{}, kSeeds, testbed().predictor);
  return rep;
}

Outcome gradient_probe() {
  std::vector<double> grid;
  for (int i = 1; i <= 9; ++i) grid.push_back(i / 10.0);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = probe_gradient_signal(8, grid, 100000, 16, 12345);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  bool all_within = true;
  for (const auto& pt : rep.points) {
    worst = std::max(worst, std::abs(pt.estimate - pt.theory) / pt.std_error);
    all_within = all_within && pt.within(3.0);
  }
  const bool argmax_ok = std::abs(rep.argmax_p() - 0.5) < 1e-12;
  return {all_within && argmax_ok && secs < 30.0,
          fmt("max |z| = %.2f over 9 points, argmax p = %.1f, %.1fs single-threaded", worst, rep.argmax_p(), secs)};
}

Outcome exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  BankConfig bc;
  bc.N = 64;
  bc.n_clusters = 4;
  bc.seed = 7;
  const QuestionBank bank = generate_bank(bc);

  // Advantages sum to zero.
  auto rng = seeded_rng_stream(1, StreamPurpose::test, 0);
  double worst_sum = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int G = 2 + static_cast<int>(rng.below(15));
    std::vector<double> r(G);
    for (double& x : r) x = rng.bernoulli(rng.uniform()) ? 1.0 : 0.0;
    const auto a = compute_advantages(r);
    worst_sum = std::max(worst_sum, std::abs(std::accumulate(a.begin(), a.end(), 0.0)));
  }
  const bool zero_sum = worst_sum <= 1e-12;

  // Degenerate groups contribute exactly zero gradient.
  PolicyParams policy = bank.base_policy;
  auto prng = seeded_rng_stream(1, StreamPurpose::test, 1);
  for (double& w : policy.weights) w += 0.3 * prng.normal();
  bool degenerate_zero = true;
  for (std::size_t qi = 0; qi < 8; ++qi) {
    RolloutGroup g = rollout(policy, bank.questions[qi], 8, prng);
    for (double value : {0.0, 1.0}) {
      std::fill(g.rewards.begin(), g.rewards.end(), value);
      g.mean_reward = value;
      g.advantages = compute_advantages(g.rewards);
      const GroupView view{&g, bank.questions[qi].embedding};
      const auto loss = grpo_loss(std::span(&view, 1), policy, policy, 0.2, 0.0);
      degenerate_zero = degenerate_zero && std::all_of(loss.gradient.begin(), loss.gradient.end(),
                                                       [](double x) { return x == 0.0; });
    }
  }

  // Behavior equal to current: every ratio is exactly 1 and the objective
  // equals the on-policy value bit for bit.
  std::vector<RolloutGroup> groups;
  for (std::size_t qi = 0; qi < 16; ++qi) groups.push_back(rollout(policy, bank.questions[qi], 8, prng));
  std::vector<GroupView> views;
  for (std::size_t i = 0; i < groups.size(); ++i) views.push_back({&groups[i], bank.questions[i].embedding});
  const auto on_policy = grpo_loss(views, policy, policy, 0.2, 0.0);
  double onpolicy_surrogate = 0.0;
  for (const auto& g : groups) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.group_size(); ++i) s += g.advantages[i];
    onpolicy_surrogate += s / static_cast<double>(g.group_size());
  }
  onpolicy_surrogate /= static_cast<double>(groups.size());
  const bool ratio_exact = on_policy.mean_ratio == 1.0 && on_policy.clipped_fraction == 0.0 &&
                           std::abs(on_policy.surrogate - onpolicy_surrogate) <= 1e-15;

  // Analytic gradient against central differences on a stale batch.
  PolicyParams moved = policy;
  for (double& w : moved.weights) w += 0.05 * prng.normal();
  const double rel = gradient_check(moved, views, policy, 0.2, 0.01, 1e-6, 256, 3);
  const double secs = seconds_since(t0);
  return {zero_sum && degenerate_zero && ratio_exact && rel < 1e-5 && secs < 10.0,
          fmt("max |sum A| = %.1e, degenerate gradients zero: %s, on-policy ratios exact: %s, "
              "max rel. gradient error %.2e, %.1fs",
              worst_sum, degenerate_zero ? "yes" : "no", ratio_exact ? "yes" : "no", rel, secs)};
}

Outcome predictor_quality() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& tb = testbed();
  TrainerConfig cfg;
  cfg.seed = 1;
  const auto trace = run_strategy(tb.bank, StrategySpec{SelectionStrategy::dots, false}, cfg, tb.predictor);
  const double rho = mean_pearson(trace);
  int steps = 0;
  for (const auto& r : trace.steps) steps += !std::isnan(r.pearson_rho);
  const double secs = seconds_since(t0) + tb.pretrain_seconds;
  return {rho >= 0.7 && secs < 300.0,
          fmt("mean held-out pearson %.4f over %d selection steps (N=2048, 16 clusters), %.1fs incl. pretraining",
              rho, steps, secs)};
}

Outcome effective_gain() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& rep = desk_comparison();
  double dots = 0.0, uniform = 0.0;
  for (auto s : kSeeds) {
    dots += mean_effective_ratio(rep.trace("dots", s)) / kSeeds.size();
    uniform += mean_effective_ratio(rep.trace("uniform", s)) / kSeeds.size();
  }
  const double gap = 100.0 * (dots - uniform);
  const double secs = seconds_since(t0);
  return {gap >= 10.0 && secs < 900.0,
          fmt("effective ratio dots %.4f vs uniform %.4f, gap %.1f pp over 5 seeds, %.1fs", dots, uniform, gap, secs)};
}

Outcome replay_neutrality() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& tb = testbed();
  const TrainerConfig cfg = full_scale_config();
  const auto rep = run_experiment(tb.bank, {"dots", "dots+rr"}, cfg, kSeeds, tb.predictor);
  double worst = 0.0, final_dots = 0.0, final_rr = 0.0;
  long fresh_dots = 0, fresh_rr = 0;
  for (auto s : kSeeds) {
    const auto& a = rep.trace("dots", s);
    const auto& b = rep.trace("dots+rr", s);
    worst = std::max(worst, std::abs(a.steps.back().mean_reward - b.steps.back().mean_reward));
    final_dots += a.steps.back().mean_reward / kSeeds.size();
    final_rr += b.steps.back().mean_reward / kSeeds.size();
    fresh_dots += total_batch_rollouts(a);
    fresh_rr += total_batch_rollouts(b);
  }
  const double share = static_cast<double>(fresh_rr) / static_cast<double>(fresh_dots);

  // Reported only: with B=64 the same capacity holds about 16 steps of
  // rollouts instead of 2, and the replayed half of the batch is much staler.
  const auto desk = run_experiment(tb.bank, {"dots+rr"}, TrainerConfig{}, kSeeds, tb.predictor);
  double desk_gap = 0.0, desk_worst = 0.0;
  for (auto s : kSeeds) {
    const double d = desk_comparison().trace("dots", s).steps.back().mean_reward -
                     desk.trace("dots+rr", s).steps.back().mean_reward;
    desk_gap += d / kSeeds.size();
    desk_worst = std::max(desk_worst, std::abs(d));
  }
  const double secs = seconds_since(t0);
  return {worst <= 0.02 && share <= 0.55,
          fmt("final reward dots %.4f vs dots+rr %.4f, max paired gap %.4f, fresh batch rollouts %.1f%% "
              "(B=%d, K=%d, C=%d); at B=64 the mean gap is %.4f, max %.4f; %.1fs",
              final_dots, final_rr, worst, 100.0 * share, cfg.B, cfg.K, cfg.C, desk_gap, desk_worst, secs)};
}

Outcome baseline_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& rep = desk_comparison();
  int wins = 0;
  std::string aucs;
  for (auto s : kSeeds) {
    const double a = reward_auc(rep.trace("dots", s)), b = reward_auc(rep.trace("curriculum", s));
    wins += a > b;
    aucs += fmt(" %.2f/%.2f", a, b);
  }
  return {wins >= 4, fmt("dots beats curriculum on %d of 5 seeds (auc dots/curriculum:%s), %.1fs", wins,
                         aucs.c_str(), seconds_since(t0))};
}

Outcome buffer_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  auto run = [](std::uint64_t seed, std::vector<std::uint64_t>& sampled) {
    auto rng = seeded_rng_stream(seed, StreamPurpose::test, 2);
    const std::size_t capacity = 1 + rng.below(64);
    ReplayBuffer buf(capacity);
    bool gate = true, bound = true, fifo = true;
    std::uint64_t last_evicted = 0;
    bool any_evicted = false;
    for (int op = 0; op < 10000; ++op) {
      if (rng.uniform() < 0.7) {
        RolloutGroup g;
        g.question_id = op;
        g.step_created = op;
        const int G = 2 + static_cast<int>(rng.below(7));
        const int k = static_cast<int>(rng.below(G + 1));
        g.rewards.assign(G, 0.0);
        for (int i = 0; i < k; ++i) g.rewards[i] = 1.0;
        g.mean_reward = mean(g.rewards);
        std::vector<std::uint64_t> evicted;
        store_if_informative(buf, g, &evicted);
        for (auto e : evicted) {
          fifo = fifo && (!any_evicted || e > last_evicted);
          last_evicted = e;
          any_evicted = true;
        }
      } else {
        const auto s = sample_replay(buf, rng.below(capacity + 8), rng);
        for (const auto* g : s.groups) sampled.push_back(static_cast<std::uint64_t>(g->question_id));
      }
      bound = bound && buf.size() <= capacity;
      for (const auto& e : buf.entries()) gate = gate && is_informative(e.group);
      for (std::size_t i = 1; i < buf.size(); ++i)
        fifo = fifo && buf.entries()[i - 1].sequence < buf.entries()[i].sequence;
      if (!buf.empty() && any_evicted) fifo = fifo && buf.entries().front().sequence > last_evicted;
    }
    return std::tuple{gate, bound, fifo, buf};
  };
  bool gate = true, bound = true, fifo = true, determinism = true;
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    std::vector<std::uint64_t> s1, s2;
    auto [g1, b1, f1, buf1] = run(seed, s1);
    auto [g2, b2, f2, buf2] = run(seed, s2);
    gate = gate && g1;
    bound = bound && b1;
    fifo = fifo && f1;
    determinism = determinism && s1 == s2 && buf1 == buf2;
  }
  const double secs = seconds_since(t0);
  return {gate && bound && fifo && determinism && secs < 5.0,
          fmt("gate %s, capacity %s, FIFO %s, determinism %s over 8 sequences of 10^4 operations, %.2fs",
              gate ? "ok" : "VIOLATED", bound ? "ok" : "VIOLATED", fifo ? "ok" : "VIOLATED",
              determinism ? "ok" : "VIOLATED", secs)};
}

Outcome calibration_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  auto rng = seeded_rng_stream(11, StreamPurpose::test, 3);
  double identity_err = 0.0, fixed_err = 0.0, hull_excess = 0.0;
  bool monotone = true;
  for (int trial = 0; trial < 10000; ++trial) {
    const double d = rng.uniform(kLogitClamp, 1.0 - kLogitClamp);
    identity_err = std::max(identity_err, std::abs(calibrate(d, PlattParams{1.0, 0.0}) - d));
    const PlattParams platt{rng.uniform(0.01, 5.0), rng.uniform(-1.0, 1.0)};
    fixed_err = std::max(fixed_err, std::abs(calibrate(0.5, PlattParams{platt.w, 0.0}) - 0.5));
    const double a = rng.uniform(), b = rng.uniform();
    const double lo = std::min(a, b), hi = std::max(a, b);
    monotone = monotone && calibrate(lo, platt) <= calibrate(hi, platt);

    const std::size_t K = 1 + rng.below(32), h = 1 + rng.below(16);
    nn::Matrix emb(K, h);
    std::vector<double> diffs(K);
    for (double& x : emb.data) x = 3.0 * rng.normal();
    for (double& x : diffs) x = rng.uniform();
    const ReferenceSet refs({}, emb, diffs);
    std::vector<double> q(h);
    for (double& x : q) x = 3.0 * rng.normal();
    const double p = attention_predict(q, refs);
    const auto [mn, mx] = std::minmax_element(diffs.begin(), diffs.end());
    hull_excess = std::max({hull_excess, *mn - p, p - *mx});
  }
  const double secs = seconds_since(t0);
  return {identity_err <= 1e-12 && fixed_err == 0.0 && monotone && hull_excess <= 0.0 && secs < 5.0,
          fmt("identity error %.1e, fixed-point error %.1e, monotone %s, hull excess %.1e over 10^4 instances, %.2fs",
              identity_err, fixed_err, monotone ? "yes" : "no", hull_excess, secs)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient second moment vs success rate", gradient_probe},
      {"exactness suite", exactness},
      {"predictor quality", predictor_quality},
      {"effective-question gain", effective_gain},
      {"replay neutrality", replay_neutrality},
      {"baseline ordering vs curriculum", baseline_ordering},
      {"replay buffer properties", buffer_properties},
      {"calibration properties", calibration_properties},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %zu/%zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria.size(), criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
