#pragma once

// Offline training data for the difficulty predictor. A separately seeded
// uniform-selection run is snapshotted at regular intervals; at every
// snapshot several reference sets and query sets are rolled out, giving
// (query, reference set, realized difficulty) records at many different
// points of training.

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "dots/bank.hpp"
#include "dots/difficulty.hpp"
#include "dots/trainer.hpp"

namespace dots {

struct HarvestOptions {
  std::uint64_t seed = 9001;  // seed of the harvest run, kept apart from evaluation seeds
  int steps = 60;
  int snapshot_every = 6;
  int refsets_per_snapshot = 4;
  int K = 64;
  int queries_per_refset = 128;
  int G = 8;
};

inline PredictorTask harvest_task(const QuestionBank& bank, const PolicyParams& policy, const HarvestOptions& opts,
                                  int snapshot_step, int refset) {
  const std::size_t K = static_cast<std::size_t>(opts.K);
  const std::size_t Q = static_cast<std::size_t>(opts.queries_per_refset);
  if (K + Q > bank.size()) throw std::invalid_argument("K + queries_per_refset exceeds the bank size");
  const auto ustep = static_cast<std::uint64_t>(snapshot_step);
  const auto base = static_cast<std::uint64_t>(refset) * (bank.size() + 1);
  auto pick = seeded_rng_stream(opts.seed, StreamPurpose::harvest, ustep, base);
  const auto rows = sample_without_replacement(std::vector<double>(bank.size(), 0.0), K + Q, pick);

  PredictorTask task;
  const std::vector<std::size_t> ref_rows(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(K));
  const std::vector<std::size_t> query_rows(rows.begin() + static_cast<std::ptrdiff_t>(K), rows.end());
  task.ref_raw = raw_embeddings(bank, ref_rows);
  task.query_raw = raw_embeddings(bank, query_rows);
  auto label = [&](std::size_t qi) {
    auto rng = seeded_rng_stream(opts.seed, StreamPurpose::harvest, ustep, base + 1 + qi);
    return ground_truth_difficulty(rollout(policy, bank.questions[qi], opts.G, rng, snapshot_step).rewards);
  };
  for (std::size_t qi : ref_rows) task.ref_difficulties.push_back(label(qi));
  for (std::size_t qi : query_rows) task.query_labels.push_back(label(qi));
  return task;
}

/// Tasks in snapshot order; snapshot 0 is the base policy.
inline std::vector<PredictorTask> harvest_tasks(const QuestionBank& bank, const TrainerConfig& cfg,
                                                const HarvestOptions& opts) {
  if (opts.snapshot_every < 1 || opts.refsets_per_snapshot < 1) throw std::invalid_argument("bad harvest options");
  TrainerConfig c = cfg;
  c.seed = opts.seed;
  c.T = opts.steps;
  c.G = opts.G;
  const StrategySpec uniform{SelectionStrategy::uniform, false};
  c = validate_config(uniform.apply(c));
  const TrainContext ctx = make_context(bank, uniform);
  TrainRunState state = initial_state(bank, c);

  std::vector<PredictorTask> tasks;
  auto snapshot = [&] {
    for (int r = 0; r < opts.refsets_per_snapshot; ++r) tasks.push_back(harvest_task(bank, state.current, opts, state.step, r));
  };
  snapshot();
  while (state.step < c.T) {
    state = train_step(ctx, state, c).state;
    if (state.step % opts.snapshot_every == 0) snapshot();
  }
  return tasks;
}

struct PretrainOptions {
  HarvestOptions harvest;
  PredictorTrainingOptions training;
  std::size_t width = 64;
  std::size_t head_width = 16;
  double holdout_fraction = 0.2;
};

struct PretrainResult {
  PredictorParams params;
  std::vector<double> epoch_loss;
  std::vector<PredictorTask> train;
  std::vector<PredictorTask> heldout;
};

/// Held-out tasks are chosen at random with a seed derived from the harvest.
inline PretrainResult pretrain_predictor(const QuestionBank& bank, const TrainerConfig& cfg, const PretrainOptions& opts) {
  auto tasks = harvest_tasks(bank, cfg, opts.harvest);
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded_rng_stream(opts.harvest.seed, StreamPurpose::predictor_shuffle, 0, 1u << 20);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n_hold = static_cast<std::size_t>(std::lround(opts.holdout_fraction * static_cast<double>(tasks.size())));

  PretrainResult res;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_hold ? res.heldout : res.train).push_back(std::move(tasks[order[i]]));
  auto init = PredictorParams::make(static_cast<std::size_t>(bank.h), opts.width, opts.head_width, opts.training.seed);
  auto trained = train_predictor(std::move(init), res.train, opts.training);
  res.params = std::move(trained.params);
  res.epoch_loss = std::move(trained.epoch_loss);
  return res;
}

struct PredictorScore {
  std::optional<double> rho_calibrated;
  std::optional<double> rho_raw;
  double mean_abs_error = 0.0;
  double bce = 0.0;  // mean per record
  std::size_t records = 0;
};

/// Mean of per-task Pearson correlations (each task is one reference set at
/// one policy snapshot, like one selection step), plus pooled errors.
inline PredictorScore score_predictor(const PredictorParams& params, std::span<const PredictorTask> tasks) {
  PredictorScore s;
  double rc = 0.0, rr = 0.0;
  std::size_t nc = 0, nr = 0;
  for (const auto& t : tasks) {
    const auto ev = evaluate_task(params, t);
    if (auto r = pearson(ev.calibrated, t.query_labels)) {
      rc += *r;
      ++nc;
    }
    if (auto r = pearson(ev.raw, t.query_labels)) {
      rr += *r;
      ++nr;
    }
    for (std::size_t i = 0; i < t.records(); ++i) s.mean_abs_error += std::abs(ev.calibrated[i] - t.query_labels[i]);
    s.bce += ev.bce;
    s.records += t.records();
  }
  if (nc) s.rho_calibrated = rc / static_cast<double>(nc);
  if (nr) s.rho_raw = rr / static_cast<double>(nr);
  if (s.records) {
    s.mean_abs_error /= static_cast<double>(s.records);
    s.bce /= static_cast<double>(s.records);
  }
  return s;
}

}  // namespace dots
