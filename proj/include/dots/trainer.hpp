#pragma once

// The training loop: selection, rollouts, replay, one GRPO update and the
// buffer store, plus checkpoints and multi-strategy experiments.

#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dots/bank.hpp"
#include "dots/core.hpp"
#include "dots/difficulty.hpp"
#include "dots/grpo.hpp"
#include "dots/metrics.hpp"
#include "dots/replay.hpp"
#include "dots/rng.hpp"
#include "dots/selection.hpp"
#include "dots/serialize.hpp"

namespace dots {

/// A strategy label such as "dots", "uniform+rr" or "curriculum".
/// Without "+rr" the run is fully on-policy (delta = 1, no buffer).
struct StrategySpec {
  SelectionStrategy selection = SelectionStrategy::dots;
  bool replay = false;

  std::string label() const { return to_string(selection) + (replay ? "+rr" : ""); }

  TrainerConfig apply(TrainerConfig cfg) const {
    if (!replay) {
      cfg.delta = 1.0;
      cfg.C = 0;
    }
    return cfg;
  }
};

inline StrategySpec parse_strategy_spec(const std::string& label) {
  const std::string suffix = "+rr";
  StrategySpec s;
  std::string base = label;
  if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
    s.replay = true;
    base.resize(base.size() - suffix.size());
  }
  s.selection = parse_strategy(base);
  return s;
}

/// Read-only inputs shared by every step of one run.
struct TrainContext {
  const QuestionBank* bank = nullptr;
  StrategySpec strategy;
  std::optional<PredictorParams> predictor;  // frozen; raw embeddings and identity calibration when absent
  nn::Matrix attention_space;                // N x h rows the attention scores run on
  std::vector<double> static_labels;         // curriculum ordering
  const QuestionBank* heldout = nullptr;     // optional evaluation-only bank sharing the policy shape

  std::size_t pool() const { return bank->size(); }

  PlattParams platt(const ReferenceSet& refs) const {
    return predictor ? predictor->head.evaluate(refs.mu, refs.sigma) : PlattParams{};
  }
};

inline nn::Matrix raw_embeddings(const QuestionBank& bank, std::span<const std::size_t> rows = {}) {
  const std::size_t n = rows.empty() ? bank.size() : rows.size();
  nn::Matrix m(n, static_cast<std::size_t>(bank.h));
  for (std::size_t r = 0; r < n; ++r) {
    const auto& e = bank.questions[rows.empty() ? r : rows[r]].embedding;
    std::copy(e.begin(), e.end(), m.data.begin() + static_cast<std::ptrdiff_t>(r * m.cols));
  }
  return m;
}

inline TrainContext make_context(const QuestionBank& bank, StrategySpec strategy,
                                 std::optional<PredictorParams> predictor = std::nullopt,
                                 double label_noise = BankConfig{}.label_noise) {
  TrainContext ctx;
  ctx.bank = &bank;
  ctx.strategy = strategy;
  ctx.predictor = std::move(predictor);
  const nn::Matrix raw = raw_embeddings(bank);
  ctx.attention_space = ctx.predictor ? ctx.predictor->embed(raw) : raw;
  ctx.static_labels = static_difficulty_labels(bank, label_noise);
  return ctx;
}

struct TrainRunState {
  int step = 0;  // steps completed
  PolicyParams current;
  PolicyParams old;  // snapshot taken at the start of the latest step
  PolicyParams reference;
  std::vector<double> velocity;
  ReplayBuffer buffer;
  std::deque<SelectionPlan> pending;

  bool operator==(const TrainRunState&) const = default;
};

inline TrainRunState initial_state(const QuestionBank& bank, const TrainerConfig& cfg) {
  validate_config(cfg);
  TrainRunState s;
  s.current = bank.base_policy;
  s.old = bank.base_policy;
  s.reference = bank.base_policy;
  s.velocity.assign(bank.base_policy.size(), 0.0);
  s.buffer = ReplayBuffer(static_cast<std::size_t>(cfg.C));
  return s;
}

struct StepOutcome {
  TrainRunState state;
  StepReport report;
  SelectionPlan plan;                          // the plan that supplied this step's fresh questions
  std::vector<std::size_t> references;         // empty on non-selection steps
  std::vector<DifficultyEstimate> estimates;   // ground truth for references and probes, predictions for probes
};

namespace detail {

struct PredictionPass {
  std::vector<std::size_t> references;
  std::vector<double> d_hat;  // whole pool; references carry their ground truth
  std::optional<double> rho;
  std::vector<DifficultyEstimate> estimates;
  long rollouts = 0;
};

inline PredictionPass predict_pool(const TrainContext& ctx, const PolicyParams& policy, const TrainerConfig& cfg,
                                   int step) {
  const auto& bank = *ctx.bank;
  const std::size_t N = bank.size();
  if (static_cast<std::size_t>(cfg.K) > N) throw ConfigError("K exceeds the bank size");
  PredictionPass pass;
  const auto ustep = static_cast<std::uint64_t>(step);
  const std::vector<double> flat(N, 0.0);
  auto pick = seeded_rng_stream(cfg.seed, StreamPurpose::reference_pick, ustep);
  pass.references = sample_without_replacement(flat, static_cast<std::size_t>(cfg.K), pick);

  std::vector<double> ref_d;
  nn::Matrix ref_emb(pass.references.size(), ctx.attention_space.cols);
  for (std::size_t r = 0; r < pass.references.size(); ++r) {
    const std::size_t qi = pass.references[r];
    auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::reference_rollout, ustep, qi);
    const auto g = rollout(policy, bank.questions[qi], cfg.G, rng, step);
    ref_d.push_back(ground_truth_difficulty(g.rewards));
    for (std::size_t c = 0; c < ref_emb.cols; ++c) ref_emb(r, c) = ctx.attention_space(qi, c);
    pass.estimates.push_back({bank.questions[qi].id, step, ref_d.back(), EstimateKind::ground_truth});
  }
  pass.rollouts = static_cast<long>(pass.references.size()) * cfg.G;
  const ReferenceSet refs({}, std::move(ref_emb), ref_d);
  const PlattParams platt = ctx.platt(refs);

  pass.d_hat.assign(N, 0.0);
  std::vector<char> is_ref(N, 0);
  for (std::size_t r = 0; r < pass.references.size(); ++r) {
    is_ref[pass.references[r]] = 1;
    pass.d_hat[pass.references[r]] = ref_d[r];
  }
  for (std::size_t qi = 0; qi < N; ++qi) {
    if (is_ref[qi]) continue;
    const std::span<const double> z(&ctx.attention_space.data[qi * ctx.attention_space.cols],
                                    ctx.attention_space.cols);
    pass.d_hat[qi] = calibrate(attention_predict(z, refs), platt);
  }

  const std::size_t probes = std::min<std::size_t>(static_cast<std::size_t>(cfg.probe_size), N - refs.size());
  if (probes > 0) {
    std::vector<double> lw(N, 0.0);
    for (std::size_t qi = 0; qi < N; ++qi)
      if (is_ref[qi]) lw[qi] = -std::numeric_limits<double>::infinity();
    auto prng = seeded_rng_stream(cfg.seed, StreamPurpose::probe_pick, ustep);
    std::vector<double> pred, truth;
    for (std::size_t qi : sample_without_replacement(lw, probes, prng)) {
      auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::probe_rollout, ustep, qi);
      const auto g = rollout(policy, bank.questions[qi], cfg.G, rng, step);
      pred.push_back(pass.d_hat[qi]);
      truth.push_back(ground_truth_difficulty(g.rewards));
      const QuestionId id = bank.questions[qi].id;
      pass.estimates.push_back({id, step, pred.back(), EstimateKind::predicted_calibrated});
      pass.estimates.push_back({id, step, truth.back(), EstimateKind::ground_truth});
    }
    pass.rho = pearson(pred, truth);
  }
  return pass;
}

}  // namespace detail

/// One full step. The input state is never modified, so a step that throws
/// leaves the caller's state exactly as it was.
inline StepOutcome train_step(const TrainContext& ctx, const TrainRunState& state, const TrainerConfig& config) {
  const TrainerConfig cfg = validate_config(config);
  const auto& bank = *ctx.bank;
  const int t = state.step + 1;
  const auto ut = static_cast<std::uint64_t>(t);
  const std::size_t fresh_n = static_cast<std::size_t>(cfg.fresh_count());
  if (fresh_n > bank.size()) throw ConfigError("delta*B exceeds the bank size");

  StepOutcome out;
  TrainRunState& next = out.state;
  next = state;
  next.old = state.current;
  const PolicyParams& behavior = next.old;

  StepReport& rep = out.report;
  rep.step = t;
  rep.strategy = ctx.strategy.label();
  rep.seed = cfg.seed;

  // (a) selection
  switch (ctx.strategy.selection) {
    case SelectionStrategy::dots: {
      if (select_every_mu(t, cfg.mu) || next.pending.empty()) {
        auto pass = detail::predict_pool(ctx, behavior, cfg, t);
        next.pending.clear();
        for (int j = 0; j < cfg.mu; ++j) {
          auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::batch_select, ut, static_cast<std::uint64_t>(j));
          next.pending.push_back(dots_sample_batch(pass.d_hat, cfg.alpha, cfg.tau, fresh_n, rng));
        }
        rep.reference_rollouts = pass.rollouts;
        if (pass.rho) rep.pearson_rho = *pass.rho;
        out.references = std::move(pass.references);
        out.estimates = std::move(pass.estimates);
      }
      break;
    }
    case SelectionStrategy::uniform: {
      auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::batch_select, ut);
      next.pending.assign(1, uniform_select(bank.size(), fresh_n, rng));
      break;
    }
    case SelectionStrategy::curriculum: {
      auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::batch_select, ut);
      next.pending.assign(1, curriculum_select(ctx.static_labels, t, cfg.T, fresh_n, rng));
      break;
    }
  }
  out.plan = next.pending.front();
  next.pending.pop_front();

  // (c) fresh rollouts
  std::vector<RolloutGroup> fresh;
  std::vector<std::size_t> fresh_rows;
  auto roll = [&](std::size_t qi) {
    auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::fresh_rollout, ut, qi);
    fresh.push_back(rollout(behavior, bank.questions[qi], cfg.G, rng, t));
    fresh_rows.push_back(qi);
  };
  for (std::size_t qi : out.plan.chosen) roll(qi);
  std::vector<double> fresh_d;
  for (const auto& g : fresh) fresh_d.push_back(ground_truth_difficulty(g.rewards));
  rep.effective_ratio = effective_ratio(fresh_d);

  // (d) replay, with fresh backfill on shortfall
  ReplaySample replayed;
  const auto replay_n = static_cast<std::size_t>(cfg.replay_count());
  if (replay_n > 0) {
    auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::replay_sample, ut);
    replayed = sample_replay(state.buffer, replay_n, rng);
  }
  if (replayed.shortfall > 0) {
    std::vector<double> lw(out.plan.probabilities.size());
    for (std::size_t i = 0; i < lw.size(); ++i)
      lw[i] = out.plan.probabilities[i] > 0.0 ? std::log(out.plan.probabilities[i])
                                              : -std::numeric_limits<double>::infinity();
    auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::backfill_select, ut);
    for (std::size_t qi : sample_without_replacement(lw, replayed.shortfall, rng, out.plan.chosen)) roll(qi);
  }
  rep.replayed_groups = static_cast<int>(replayed.groups.size());
  rep.backfilled_groups = static_cast<int>(replayed.shortfall);

  // (e) one update on the combined batch
  std::vector<GroupView> batch;
  for (std::size_t i = 0; i < fresh.size(); ++i) batch.push_back({&fresh[i], bank.questions[fresh_rows[i]].embedding});
  for (const RolloutGroup* g : replayed.groups) {
    const auto qi = static_cast<std::size_t>(g->question_id);
    if (qi >= bank.size() || bank.questions[qi].id != g->question_id)
      throw std::logic_error("replayed group refers to a question outside the bank");
    batch.push_back({g, bank.questions[qi].embedding});
  }
  const LossReport loss = grpo_loss(batch, behavior, next.reference, cfg.eps_clip, cfg.beta);
  for (std::size_t i = 0; i < next.current.weights.size(); ++i) {
    next.velocity[i] = cfg.momentum * next.velocity[i] + loss.gradient[i];
    next.current.weights[i] += cfg.lr * next.velocity[i];
  }
  next.current.version = static_cast<std::uint64_t>(t);
  if (!next.current.all_finite()) throw std::runtime_error("policy update produced non-finite weights");

  // (f) store informative fresh groups
  for (const auto& g : fresh) store_if_informative(next.buffer, g);
  next.step = t;

  double batch_reward = 0.0;
  for (const auto& g : fresh) batch_reward += g.mean_reward;
  rep.batch_mean_reward = batch_reward / static_cast<double>(fresh.size());
  rep.batch_rollouts = static_cast<long>(fresh.size()) * cfg.G;
  rep.fresh_rollouts = rep.batch_rollouts + rep.reference_rollouts;
  rep.buffer_size = static_cast<long>(next.buffer.size());
  rep.clipped_fraction = loss.clipped_fraction;
  rep.mean_ratio = loss.mean_ratio;
  rep.objective = loss.objective;
  rep.mean_reward = bank_success_rate(next.current, bank);
  if (ctx.heldout) rep.heldout_mean_reward = bank_success_rate(next.current, *ctx.heldout);
  return out;
}

// ---- checkpoints ----

inline constexpr std::string_view kCheckpointMagic = "DOTSCKPT";

inline void write(BinaryWriter& w, const SelectionPlan& p) {
  std::vector<std::uint64_t> chosen(p.chosen.begin(), p.chosen.end());
  w.put_vector(chosen);
  w.put_vector(p.probabilities);
  w.put(static_cast<std::uint8_t>(p.strategy));
}

inline SelectionPlan read_selection_plan(BinaryReader& r) {
  SelectionPlan p;
  const auto chosen = r.get_vector<std::uint64_t>();
  p.chosen.assign(chosen.begin(), chosen.end());
  p.probabilities = r.get_vector<double>();
  const auto s = r.get<std::uint8_t>();
  if (s > 2) throw FormatError("bad selection strategy tag");
  p.strategy = static_cast<SelectionStrategy>(s);
  for (auto c : p.chosen)
    if (c >= p.probabilities.size()) throw FormatError("selection plan index out of range");
  return p;
}

struct Checkpoint {
  std::string strategy;
  TrainerConfig config;
  TrainRunState state;
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  BinaryWriter w;
  w.put_header(kCheckpointMagic, 1);
  w.put_string(ck.strategy);
  write(w, ck.config);
  const auto& s = ck.state;
  w.put<std::int32_t>(s.step);
  write(w, s.current);
  write(w, s.old);
  write(w, s.reference);
  w.put_vector(s.velocity);
  write(w, s.buffer);
  w.put<std::uint64_t>(s.pending.size());
  for (const auto& p : s.pending) write(w, p);
  w.write_file(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_header(kCheckpointMagic, 1);
  Checkpoint ck;
  ck.strategy = r.get_string();
  ck.config = read_trainer_config(r);
  auto& s = ck.state;
  s.step = r.get<std::int32_t>();
  s.current = read_policy(r);
  s.old = read_policy(r);
  s.reference = read_policy(r);
  s.velocity = r.get_vector<double>();
  s.buffer = read_replay_buffer(r);
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) s.pending.push_back(read_selection_plan(r));
  if (!r.at_end()) throw FormatError("trailing bytes in checkpoint '" + path + "'");
  if (s.velocity.size() != s.current.size()) throw FormatError("checkpoint velocity has the wrong size");
  return ck;
}

// ---- run log ----

inline constexpr const char* kRunLogHeader = "step,strategy,entropy,chosen_ids";

/// One line per step: step, strategy label, entropy of the probability
/// vector the fresh batch was drawn from, then the chosen ids separated by
/// spaces.
inline void write_run_log_line(std::ostream& out, const StepOutcome& o, const QuestionBank& bank) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", o.plan.entropy());
  out << o.report.step << ',' << o.report.strategy << ',' << buf << ',';
  for (std::size_t i = 0; i < o.plan.chosen.size(); ++i)
    out << (i ? " " : "") << bank.questions[o.plan.chosen[i]].id;
  out << '\n';
}

// ---- runs ----

struct RunOptions {
  // Called after every committed step.
  std::function<void(const StepOutcome&)> on_step;
  int checkpoint_every = 0;  // 0 disables
  std::string checkpoint_path;
};

/// Runs steps state.step+1 .. cfg.T and returns the trace of those steps.
inline RunTrace run_training(const TrainContext& ctx, TrainRunState& state, const TrainerConfig& cfg,
                             const RunOptions& opts = {}) {
  RunTrace trace;
  trace.strategy = ctx.strategy.label();
  trace.seed = cfg.seed;
  trace.initial_mean_reward = bank_success_rate(state.current, *ctx.bank);
  while (state.step < cfg.T) {
    StepOutcome o = train_step(ctx, state, cfg);
    state = std::move(o.state);
    trace.steps.push_back(o.report);
    if (opts.on_step) opts.on_step(o);
    if (opts.checkpoint_every > 0 && !opts.checkpoint_path.empty() && state.step % opts.checkpoint_every == 0)
      save_checkpoint({trace.strategy, cfg, state}, opts.checkpoint_path);
  }
  return trace;
}

inline RunTrace run_strategy(const QuestionBank& bank, const StrategySpec& strategy, const TrainerConfig& base,
                             const std::optional<PredictorParams>& predictor, double label_noise = BankConfig{}.label_noise) {
  const TrainerConfig cfg = validate_config(strategy.apply(base));
  const TrainContext ctx = make_context(bank, strategy, predictor, label_noise);
  TrainRunState state = initial_state(bank, cfg);
  return run_training(ctx, state, cfg);
}

struct ExperimentReport {
  std::vector<std::string> strategies;
  std::vector<std::uint64_t> seeds;
  std::vector<RunTrace> traces;  // strategy-major, seeds in the given order

  const RunTrace& trace(const std::string& strategy, std::uint64_t seed) const {
    for (const auto& t : traces)
      if (t.strategy == strategy && t.seed == seed) return t;
    throw std::out_of_range("no trace for " + strategy + " seed " + std::to_string(seed));
  }
};

inline ExperimentReport run_experiment(const QuestionBank& bank, const std::vector<std::string>& strategies,
                                       const TrainerConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                       const std::optional<PredictorParams>& predictor = std::nullopt) {
  if (seeds.empty()) throw std::invalid_argument("run_experiment needs at least one seed");
  ExperimentReport rep;
  rep.seeds = seeds;
  for (const auto& label : strategies) {
    const StrategySpec spec = parse_strategy_spec(label);
    rep.strategies.push_back(spec.label());
    for (auto seed : seeds) {
      TrainerConfig c = cfg;
      c.seed = seed;
      rep.traces.push_back(run_strategy(bank, spec, c, predictor));
    }
  }
  return rep;
}

// ---- summaries over traces ----

inline double mean_effective_ratio(const RunTrace& t) {
  double s = 0.0;
  for (const auto& r : t.steps) s += r.effective_ratio;
  return s / static_cast<double>(t.steps.size());
}

/// Trapezoidal area under the mean-reward curve, starting at step 0.
inline double reward_auc(const RunTrace& t) {
  double prev = t.initial_mean_reward, area = 0.0;
  for (const auto& r : t.steps) {
    area += 0.5 * (prev + r.mean_reward);
    prev = r.mean_reward;
  }
  return area;
}

inline double mean_pearson(const RunTrace& t) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : t.steps)
    if (!std::isnan(r.pearson_rho)) {
      s += r.pearson_rho;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

inline long total_batch_rollouts(const RunTrace& t) {
  long n = 0;
  for (const auto& r : t.steps) n += r.batch_rollouts;
  return n;
}

}  // namespace dots
