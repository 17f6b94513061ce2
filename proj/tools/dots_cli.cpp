#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dots/dots.hpp"

namespace {

using namespace dots;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  bool full_scale = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value file mirroring TrainerConfig fields");
    app->add_option("--set", overrides, "override one field, e.g. --set lr=20 (repeatable)");
    app->add_flag("--full-scale", full_scale, "start from B=512, K=256 instead of the desk defaults");
  }

  std::map<std::string, std::string> override_map() const {
    std::map<std::string, std::string> kv;
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      if (!kv.emplace(o.substr(0, eq), o.substr(eq + 1)).second) throw ConfigError("duplicate --set key in '" + o + "'");
    }
    return kv;
  }

  TrainerConfig resolve() const {
    TrainerConfig cfg = full_scale ? full_scale_config() : TrainerConfig{};
    if (!config_path.empty()) cfg = load_config(config_path, cfg);
    return validate_config(apply_key_values(cfg, override_map()));
  }

  // A resumed run keeps its checkpointed configuration; only the step
  // budget may be extended.
  TrainerConfig resolve_resumed(const TrainerConfig& saved) const {
    if (!config_path.empty() || full_scale) throw ConfigError("--config and --full-scale cannot be combined with --resume");
    const auto kv = override_map();
    for (const auto& [k, v] : kv)
      if (k != "T") throw ConfigError("only T can be overridden when resuming, got '" + k + "'");
    return validate_config(apply_key_values(saved, kv));
  }
};

struct PredictorArgs {
  std::string path;
  bool raw = false;
  std::uint64_t harvest_seed = HarvestOptions{}.seed;

  void attach(CLI::App* app) {
    app->add_option("--predictor", path, "trained predictor file (see eval-predictor --save)");
    app->add_flag("--raw-attention", raw, "attend over raw embeddings with identity calibration");
    app->add_option("--harvest-seed", harvest_seed, "seed of the harvest run when pretraining in-process");
  }

  std::optional<PredictorParams> resolve(const QuestionBank& bank, const TrainerConfig& cfg, bool needed) const {
    if (raw) return std::nullopt;
    if (!path.empty()) return load_predictor(path);
    if (!needed) return std::nullopt;
    std::cerr << "no --predictor given; pretraining one on harvested snapshots\n";
    PretrainOptions po;
    po.harvest.seed = harvest_seed;
    po.harvest.K = cfg.K;
    po.harvest.G = cfg.G;
    return pretrain_predictor(bank, cfg, po).params;
  }
};

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto dash = item.find('-');
    if (dash != std::string::npos && dash > 0) {
      const auto lo = std::stoull(item.substr(0, dash)), hi = std::stoull(item.substr(dash + 1));
      if (hi < lo) throw std::invalid_argument("bad seed range '" + item + "'");
      for (auto x = lo; x <= hi; ++x) out.push_back(x);
    } else if (!item.empty()) {
      out.push_back(std::stoull(item));
    }
  }
  if (out.empty()) throw std::invalid_argument("empty seed list");
  return out;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const double p = std::stod(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad grid value '" + item + "'");
    out.push_back(p);
  }
  return out;
}

void print_summary(const std::vector<RunTrace>& traces) {
  std::printf("%-14s %6s %9s %9s %9s %9s %12s\n", "strategy", "seed", "eff", "auc", "final", "rho", "batch_roll");
  for (const auto& t : traces)
    std::printf("%-14s %6llu %9.4f %9.3f %9.4f %9.4f %12ld\n", t.strategy.c_str(),
                static_cast<unsigned long long>(t.seed), mean_effective_ratio(t), reward_auc(t),
                t.steps.empty() ? t.initial_mean_reward : t.steps.back().mean_reward, mean_pearson(t),
                total_batch_rollouts(t));
}

int gen_bank(const BankConfig& bc, const std::string& out) {
  const QuestionBank bank = generate_bank(bc);
  save_bank(bank, out);
  std::printf("wrote %zu questions to %s (base policy %s)\n", bank.size(), out.c_str(), policy_path_for(out).c_str());
  std::printf("base success rate %.4f, min intra-cluster cosine %.4f\n", bank_success_rate(bank.base_policy, bank),
              min_intra_cluster_cosine(bank));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Difficulty-targeted online data selection with rollout replay on a synthetic testbed"};
  app.require_subcommand(1);

  // gen-bank
  BankConfig bc;
  std::string bank_out;
  auto* gen = app.add_subcommand("gen-bank", "generate a synthetic question bank and its base policy");
  gen->add_option("--N", bc.N, "number of questions");
  gen->add_option("--dim", bc.h, "embedding dimension h");
  gen->add_option("--L", bc.L, "answer length");
  gen->add_option("--V", bc.V, "vocabulary size");
  gen->add_option("--clusters", bc.n_clusters, "number of clusters");
  gen->add_option("--seed", bc.seed, "generator seed");
  gen->add_option("--margin-lo", bc.margin_lo, "answer-key margin of the hardest cluster");
  gen->add_option("--margin-hi", bc.margin_hi, "answer-key margin of the easiest cluster");
  gen->add_option("--spread", bc.spread, "within-cluster extent along the difficulty direction");
  gen->add_option("--noise", bc.noise, "isotropic embedding jitter");
  gen->add_option("--out", bank_out, "bank file")->required();

  // train
  std::string bank_path, strategy = "dots", metrics_out, run_log, checkpoint, resume;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int checkpoint_every = 0;
  ConfigArgs train_cfg;
  PredictorArgs train_pred;
  auto* train = app.add_subcommand("train", "run one training job");
  train->add_option("--bank", bank_path, "bank file")->required();
  train->add_option("--strategy", strategy, "dots, uniform or curriculum, optionally with +rr");
  train->add_option("--seed", seed, "run seed")->each([&](const std::string&) { seed_given = true; });
  train->add_option("--metrics", metrics_out, "metrics CSV output");
  train->add_option("--run-log", run_log, "per-step selection log output");
  train->add_option("--checkpoint", checkpoint, "checkpoint file written every --checkpoint-every steps");
  train->add_option("--checkpoint-every", checkpoint_every, "steps between checkpoints (0 disables)");
  train->add_option("--resume", resume, "continue from a checkpoint");
  double holdout = 0.0;
  std::uint64_t split_seed = 0;
  train->add_option("--holdout", holdout, "train on a random part of the bank and track reward on this held-out fraction");
  train->add_option("--split-seed", split_seed, "seed of the held-out split");
  train_cfg.attach(train);
  train_pred.attach(train);

  // compare
  std::string cmp_bank, cmp_strategies = "uniform,curriculum,dots,dots+rr", cmp_seeds = "1-5", cmp_out;
  ConfigArgs cmp_cfg;
  PredictorArgs cmp_pred;
  auto* compare = app.add_subcommand("compare", "run several strategies over paired seeds");
  compare->add_option("--bank", cmp_bank, "bank file")->required();
  compare->add_option("--strategies", cmp_strategies, "comma-separated strategy labels");
  compare->add_option("--seeds", cmp_seeds, "comma-separated seeds or ranges, e.g. 1-5");
  compare->add_option("--metrics", cmp_out, "metrics CSV output");
  cmp_cfg.attach(compare);
  cmp_pred.attach(compare);

  // probe-theorem
  int probe_G = 8, probe_dim = 16;
  long probe_trials = 100000;
  std::string probe_grid = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", probe_out;
  std::uint64_t probe_seed = 0;
  auto* probe = app.add_subcommand("probe-theorem", "Monte-Carlo check of the gradient second moment in p");
  probe->add_option("--G", probe_G, "group size");
  probe->add_option("--trials", probe_trials, "trials per grid point");
  probe->add_option("--grid", probe_grid, "comma-separated success probabilities in (0,1)");
  probe->add_option("--grad-dim", probe_dim, "dimension of the per-response gradient vectors");
  probe->add_option("--seed", probe_seed, "seed");
  probe->add_option("--out", probe_out, "CSV output (stdout when omitted)");

  // eval-predictor
  std::string ev_bank, ev_predictor, ev_save;
  PretrainOptions ev_opts;
  ConfigArgs ev_cfg;
  int ev_run_seed = -1;
  auto* evalp = app.add_subcommand("eval-predictor", "train or load a predictor and score it on held-out snapshots");
  evalp->add_option("--bank", ev_bank, "bank file")->required();
  evalp->add_option("--predictor", ev_predictor, "score this predictor instead of training one");
  evalp->add_option("--save", ev_save, "write the trained predictor here");
  evalp->add_option("--harvest-seed", ev_opts.harvest.seed, "seed of the harvest run");
  evalp->add_option("--snapshot-every", ev_opts.harvest.snapshot_every, "steps between harvest snapshots");
  evalp->add_option("--refsets", ev_opts.harvest.refsets_per_snapshot, "reference sets per snapshot");
  evalp->add_option("--queries", ev_opts.harvest.queries_per_refset, "labeled queries per reference set");
  evalp->add_option("--epochs", ev_opts.training.epochs, "training epochs");
  evalp->add_option("--lr", ev_opts.training.lr, "SGD learning rate");
  evalp->add_option("--width", ev_opts.width, "adapter hidden width");
  evalp->add_option("--holdout", ev_opts.holdout_fraction, "fraction of tasks held out");
  evalp->add_option("--run-seed", ev_run_seed, "also score the predictor over the selection steps of one dots run");
  ev_cfg.attach(evalp);

  // export
  std::string ex_in, ex_out;
  double ex_smoothing = 0.6;
  auto* exp = app.add_subcommand("export", "long-format report with raw and exponentially smoothed columns");
  exp->add_option("--metrics", ex_in, "metrics CSV written by train or compare")->required();
  exp->add_option("--smoothing", ex_smoothing, "smoothing factor in [0,1)");
  exp->add_option("--out", ex_out, "report CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_bank(bc, bank_out);

    if (*train) {
      const QuestionBank full = load_bank(bank_path);
      std::optional<BankSplit> split;
      if (holdout > 0.0) split = split_bank(full, holdout, split_seed);
      const QuestionBank& bank = split ? split->train : full;
      const StrategySpec spec = parse_strategy_spec(strategy);
      TrainerConfig cfg;
      TrainRunState state;
      if (!resume.empty()) {
        Checkpoint ck = load_checkpoint(resume);
        if (ck.strategy != spec.label())
          throw std::invalid_argument("checkpoint was written by strategy '" + ck.strategy + "'");
        cfg = train_cfg.resolve_resumed(ck.config);
        state = std::move(ck.state);
      } else {
        cfg = train_cfg.resolve();
        if (seed_given) cfg.seed = seed;
        cfg = validate_config(spec.apply(cfg));
        state = initial_state(bank, cfg);
      }
      const auto predictor = train_pred.resolve(bank, cfg, spec.selection == SelectionStrategy::dots);
      TrainContext ctx = make_context(bank, spec, predictor);
      if (split) ctx.heldout = &split->heldout;
      std::ofstream log;
      if (!run_log.empty()) {
        log.open(run_log, resume.empty() ? std::ios::trunc : std::ios::app);
        if (!log) throw std::runtime_error("cannot open run log '" + run_log + "'");
        if (resume.empty()) log << kRunLogHeader << '\n';
      }
      RunOptions opts;
      opts.checkpoint_every = checkpoint_every;
      opts.checkpoint_path = checkpoint;
      opts.on_step = [&](const StepOutcome& o) {
        if (log.is_open()) write_run_log_line(log, o, bank);
        const auto& r = o.report;
        std::fprintf(stderr, "step %3d  reward %.4f  eff %.3f  rho %7.4f  fresh %5ld  buffer %4ld", r.step,
                     r.mean_reward, r.effective_ratio, r.pearson_rho, r.fresh_rollouts, r.buffer_size);
        if (ctx.heldout) std::fprintf(stderr, "  heldout %.4f", r.heldout_mean_reward);
        std::fputc('\n', stderr);
      };
      const RunTrace trace = run_training(ctx, state, cfg, opts);
      if (!metrics_out.empty()) write_metrics_csv(metrics_out, {trace});
      print_summary({trace});
      return 0;
    }

    if (*compare) {
      const QuestionBank bank = load_bank(cmp_bank);
      const TrainerConfig cfg = cmp_cfg.resolve();
      std::vector<std::string> labels;
      std::stringstream ss(cmp_strategies);
      bool any_dots = false;
      for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) {
          labels.push_back(item);
          any_dots = any_dots || parse_strategy_spec(item).selection == SelectionStrategy::dots;
        }
      const auto predictor = cmp_pred.resolve(bank, cfg, any_dots);
      const auto rep = run_experiment(bank, labels, cfg, parse_seed_list(cmp_seeds), predictor);
      if (!cmp_out.empty()) write_metrics_csv(cmp_out, rep.traces);
      print_summary(rep.traces);
      return 0;
    }

    if (*probe) {
      const auto rep = probe_gradient_signal(probe_G, parse_grid(probe_grid), probe_trials, probe_dim, probe_seed);
      if (probe_out.empty()) {
        write_probe_csv(rep, std::cout);
      } else {
        std::ofstream out(probe_out, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + probe_out + "'");
        write_probe_csv(rep, out);
      }
      bool ok = true;
      for (const auto& pt : rep.points) ok = ok && pt.within(3.0);
      std::fprintf(stderr, "argmax p = %.3f, log-log slope %.4f, all points within 3 sigma: %s\n", rep.argmax_p(),
                   probe_log_log_slope(rep), ok ? "yes" : "no");
      return 0;
    }

    if (*evalp) {
      const QuestionBank bank = load_bank(ev_bank);
      const TrainerConfig cfg = ev_cfg.resolve();
      ev_opts.harvest.K = cfg.K;
      ev_opts.harvest.G = cfg.G;
      PredictorParams params;
      std::vector<PredictorTask> heldout;
      if (!ev_predictor.empty()) {
        params = load_predictor(ev_predictor);
        heldout = harvest_tasks(bank, cfg, ev_opts.harvest);
      } else {
        auto res = pretrain_predictor(bank, cfg, ev_opts);
        std::printf("training BCE %.5f -> %.5f over %zu epochs on %zu tasks\n", res.epoch_loss.front(),
                    res.epoch_loss.back(), res.epoch_loss.size(), res.train.size());
        params = std::move(res.params);
        heldout = std::move(res.heldout);
        if (!ev_save.empty()) save_predictor(params, ev_save);
      }
      const auto s = score_predictor(params, heldout);
      std::printf("held-out tasks %zu, records %zu\n", heldout.size(), s.records);
      std::printf("pearson (calibrated) %.4f, pearson (raw attention) %.4f, MAE %.4f, BCE %.4f\n",
                  s.rho_calibrated.value_or(NAN), s.rho_raw.value_or(NAN), s.mean_abs_error, s.bce);
      if (ev_run_seed >= 0) {
        TrainerConfig c = cfg;
        c.seed = static_cast<std::uint64_t>(ev_run_seed);
        const auto trace = run_strategy(bank, StrategySpec{SelectionStrategy::dots, false}, c, params);
        std::printf("mean pearson over selection steps of a dots run (seed %d): %.4f\n", ev_run_seed,
                    mean_pearson(trace));
      }
      return 0;
    }

    if (*exp) {
      std::ifstream in(ex_in);
      if (!in) throw std::runtime_error("cannot open metrics '" + ex_in + "'");
      export_report(read_metrics_csv(in), ex_out, ex_smoothing);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
