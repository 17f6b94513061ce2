#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dots/grpo.hpp"
#include "dots/rng.hpp"

namespace dots {

// ---- gradient-signal probe ----

struct GradientProbePoint {
  double p = 0.0;
  double estimate = 0.0;  // Monte-Carlo mean of ||g||^2
  double std_error = 0.0;
  double theory = 0.0;    // V G p (1 - p) (1 - 1/G)
  double ratio = 0.0;     // estimate / theory

  bool within(double sigmas) const { return std::abs(estimate - theory) <= sigmas * std_error; }
};

struct GradientProbeReport {
  int G = 0;
  int grad_dim = 0;
  long trials = 0;
  std::vector<GradientProbePoint> points;

  double argmax_p() const {
    double best = -1.0, arg = 0.0;
    for (const auto& pt : points)
      if (pt.estimate > best) best = pt.estimate, arg = pt.p;
    return arg;
  }
};

inline double expected_gradient_second_moment(int G, double p, double second_moment) {
  return second_moment * G * p * (1.0 - p) * (1.0 - 1.0 / G);
}

/// For each p: draw G Bernoulli(p) rewards and G independent standard-normal
/// likelihood-gradient vectors of dimension grad_dim (so V = grad_dim), form
/// g = sum_i A_i grad_i with group-relative advantages, and average ||g||^2.
inline GradientProbeReport probe_gradient_signal(int G, const std::vector<double>& p_grid, long trials, int grad_dim,
                                                std::uint64_t seed) {
  if (G < 2) throw std::invalid_argument("probe needs G >= 2");
  if (trials < 1) throw std::invalid_argument("probe needs at least one trial");
  if (grad_dim < 1) throw std::invalid_argument("probe needs grad_dim >= 1");
  if (p_grid.empty()) throw std::invalid_argument("invalid grid: empty");
  for (double p : p_grid)
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("invalid grid: p must lie in (0,1)");

  GradientProbeReport rep{G, grad_dim, trials, {}};
  std::vector<double> rewards(G), g(grad_dim);
  for (std::size_t pi = 0; pi < p_grid.size(); ++pi) {
    const double p = p_grid[pi];
    auto rng = seeded_rng_stream(seed, StreamPurpose::gradient_probe, pi);
    double sum = 0.0, sum_sq = 0.0;
    for (long t = 0; t < trials; ++t) {
      double total = 0.0;
      for (int i = 0; i < G; ++i) total += (rewards[i] = rng.bernoulli(p) ? 1.0 : 0.0);
      double norm_sq = 0.0;
      if (total != 0.0 && total != G) {
        const double m = total / G;
        std::fill(g.begin(), g.end(), 0.0);
        for (int i = 0; i < G; ++i) {
          const double a = rewards[i] - m;
          for (int k = 0; k < grad_dim; ++k) g[k] += a * rng.normal();
        }
        for (double x : g) norm_sq += x * x;
      }
      sum += norm_sq;
      sum_sq += norm_sq * norm_sq;
    }
    const double n = static_cast<double>(trials);
    const double est = sum / n;
    const double var = trials > 1 ? std::max(0.0, (sum_sq - n * est * est) / (n - 1.0)) : 0.0;
    GradientProbePoint pt;
    pt.p = p;
    pt.estimate = est;
    pt.std_error = std::sqrt(var / n);
    pt.theory = expected_gradient_second_moment(G, p, grad_dim);
    pt.ratio = est / pt.theory;
    rep.points.push_back(pt);
  }
  return rep;
}

/// Least-squares slope of log(estimate) against log(p (1 - p)).
inline double probe_log_log_slope(const GradientProbeReport& rep) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(rep.points.size());
  for (const auto& pt : rep.points) {
    const double x = std::log(pt.p * (1.0 - pt.p));
    const double y = std::log(pt.estimate);
    sx += x, sy += y, sxx += x * x, sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline void write_probe_csv(const GradientProbeReport& rep, std::ostream& out) {
  out << "p,estimate,std_error,theory,ratio\n";
  char buf[256];
  for (const auto& pt : rep.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", pt.p, pt.estimate, pt.std_error, pt.theory,
                  pt.ratio);
    out << buf;
  }
}

// ---- effectiveness ----

/// Fraction of difficulties strictly inside (0, 1).
inline double effective_ratio(std::span<const double> difficulties) {
  if (difficulties.empty()) throw std::invalid_argument("effective_ratio of an empty list");
  std::size_t n = 0;
  for (double d : difficulties) n += (d > 0.0 && d < 1.0);
  return static_cast<double>(n) / static_cast<double>(difficulties.size());
}

// ---- per-step traces ----

struct StepReport {
  int step = 0;
  std::string strategy;
  std::uint64_t seed = 0;
  double mean_reward = 0.0;       // expected success over the whole bank after the update
  double effective_ratio = 0.0;   // over this step's fresh training groups
  double pearson_rho = std::numeric_limits<double>::quiet_NaN();
  long fresh_rollouts = 0;        // every fresh response generated this step, reference set included
  long batch_rollouts = 0;        // fresh responses that entered the training batch
  long reference_rollouts = 0;
  long buffer_size = 0;
  double clipped_fraction = 0.0;
  double mean_ratio = 0.0;
  // Diagnostics outside the CSV schema.
  int replayed_groups = 0;
  int backfilled_groups = 0;
  double batch_mean_reward = 0.0;
  double objective = 0.0;
  double heldout_mean_reward = std::numeric_limits<double>::quiet_NaN();  // when an evaluation bank is attached

  bool operator==(const StepReport& o) const {
    auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
    return step == o.step && strategy == o.strategy && seed == o.seed && same(mean_reward, o.mean_reward) &&
           same(effective_ratio, o.effective_ratio) && same(pearson_rho, o.pearson_rho) &&
           fresh_rollouts == o.fresh_rollouts && batch_rollouts == o.batch_rollouts &&
           reference_rollouts == o.reference_rollouts && buffer_size == o.buffer_size &&
           same(clipped_fraction, o.clipped_fraction) && same(mean_ratio, o.mean_ratio) &&
           replayed_groups == o.replayed_groups && backfilled_groups == o.backfilled_groups &&
           same(batch_mean_reward, o.batch_mean_reward) && same(objective, o.objective) &&
           same(heldout_mean_reward, o.heldout_mean_reward);
  }
};

struct RunTrace {
  std::string strategy;
  std::uint64_t seed = 0;
  double initial_mean_reward = 0.0;
  std::vector<StepReport> steps;

  bool operator==(const RunTrace&) const = default;
};

inline constexpr const char* kMetricsHeader =
    "step,strategy,seed,mean_reward,effective_ratio,pearson_rho,fresh_rollouts,buffer_size,clipped_fraction,"
    "mean_ratio";

inline std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_metrics_row(std::ostream& out, const StepReport& r) {
  out << r.step << ',' << r.strategy << ',' << r.seed << ',' << format_real(r.mean_reward) << ','
      << format_real(r.effective_ratio) << ',' << format_real(r.pearson_rho) << ',' << r.fresh_rollouts << ','
      << r.buffer_size << ',' << format_real(r.clipped_fraction) << ',' << format_real(r.mean_ratio) << '\n';
}

inline void write_metrics_csv(std::ostream& out, const std::vector<RunTrace>& traces) {
  out << kMetricsHeader << '\n';
  for (const auto& t : traces)
    for (const auto& r : t.steps) write_metrics_row(out, r);
}

inline void write_metrics_csv(const std::string& path, const std::vector<RunTrace>& traces) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_metrics_csv(out, traces);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline double parse_real(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

/// Reads the metrics CSV back into traces keyed by (strategy, seed), in
/// first-appearance order.
inline std::vector<RunTrace> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::runtime_error("unexpected metrics CSV header");
  std::vector<RunTrace> traces;
  std::map<std::pair<std::string, std::uint64_t>, std::size_t> index;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw std::runtime_error("metrics CSV line " + std::to_string(lineno) + ": expected 10 fields");
    try {
      StepReport r;
      r.step = std::stoi(f[0]);
      r.strategy = f[1];
      r.seed = std::stoull(f[2]);
      r.mean_reward = parse_real(f[3]);
      r.effective_ratio = parse_real(f[4]);
      r.pearson_rho = parse_real(f[5]);
      r.fresh_rollouts = std::stol(f[6]);
      r.buffer_size = std::stol(f[7]);
      r.clipped_fraction = parse_real(f[8]);
      r.mean_ratio = parse_real(f[9]);
      const auto key = std::make_pair(r.strategy, r.seed);
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(key, traces.size()).first;
        traces.push_back(RunTrace{r.strategy, r.seed, 0.0, {}});
      }
      traces[it->second].steps.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw std::runtime_error("metrics CSV line " + std::to_string(lineno) + ": malformed field");
    }
  }
  return traces;
}

// ---- smoothed export ----

/// s_0 = x_0, s_t = a s_{t-1} + (1 - a) x_t. NaN inputs carry the previous
/// smoothed value forward.
inline std::vector<double> exponential_smoothing(std::span<const double> xs, double factor) {
  if (!(factor >= 0.0 && factor < 1.0)) throw std::invalid_argument("smoothing factor must be in [0,1)");
  std::vector<double> out(xs.size());
  double s = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isnan(xs[i])) s = std::isnan(s) ? xs[i] : factor * s + (1.0 - factor) * xs[i];
    out[i] = s;
  }
  return out;
}

inline void export_report(const std::vector<RunTrace>& traces, std::ostream& out, double smoothing) {
  if (traces.empty()) throw std::invalid_argument("export_report needs at least one trace");
  using Getter = double (*)(const StepReport&);
  const std::vector<std::pair<const char*, Getter>> metrics = {
      {"mean_reward", [](const StepReport& r) { return r.mean_reward; }},
      {"effective_ratio", [](const StepReport& r) { return r.effective_ratio; }},
      {"pearson_rho", [](const StepReport& r) { return r.pearson_rho; }},
      {"fresh_rollouts", [](const StepReport& r) { return static_cast<double>(r.fresh_rollouts); }},
      {"buffer_size", [](const StepReport& r) { return static_cast<double>(r.buffer_size); }},
      {"clipped_fraction", [](const StepReport& r) { return r.clipped_fraction; }},
      {"mean_ratio", [](const StepReport& r) { return r.mean_ratio; }},
  };
  out << "strategy,seed,step";
  for (const auto& [name, get] : metrics) out << ',' << name << ',' << name << "_smoothed";
  out << '\n';
  for (const auto& t : traces) {
    std::vector<std::vector<double>> raw(metrics.size()), smooth(metrics.size());
    for (std::size_t m = 0; m < metrics.size(); ++m) {
      for (const auto& r : t.steps) raw[m].push_back(metrics[m].second(r));
      smooth[m] = exponential_smoothing(raw[m], smoothing);
    }
    for (std::size_t s = 0; s < t.steps.size(); ++s) {
      out << t.strategy << ',' << t.seed << ',' << t.steps[s].step;
      for (std::size_t m = 0; m < metrics.size(); ++m)
        out << ',' << format_real(raw[m][s]) << ',' << format_real(smooth[m][s]);
      out << '\n';
    }
  }
}

inline void export_report(const std::vector<RunTrace>& traces, const std::string& path, double smoothing) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  export_report(traces, out, smoothing);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace dots
