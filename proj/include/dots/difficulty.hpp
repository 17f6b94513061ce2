#pragma once

// Adaptive difficulty: the ground-truth failure rate from rollouts and the
// attention-based predictor that estimates it for questions without
// rollouts.
//
// A query's prediction is a softmax(z_q . z_i / sqrt(h))-weighted average of
// reference difficulties, where z = adapter(raw embedding). The raw estimate
// is Platt-scaled, sigmoid(w logit(d) + b), with (w, b) produced from the
// reference mean and population standard deviation by a small head
// (softplus keeps w positive, tanh bounds b). Adapter and head are trained
// jointly on soft-label binary cross-entropy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dots/core.hpp"
#include "dots/nn.hpp"
#include "dots/rng.hpp"
#include "dots/serialize.hpp"

namespace dots {

/// Clamp applied to raw predictions before the logit.
inline constexpr double kLogitClamp = 1e-6;

inline double ground_truth_difficulty(std::span<const double> rewards) {
  if (rewards.empty()) throw std::invalid_argument("ground_truth_difficulty needs at least one reward");
  double failures = 0.0;
  for (double r : rewards) failures += 1.0 - r;
  return failures / static_cast<double>(rewards.size());
}

/// Reference questions with known difficulty at the current step. The
/// embeddings are whatever space attention runs in (adapter outputs in
/// production, raw embeddings for the untrained baseline).
struct ReferenceSet {
  std::vector<QuestionId> ids;
  nn::Matrix embeddings;  // K x h
  std::vector<double> difficulties;
  double mu = 0.0;
  double sigma = 0.0;

  ReferenceSet() = default;
  ReferenceSet(std::vector<QuestionId> ref_ids, nn::Matrix ref_embeddings, std::vector<double> ref_difficulties)
      : ids(std::move(ref_ids)), embeddings(std::move(ref_embeddings)), difficulties(std::move(ref_difficulties)) {
    if (difficulties.empty()) throw std::invalid_argument("reference set must hold at least one question");
    if (embeddings.rows != difficulties.size() || (!ids.empty() && ids.size() != difficulties.size()))
      throw std::invalid_argument("reference set fields have inconsistent sizes");
    for (double d : difficulties)
      if (!(d >= 0.0 && d <= 1.0)) throw std::invalid_argument("reference difficulty outside [0,1]");
    mu = mean(difficulties);
    double var = 0.0;
    for (double d : difficulties) var += (d - mu) * (d - mu);
    sigma = std::sqrt(var / static_cast<double>(difficulties.size()));
  }

  std::size_t size() const { return difficulties.size(); }
  std::size_t dim() const { return embeddings.cols; }
};

inline std::vector<double> attention_weights(std::span<const double> query, const ReferenceSet& refs) {
  if (query.size() != refs.dim()) throw std::invalid_argument("query embedding dimension does not match references");
  const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
  std::vector<double> a(refs.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto zi = refs.embeddings.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < query.size(); ++k) s += query[k] * zi[k];
    a[i] = s * scale;
    top = std::max(top, a[i]);
  }
  double total = 0.0;
  for (double& x : a) total += (x = std::exp(x - top));
  for (double& x : a) x /= total;
  return a;
}

inline double attention_predict(std::span<const double> query, const ReferenceSet& refs) {
  const auto a = attention_weights(query, refs);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * refs.difficulties[i];
  // Rounding can push a convex combination a hair outside the hull.
  const auto [lo, hi] = std::minmax_element(refs.difficulties.begin(), refs.difficulties.end());
  return std::clamp(d, *lo, *hi);
}

inline double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline double clamped_logit(double p) {
  const double c = std::clamp(p, kLogitClamp, 1.0 - kLogitClamp);
  return std::log(c / (1.0 - c));
}

struct PlattParams {
  double w = 1.0;
  double b = 0.0;
};

inline double calibrate(double d_hat, PlattParams platt) {
  return logistic(platt.w * clamped_logit(d_hat) + platt.b);
}

/// [mu, sigma] -> GELU hidden layer -> (softplus scale, tanh bias).
struct CalibrationHead {
  nn::Dense hidden;
  nn::Dense out;

  struct Trace {
    nn::Matrix input;
    nn::Matrix pre;
    nn::Matrix act;
    double raw_w = 0.0;
    double raw_b = 0.0;
  };

  static CalibrationHead make(std::size_t width, RngStream& rng) {
    CalibrationHead head{nn::Dense::glorot(2, width, rng), nn::Dense::glorot(width, 2, rng)};
    for (double& w : head.out.weight) w *= 0.1;
    head.out.bias = {std::log(std::exp(1.0) - 1.0), 0.0};  // w = 1, b = 0 at init
    return head;
  }

  PlattParams evaluate(double mu, double sigma, Trace* trace = nullptr) const {
    nn::Matrix in(1, 2);
    in(0, 0) = mu;
    in(0, 1) = sigma;
    nn::Matrix pre = hidden.forward(in);
    nn::Matrix act = nn::gelu(pre);
    const nn::Matrix o = out.forward(act);
    if (trace) *trace = Trace{in, pre, act, o(0, 0), o(0, 1)};
    return {softplus(o(0, 0)), std::tanh(o(0, 1))};
  }

  void backward(const Trace& trace, double d_w, double d_b, CalibrationHead& grad) const {
    nn::Matrix d_out(1, 2);
    d_out(0, 0) = d_w * logistic(trace.raw_w);
    const double b = std::tanh(trace.raw_b);
    d_out(0, 1) = d_b * (1.0 - b * b);
    const nn::Matrix d_act = out.backward(trace.act, d_out, grad.out);
    hidden.backward(trace.input, nn::gelu_backward(trace.pre, d_act), grad.hidden);
  }

  template <typename F>
  void visit(F&& f) {
    hidden.visit(f);
    out.visit(f);
  }

  bool operator==(const CalibrationHead&) const = default;
};

inline double calibrate(double d_hat, const ReferenceSet& refs, const CalibrationHead& head) {
  return calibrate(d_hat, head.evaluate(refs.mu, refs.sigma));
}

/// Three GELU hidden layers, a linear projection back to h, then LayerNorm.
struct Adapter {
  nn::Dense layers[4];
  nn::LayerNorm norm;

  struct Trace {
    nn::Matrix inputs[4];  // input to each dense layer
    nn::Matrix pre[3];     // hidden pre-activations
    nn::LayerNorm::Cache norm_cache;
  };

  static Adapter make(std::size_t dim, std::size_t width, RngStream& rng) {
    Adapter a;
    a.layers[0] = nn::Dense::glorot(dim, width, rng);
    a.layers[1] = nn::Dense::glorot(width, width, rng);
    a.layers[2] = nn::Dense::glorot(width, width, rng);
    a.layers[3] = nn::Dense::glorot(width, dim, rng);
    a.norm = nn::LayerNorm(dim);
    return a;
  }

  std::size_t dim() const { return layers[0].in; }
  std::size_t width() const { return layers[0].out; }

  nn::Matrix forward(const nn::Matrix& x, Trace* trace = nullptr) const {
    nn::Matrix h = x;
    for (int i = 0; i < 3; ++i) {
      nn::Matrix pre = layers[i].forward(h);
      if (trace) {
        trace->inputs[i] = std::move(h);
        trace->pre[i] = pre;
      }
      h = nn::gelu(pre);
    }
    nn::Matrix proj = layers[3].forward(h);
    if (trace) trace->inputs[3] = std::move(h);
    return norm.forward(proj, trace ? &trace->norm_cache : nullptr);
  }

  void backward(const Trace& trace, const nn::Matrix& dy, Adapter& grad) const {
    nn::Matrix d = norm.backward(trace.norm_cache, dy, grad.norm);
    d = layers[3].backward(trace.inputs[3], d, grad.layers[3]);
    for (int i = 2; i >= 0; --i) {
      d = nn::gelu_backward(trace.pre[i], d);
      d = layers[i].backward(trace.inputs[i], d, grad.layers[i]);
    }
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& l : layers) l.visit(f);
    norm.visit(f);
  }

  bool operator==(const Adapter&) const = default;
};

struct PredictorParams {
  Adapter adapter;
  CalibrationHead head;

  static PredictorParams make(std::size_t dim, std::size_t width, std::size_t head_width, std::uint64_t seed) {
    auto rng = seeded_rng_stream(seed, StreamPurpose::predictor_init, 0, 0);
    PredictorParams p;
    p.adapter = Adapter::make(dim, width, rng);
    p.head = CalibrationHead::make(head_width, rng);
    return p;
  }

  nn::Matrix embed(const nn::Matrix& raw) const { return adapter.forward(raw); }

  template <typename F>
  void visit(F&& f) {
    adapter.visit(f);
    head.visit(f);
  }

  /// Zero-filled parameters of the same shape, used as a gradient buffer.
  PredictorParams zeros_like() const {
    PredictorParams z = *this;
    z.visit([](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); });
    return z;
  }

  bool all_finite() {
    bool ok = true;
    visit([&](std::vector<double>& v) {
      for (double x : v) ok = ok && std::isfinite(x);
    });
    return ok;
  }

  bool operator==(const PredictorParams&) const = default;
};

/// One reference set at one policy snapshot together with labeled queries;
/// each query contributes one (query, reference set, true difficulty) record.
struct PredictorTask {
  nn::Matrix ref_raw;  // K x h raw embeddings
  std::vector<double> ref_difficulties;
  nn::Matrix query_raw;  // Q x h
  std::vector<double> query_labels;

  std::size_t records() const { return query_labels.size(); }
};

struct TaskEvaluation {
  std::vector<double> raw;         // attention output before calibration
  std::vector<double> calibrated;
  double bce = 0.0;                // summed over queries
};

namespace detail {

inline double soft_bce(double label, double y) {
  // -[d log sigmoid(y) + (1 - d) log(1 - sigmoid(y))]
  return label * softplus(-y) + (1.0 - label) * softplus(y);
}

inline nn::Matrix stack_rows(const nn::Matrix& a, const nn::Matrix& b) {
  nn::Matrix out(a.rows + b.rows, a.cols);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

/// Forward (and optionally backward, accumulating into `grad` with weight
/// `scale` per record) for one task.
inline TaskEvaluation run_task(const PredictorParams& params, const PredictorTask& task, PredictorParams* grad,
                               double scale, bool train_adapter) {
  const std::size_t K = task.ref_difficulties.size();
  const std::size_t Q = task.query_labels.size();
  const nn::Matrix raw = stack_rows(task.ref_raw, task.query_raw);
  Adapter::Trace trace;
  const nn::Matrix z = params.adapter.forward(raw, grad && train_adapter ? &trace : nullptr);

  nn::Matrix ref_z(K, z.cols);
  std::copy(z.data.begin(), z.data.begin() + static_cast<std::ptrdiff_t>(K * z.cols), ref_z.data.begin());
  const ReferenceSet refs({}, std::move(ref_z), task.ref_difficulties);
  CalibrationHead::Trace head_trace;
  const PlattParams platt = params.head.evaluate(refs.mu, refs.sigma, grad ? &head_trace : nullptr);

  TaskEvaluation ev;
  ev.raw.resize(Q);
  ev.calibrated.resize(Q);
  nn::Matrix dz(z.rows, z.cols);
  double d_w = 0.0;
  double d_b = 0.0;
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(z.cols));

  for (std::size_t q = 0; q < Q; ++q) {
    const auto zq = z.row(K + q);
    const auto a = attention_weights(zq, refs);
    double d_hat = 0.0;
    for (std::size_t i = 0; i < K; ++i) d_hat += a[i] * refs.difficulties[i];
    const double ell = clamped_logit(d_hat);
    const double y = platt.w * ell + platt.b;
    ev.raw[q] = d_hat;
    ev.calibrated[q] = logistic(y);
    ev.bce += soft_bce(task.query_labels[q], y);
    if (!grad) continue;

    const double g_y = (ev.calibrated[q] - task.query_labels[q]) * scale;
    d_w += g_y * ell;
    d_b += g_y;
    if (!train_adapter) continue;
    if (d_hat <= kLogitClamp || d_hat >= 1.0 - kLogitClamp) continue;
    const double g_dhat = g_y * platt.w / (d_hat * (1.0 - d_hat));
    auto dzq = dz.row(K + q);
    for (std::size_t i = 0; i < K; ++i) {
      const double g_s = g_dhat * a[i] * (refs.difficulties[i] - d_hat) * inv_sqrt_h;
      if (g_s == 0.0) continue;
      const auto zi = refs.embeddings.row(i);
      auto dzi = dz.row(i);
      for (std::size_t k = 0; k < z.cols; ++k) {
        dzq[k] += g_s * zi[k];
        dzi[k] += g_s * zq[k];
      }
    }
  }

  if (grad) {
    params.head.backward(head_trace, d_w, d_b, grad->head);
    if (train_adapter) params.adapter.backward(trace, dz, grad->adapter);
  }
  return ev;
}

}  // namespace detail

inline TaskEvaluation evaluate_task(const PredictorParams& params, const PredictorTask& task) {
  return detail::run_task(params, task, nullptr, 0.0, false);
}

/// Mean soft-label BCE over every record of `tasks`.
inline double predictor_bce(const PredictorParams& params, std::span<const PredictorTask> tasks) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& t : tasks) {
    total += evaluate_task(params, t).bce;
    n += t.records();
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

/// Gradient of predictor_bce over `tasks` (for tests and diagnostics).
inline PredictorParams predictor_gradient(const PredictorParams& params, std::span<const PredictorTask> tasks,
                                          bool train_adapter = true) {
  PredictorParams grad = params.zeros_like();
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.records();
  for (const auto& t : tasks) detail::run_task(params, t, &grad, 1.0 / static_cast<double>(n), train_adapter);
  return grad;
}

struct PredictorTrainingOptions {
  int epochs = 60;
  double lr = 0.05;
  std::uint64_t seed = 0;
  bool train_adapter = true;
  // Per-task gradient norm cap; 0 disables.
  double clip_norm = 5.0;
};

struct PredictorTrainingResult {
  PredictorParams params;
  std::vector<double> epoch_loss;  // mean training BCE after each epoch
};

/// Plain SGD with one step per task, tasks shuffled every epoch.
inline PredictorTrainingResult train_predictor(PredictorParams params, std::span<const PredictorTask> tasks,
                                               const PredictorTrainingOptions& opts) {
  std::size_t records = 0;
  for (const auto& t : tasks) {
    records += t.records();
    for (double d : t.query_labels)
      if (!(d >= 0.0 && d <= 1.0)) throw std::invalid_argument("training label outside [0,1]");
  }
  if (records == 0) throw std::invalid_argument("train_predictor needs a non-empty training set");

  PredictorTrainingResult result;
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    auto rng = seeded_rng_stream(opts.seed, StreamPurpose::predictor_shuffle, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t idx : order) {
      const PredictorTask& task = tasks[idx];
      if (task.records() == 0) continue;
      PredictorParams grad = params.zeros_like();
      detail::run_task(params, task, &grad, 1.0 / static_cast<double>(task.records()), opts.train_adapter);
      double sq = 0.0;
      grad.visit([&](std::vector<double>& g) {
        for (double x : g) sq += x * x;
      });
      double step = opts.lr;
      if (opts.clip_norm > 0.0 && std::sqrt(sq) > opts.clip_norm) step *= opts.clip_norm / std::sqrt(sq);
      std::vector<std::vector<double>*> gs;
      grad.visit([&](std::vector<double>& g) { gs.push_back(&g); });
      std::size_t k = 0;
      params.visit([&](std::vector<double>& p) {
        const auto& g = *gs[k++];
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= step * g[i];
      });
    }
    result.epoch_loss.push_back(predictor_bce(params, tasks));
  }
  result.params = std::move(params);
  return result;
}

/// Pearson product-moment correlation; empty when either side has zero
/// variance.
inline std::optional<double> pearson(std::span<const double> preds, std::span<const double> truths) {
  if (preds.size() != truths.size()) throw std::invalid_argument("pearson inputs differ in length");
  if (preds.size() < 2) throw std::invalid_argument("pearson needs at least two points");
  const double mp = mean(preds);
  const double mt = mean(truths);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double dx = preds[i] - mp;
    const double dy = truths[i] - mt;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---- persistence ----

inline constexpr std::string_view kPredictorMagic = "DOTSPRED";

inline void save_predictor(const PredictorParams& p, const std::string& path) {
  BinaryWriter w;
  w.put_header(kPredictorMagic, 1);
  // schema: embedding dim, adapter width, head width
  w.put<std::uint64_t>(p.adapter.dim());
  w.put<std::uint64_t>(p.adapter.width());
  w.put<std::uint64_t>(p.head.hidden.out);
  for (const auto& l : p.adapter.layers) nn::write(w, l);
  nn::write(w, p.adapter.norm);
  nn::write(w, p.head.hidden);
  nn::write(w, p.head.out);
  w.write_file(path);
}

inline PredictorParams load_predictor(const std::string& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_header(kPredictorMagic, 1);
  const auto dim = r.get<std::uint64_t>();
  const auto width = r.get<std::uint64_t>();
  const auto head_width = r.get<std::uint64_t>();
  PredictorParams p;
  for (auto& l : p.adapter.layers) l = nn::read_dense(r);
  p.adapter.norm = nn::read_layer_norm(r);
  p.head.hidden = nn::read_dense(r);
  p.head.out = nn::read_dense(r);
  const auto& L = p.adapter.layers;
  if (L[0].in != dim || L[0].out != width || L[1].in != width || L[1].out != width || L[2].in != width ||
      L[2].out != width || L[3].in != width || L[3].out != dim || p.adapter.norm.gain.size() != dim ||
      p.head.hidden.in != 2 || p.head.hidden.out != head_width || p.head.out.in != head_width ||
      p.head.out.out != 2)
    throw FormatError("predictor file does not match its schema header");
  if (!r.at_end()) throw FormatError("trailing bytes in predictor file");
  return p;
}

}  // namespace dots
