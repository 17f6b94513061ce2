#pragma once

// Synthetic question bank and the toy rollout generator.
//
// Questions come in clusters. Each cluster has a center on the unit sphere,
// a within-cluster "difficulty direction" orthogonal to it, one answer key
// shared by its members and a logit margin. The base policy places
// (margin * center + gain * direction) on the answer-key row of every
// position, so a member's initial success probability depends on how far
// its answer-key logits sit above the rest. Latent difficulty is
// 1 - P(success) under that base policy; it is never shown to the learner,
// and it changes meaning as soon as the policy trains.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dots/core.hpp"
#include "dots/grpo.hpp"
#include "dots/rng.hpp"

namespace dots {

struct BankConfig {
  int N = 1024;
  int h = 32;
  int L = 4;
  int V = 8;
  int n_clusters = 16;
  std::uint64_t seed = 1;
  double margin_lo = 1.0;     // answer-key logit margin of the hardest cluster
  double margin_hi = 8.0;     // ... and of the easiest
  double spread = 0.35;       // extent of members along the difficulty direction
  double direction_gain = 3.0;
  double noise = 0.15;        // isotropic jitter (total norm, before renormalization)
  double label_noise = 0.1;   // std of the static curriculum labels around latent difficulty
};

struct QuestionBank {
  int h = 0;
  int L = 0;
  int V = 0;
  std::uint64_t seed = 0;
  std::vector<Question> questions;
  std::vector<int> cluster;  // latent; -1 when loaded from a file
  int n_clusters = 0;
  PolicyParams base_policy;

  std::size_t size() const { return questions.size(); }
  bool operator==(const QuestionBank&) const = default;
};

namespace detail {

inline void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
}

inline std::vector<double> random_unit(int h, RngStream& rng) {
  std::vector<double> v(h);
  for (double& x : v) x = rng.normal();
  normalize(v);
  return v;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

inline void validate_bank(const QuestionBank& bank) {
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto& q = bank.questions[i];
    if (q.id != static_cast<QuestionId>(i)) throw std::invalid_argument("question ids must run 0..N-1 in order");
    if (static_cast<int>(q.embedding.size()) != bank.h) throw std::invalid_argument("embedding dimension differs from h");
    if (static_cast<int>(q.answer_key.size()) != bank.L) throw std::invalid_argument("answer key length differs from L");
    for (Token t : q.answer_key)
      if (t < 0 || t >= bank.V) throw std::invalid_argument("answer key token outside [0, V)");
    if (!(q.latent_difficulty >= 0.0 && q.latent_difficulty <= 1.0))
      throw std::invalid_argument("latent difficulty outside [0,1]");
  }
}

inline QuestionBank generate_bank(const BankConfig& cfg) {
  if (cfg.n_clusters < 1 || cfg.N < cfg.n_clusters) throw std::invalid_argument("need N >= n_clusters >= 1");
  if (cfg.h < 2 || cfg.L < 1 || cfg.V < 2) throw std::invalid_argument("need h >= 2, L >= 1, V >= 2");
  auto rng = seeded_rng_stream(cfg.seed, StreamPurpose::bank, 0);

  const int C = cfg.n_clusters;
  std::vector<std::vector<double>> centers(C), directions(C);
  std::vector<TokenSequence> keys(C);
  std::vector<double> margins(C);
  std::vector<int> rank(C);
  std::iota(rank.begin(), rank.end(), 0);
  std::shuffle(rank.begin(), rank.end(), rng.engine());
  for (int k = 0; k < C; ++k) {
    centers[k] = detail::random_unit(cfg.h, rng);
    auto u = detail::random_unit(cfg.h, rng);
    const double c = detail::dot(u, centers[k]);
    for (int i = 0; i < cfg.h; ++i) u[i] -= c * centers[k][i];
    detail::normalize(u);
    directions[k] = std::move(u);
    keys[k].resize(cfg.L);
    for (auto& t : keys[k]) t = static_cast<Token>(rng.below(cfg.V));
    margins[k] = cfg.margin_lo + (cfg.margin_hi - cfg.margin_lo) * (rank[k] + 0.5) / C;
  }

  QuestionBank bank;
  bank.h = cfg.h;
  bank.L = cfg.L;
  bank.V = cfg.V;
  bank.seed = cfg.seed;
  bank.n_clusters = C;
  bank.base_policy = PolicyParams(cfg.L, cfg.V, cfg.h);
  for (int k = 0; k < C; ++k)
    for (int l = 0; l < cfg.L; ++l) {
      auto row = bank.base_policy.row(l, keys[k][l]);
      for (int i = 0; i < cfg.h; ++i) row[i] += margins[k] * centers[k][i] + cfg.direction_gain * directions[k][i];
    }

  const double jitter = cfg.noise / std::sqrt(static_cast<double>(cfg.h));
  for (int n = 0; n < cfg.N; ++n) {
    const int k = n % C;
    const double s = rng.uniform(-1.0, 1.0);
    std::vector<double> z(cfg.h);
    for (int i = 0; i < cfg.h; ++i) z[i] = centers[k][i] + cfg.spread * s * directions[k][i] + jitter * rng.normal();
    detail::normalize(z);
    Question q;
    q.id = n;
    q.answer_key = keys[k];
    q.latent_difficulty = 1.0 - sequence_success_probability(bank.base_policy, z, q.answer_key);
    q.embedding = std::move(z);
    bank.questions.push_back(std::move(q));
    bank.cluster.push_back(k);
  }
  return bank;
}

struct BankSplit {
  QuestionBank train;
  QuestionBank heldout;
  // Original ids, indexed by the renumbered id in each part.
  std::vector<QuestionId> train_origin;
  std::vector<QuestionId> heldout_origin;
};

/// Random question-level split for generalization curves. Both parts share
/// the base policy; ids are renumbered 0..n-1 within each part.
inline BankSplit split_bank(const QuestionBank& bank, double heldout_fraction, std::uint64_t seed) {
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw std::invalid_argument("heldout fraction must be in (0,1)");
  const auto n_hold = static_cast<std::size_t>(std::lround(heldout_fraction * static_cast<double>(bank.size())));
  if (n_hold == 0 || n_hold == bank.size()) throw std::invalid_argument("split leaves one part empty");
  std::vector<std::size_t> order(bank.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded_rng_stream(seed, StreamPurpose::bank, 1);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  BankSplit out;
  auto shell = [&] {
    QuestionBank b;
    b.h = bank.h;
    b.L = bank.L;
    b.V = bank.V;
    b.seed = bank.seed;
    b.n_clusters = bank.n_clusters;
    b.base_policy = bank.base_policy;
    return b;
  };
  out.train = shell();
  out.heldout = shell();
  for (std::size_t r = 0; r < order.size(); ++r) {
    const bool hold = r < n_hold;
    QuestionBank& part = hold ? out.heldout : out.train;
    Question q = bank.questions[order[r]];
    (hold ? out.heldout_origin : out.train_origin).push_back(q.id);
    q.id = static_cast<QuestionId>(part.questions.size());
    part.questions.push_back(std::move(q));
    part.cluster.push_back(bank.cluster.empty() ? -1 : bank.cluster[order[r]]);
  }
  return out;
}

/// Static external difficulty labels: latent difficulty plus Gaussian noise.
inline std::vector<double> static_difficulty_labels(const QuestionBank& bank, double noise) {
  auto rng = seeded_rng_stream(bank.seed, StreamPurpose::curriculum_labels, 0);
  std::vector<double> labels(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) labels[i] = bank.questions[i].latent_difficulty + noise * rng.normal();
  return labels;
}

/// Smallest pairwise cosine similarity between members of the same cluster.
inline double min_intra_cluster_cosine(const QuestionBank& bank) {
  double worst = 1.0;
  for (std::size_t i = 0; i < bank.size(); ++i)
    for (std::size_t j = i + 1; j < bank.size(); ++j)
      if (bank.cluster[i] == bank.cluster[j])
        worst = std::min(worst, detail::dot(bank.questions[i].embedding, bank.questions[j].embedding));
  return worst;
}

/// Expected success rate of `policy` over the whole bank.
inline double bank_success_rate(const PolicyParams& policy, const QuestionBank& bank) {
  double s = 0.0;
  for (const auto& q : bank.questions) s += sequence_success_probability(policy, q.embedding, q.answer_key);
  return s / static_cast<double>(bank.size());
}

/// Samples G responses position by position, rewards exact matches of the
/// answer key, and records per-token log-probs and advantages.
inline RolloutGroup rollout(const PolicyParams& policy, const Question& q, int G, RngStream& rng, int step = 0) {
  if (static_cast<int>(q.embedding.size()) != policy.h || static_cast<int>(q.answer_key.size()) != policy.L)
    throw std::invalid_argument("question dimensions do not match the policy");
  if (G < 1) throw std::invalid_argument("rollout needs G >= 1");
  const auto lp = position_log_probs(policy, q.embedding);
  std::vector<double> probs(static_cast<std::size_t>(policy.V));
  RolloutGroup g;
  g.question_id = q.id;
  g.step_created = step;
  g.behavior_version = policy.version;
  for (int i = 0; i < G; ++i) {
    TokenSequence o(policy.L);
    std::vector<double> lps(policy.L);
    bool correct = true;
    for (int l = 0; l < policy.L; ++l) {
      for (int v = 0; v < policy.V; ++v) probs[v] = lp.prob(l, v);
      o[l] = static_cast<Token>(rng.categorical(probs));
      lps[l] = lp(l, o[l]);
      correct = correct && o[l] == q.answer_key[l];
    }
    g.responses.push_back(std::move(o));
    g.behavior_logprobs.push_back(std::move(lps));
    g.rewards.push_back(correct ? 1.0 : 0.0);
  }
  g.mean_reward = mean(g.rewards);
  g.advantages = G >= 2 ? compute_advantages(g.rewards) : std::vector<double>(1, 0.0);
  return g;
}

// ---- files ----

/// Header line: N h L V seed. Then one line per question:
/// id, h embedding reals, L answer tokens, latent difficulty.
inline void write_bank(std::ostream& out, const QuestionBank& bank) {
  out << bank.size() << ' ' << bank.h << ' ' << bank.L << ' ' << bank.V << ' ' << bank.seed << '\n';
  char buf[64];
  for (const auto& q : bank.questions) {
    out << q.id;
    for (double x : q.embedding) {
      std::snprintf(buf, sizeof buf, " %.17g", x);
      out << buf;
    }
    for (Token t : q.answer_key) out << ' ' << t;
    std::snprintf(buf, sizeof buf, " %.17g", q.latent_difficulty);
    out << buf << '\n';
  }
}

inline std::string policy_path_for(const std::string& bank_path) { return bank_path + ".policy"; }

inline void save_bank(const QuestionBank& bank, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_bank(out, bank);
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
  save_policy(bank.base_policy, policy_path_for(path));
}

inline QuestionBank read_bank(std::istream& in) {
  QuestionBank bank;
  std::size_t n = 0;
  std::string header;
  if (!std::getline(in, header)) throw FormatError("bank file is empty");
  {
    std::istringstream hs(header);
    if (!(hs >> n >> bank.h >> bank.L >> bank.V >> bank.seed)) throw FormatError("bad bank header");
  }
  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw FormatError("bank file ends after " + std::to_string(i) + " questions");
    std::istringstream ls(line);
    Question q;
    q.embedding.resize(bank.h);
    q.answer_key.resize(bank.L);
    ls >> q.id;
    for (double& x : q.embedding) ls >> x;
    for (Token& t : q.answer_key) ls >> t;
    ls >> q.latent_difficulty;
    if (!ls) throw FormatError("malformed bank record on line " + std::to_string(i + 2));
    bank.questions.push_back(std::move(q));
  }
  bank.cluster.assign(n, -1);
  validate_bank(bank);
  return bank;
}

inline QuestionBank load_bank(const std::string& path, const std::string& policy_path = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open bank '" + path + "'");
  QuestionBank bank = read_bank(in);
  bank.base_policy = load_policy(policy_path.empty() ? policy_path_for(path) : policy_path);
  if (bank.base_policy.h != bank.h || bank.base_policy.L != bank.L || bank.base_policy.V != bank.V)
    throw FormatError("base policy shape does not match bank");
  return bank;
}

}  // namespace dots
