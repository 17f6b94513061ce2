#pragma once

// Little-endian binary encoding for domain types and the key=value config
// format used by the CLI.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "dots/core.hpp"

namespace dots {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T> || std::is_enum_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.append(p, sizeof(T));
  }

  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    bytes_.append(s);
  }

  template <typename T>
  void put_vector(const std::vector<T>& v) {
    put<std::uint64_t>(v.size());
    for (const T& x : v) put(x);
  }

  /// Magic tag plus schema version, written first by every file format.
  void put_header(std::string_view magic, std::uint32_t version) {
    bytes_.append(magic);
    put(version);
  }

  const std::string& bytes() const { return bytes_; }

  void write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
  }

 private:
  std::string bytes_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::string bytes) : bytes_(std::move(bytes)) {}

  static BinaryReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return BinaryReader(ss.str());
  }

  template <typename T>
    requires std::is_arithmetic_v<T> || std::is_enum_v<T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename T>
  std::vector<T> get_vector() {
    const auto n = get<std::uint64_t>();
    need(n * sizeof(T));
    std::vector<T> v(n);
    for (auto& x : v) x = get<T>();
    return v;
  }

  std::uint32_t expect_header(std::string_view magic, std::uint32_t max_version) {
    need(magic.size());
    if (std::string_view(bytes_).substr(pos_, magic.size()) != magic)
      throw FormatError("bad magic: expected '" + std::string(magic) + "'");
    pos_ += magic.size();
    const auto version = get<std::uint32_t>();
    if (version == 0 || version > max_version)
      throw FormatError("unsupported " + std::string(magic) + " version " + std::to_string(version));
    return version;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("truncated input");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

// ---- domain types ----

inline void write(BinaryWriter& w, const Question& q) {
  w.put(q.id);
  w.put_vector(q.embedding);
  w.put_vector(q.answer_key);
  w.put(q.latent_difficulty);
}

inline Question read_question(BinaryReader& r) {
  Question q;
  q.id = r.get<QuestionId>();
  q.embedding = r.get_vector<double>();
  q.answer_key = r.get_vector<Token>();
  q.latent_difficulty = r.get<double>();
  return q;
}

inline void write(BinaryWriter& w, const RolloutGroup& g) {
  w.put(g.question_id);
  w.put<std::uint64_t>(g.responses.size());
  for (std::size_t i = 0; i < g.responses.size(); ++i) {
    w.put_vector(g.responses[i]);
    w.put_vector(g.behavior_logprobs[i]);
  }
  w.put_vector(g.rewards);
  w.put_vector(g.advantages);
  w.put(g.mean_reward);
  w.put(g.step_created);
  w.put(g.behavior_version);
}

inline RolloutGroup read_rollout_group(BinaryReader& r) {
  RolloutGroup g;
  g.question_id = r.get<QuestionId>();
  const auto n = r.get<std::uint64_t>();
  g.responses.resize(n);
  g.behavior_logprobs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.responses[i] = r.get_vector<Token>();
    g.behavior_logprobs[i] = r.get_vector<double>();
  }
  g.rewards = r.get_vector<double>();
  g.advantages = r.get_vector<double>();
  g.mean_reward = r.get<double>();
  g.step_created = r.get<int>();
  g.behavior_version = r.get<std::uint64_t>();
  return g;
}

inline void write(BinaryWriter& w, const DifficultyEstimate& e) {
  w.put(e.question_id);
  w.put(e.step);
  w.put(e.value);
  w.put(e.kind);
}

inline DifficultyEstimate read_difficulty_estimate(BinaryReader& r) {
  DifficultyEstimate e;
  e.question_id = r.get<QuestionId>();
  e.step = r.get<int>();
  e.value = r.get<double>();
  e.kind = r.get<EstimateKind>();
  return e;
}

inline void write(BinaryWriter& w, const TrainerConfig& c) {
  w.put(c.B);
  w.put(c.G);
  w.put(c.T);
  w.put(c.K);
  w.put(c.alpha);
  w.put(c.tau);
  w.put(c.delta);
  w.put(c.C);
  w.put(c.mu);
  w.put(c.eps_clip);
  w.put(c.beta);
  w.put(c.lr);
  w.put(c.seed);
  w.put(c.momentum);
  w.put(c.probe_size);
}

inline TrainerConfig read_trainer_config(BinaryReader& r) {
  TrainerConfig c;
  c.B = r.get<int>();
  c.G = r.get<int>();
  c.T = r.get<int>();
  c.K = r.get<int>();
  c.alpha = r.get<double>();
  c.tau = r.get<double>();
  c.delta = r.get<double>();
  c.C = r.get<int>();
  c.mu = r.get<int>();
  c.eps_clip = r.get<double>();
  c.beta = r.get<double>();
  c.lr = r.get<double>();
  c.seed = r.get<std::uint64_t>();
  c.momentum = r.get<double>();
  c.probe_size = r.get<int>();
  return c;
}

// ---- key=value config ----

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are an error.
inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, value).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return out;
}

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T value{};
  in >> value;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("bad value for '" + key + "': " + text);
  return value;
}

}  // namespace detail

/// Overlays recognised keys onto `base`; unknown keys are rejected.
inline TrainerConfig apply_key_values(TrainerConfig base, const std::map<std::string, std::string>& kv) {
  using detail::parse_number;
  for (const auto& [key, value] : kv) {
    if (key == "B") base.B = parse_number<int>(key, value);
    else if (key == "G") base.G = parse_number<int>(key, value);
    else if (key == "T") base.T = parse_number<int>(key, value);
    else if (key == "K") base.K = parse_number<int>(key, value);
    else if (key == "alpha") base.alpha = parse_number<double>(key, value);
    else if (key == "tau") base.tau = parse_number<double>(key, value);
    else if (key == "delta") base.delta = parse_number<double>(key, value);
    else if (key == "C") base.C = parse_number<int>(key, value);
    else if (key == "mu") base.mu = parse_number<int>(key, value);
    else if (key == "eps_clip") base.eps_clip = parse_number<double>(key, value);
    else if (key == "beta") base.beta = parse_number<double>(key, value);
    else if (key == "lr") base.lr = parse_number<double>(key, value);
    else if (key == "seed") base.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "momentum") base.momentum = parse_number<double>(key, value);
    else if (key == "probe_size") base.probe_size = parse_number<int>(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return base;
}

inline TrainerConfig load_config(const std::string& path, TrainerConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  return validate_config(apply_key_values(base, parse_key_values(in)));
}

inline std::string format_config(const TrainerConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "B = " << c.B << "\nG = " << c.G << "\nT = " << c.T << "\nK = " << c.K
      << "\nalpha = " << c.alpha << "\ntau = " << c.tau << "\ndelta = " << c.delta << "\nC = " << c.C
      << "\nmu = " << c.mu << "\neps_clip = " << c.eps_clip << "\nbeta = " << c.beta << "\nlr = " << c.lr
      << "\nseed = " << c.seed << "\nmomentum = " << c.momentum << "\nprobe_size = " << c.probe_size
      << "\n";
  return out.str();
}

}  // namespace dots
