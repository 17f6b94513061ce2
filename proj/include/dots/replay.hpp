#pragma once

// Bounded FIFO of informative rollout groups for off-policy reuse.

#include <cstdint>
#include <deque>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "dots/core.hpp"
#include "dots/rng.hpp"
#include "dots/selection.hpp"
#include "dots/serialize.hpp"

namespace dots {

class ReplayBuffer {
 public:
  struct Entry {
    RolloutGroup group;
    std::uint64_t sequence = 0;  // insertion order, starting at 0

    bool operator==(const Entry&) const = default;
  };

  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t insertions() const { return insertions_; }
  std::uint64_t evictions() const { return evictions_; }
  const std::deque<Entry>& entries() const { return entries_; }

  /// Appends unconditionally, then evicts the oldest entries until
  /// size <= capacity. Returns the sequence numbers evicted.
  std::vector<std::uint64_t> push(RolloutGroup group) {
    entries_.push_back(Entry{std::move(group), insertions_++});
    std::vector<std::uint64_t> evicted;
    while (entries_.size() > capacity_) {
      evicted.push_back(entries_.front().sequence);
      entries_.pop_front();
      ++evictions_;
    }
    return evicted;
  }

  bool operator==(const ReplayBuffer&) const = default;

  friend void write(BinaryWriter& w, const ReplayBuffer& b);
  friend ReplayBuffer read_replay_buffer(BinaryReader& r);

 private:
  std::size_t capacity_ = 0;
  std::deque<Entry> entries_;
  std::uint64_t insertions_ = 0;
  std::uint64_t evictions_ = 0;
};

/// Stored only when the group mean reward lies strictly inside (0, 1).
inline bool is_informative(const RolloutGroup& group) { return group.mean_reward > 0.0 && group.mean_reward < 1.0; }

inline bool store_if_informative(ReplayBuffer& buf, const RolloutGroup& group,
                                 std::vector<std::uint64_t>* evicted = nullptr) {
  if (!is_informative(group)) return false;
  auto out = buf.push(group);
  if (evicted) evicted->insert(evicted->end(), out.begin(), out.end());
  // With capacity 0 the group is evicted immediately; it was never retained.
  return buf.capacity() > 0;
}

struct ReplaySample {
  std::vector<const RolloutGroup*> groups;
  std::size_t shortfall = 0;
};

/// Up to `count` distinct groups drawn uniformly; sampling never removes
/// anything from the buffer. Pointers stay valid until the next mutation.
inline ReplaySample sample_replay(const ReplayBuffer& buf, std::size_t count, RngStream& rng) {
  ReplaySample s;
  const std::size_t take = std::min(count, buf.size());
  s.shortfall = count - take;
  if (take == 0) return s;
  const std::vector<double> lw(buf.size(), 0.0);
  for (std::size_t i : sample_without_replacement(lw, take, rng)) s.groups.push_back(&buf.entries()[i].group);
  return s;
}

/// Histogram of (current_step - step_created) over buffered groups.
inline std::map<int, std::size_t> staleness_stats(const ReplayBuffer& buf, int current_step) {
  std::map<int, std::size_t> hist;
  for (const auto& e : buf.entries()) ++hist[current_step - e.group.step_created];
  return hist;
}

inline void write(BinaryWriter& w, const ReplayBuffer& b) {
  w.put<std::uint64_t>(b.capacity_);
  w.put(b.insertions_);
  w.put(b.evictions_);
  w.put<std::uint64_t>(b.entries_.size());
  for (const auto& e : b.entries_) {
    w.put(e.sequence);
    write(w, e.group);
  }
}

inline ReplayBuffer read_replay_buffer(BinaryReader& r) {
  ReplayBuffer b(r.get<std::uint64_t>());
  b.insertions_ = r.get<std::uint64_t>();
  b.evictions_ = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  if (n > b.capacity_) throw FormatError("replay snapshot holds more groups than its capacity");
  for (std::uint64_t i = 0; i < n; ++i) {
    ReplayBuffer::Entry e;
    e.sequence = r.get<std::uint64_t>();
    e.group = read_rollout_group(r);
    b.entries_.push_back(std::move(e));
  }
  return b;
}

inline constexpr std::string_view kReplayMagic = "DOTSRBUF";

inline void save_replay_snapshot(const ReplayBuffer& b, const std::string& path) {
  BinaryWriter w;
  w.put_header(kReplayMagic, 1);
  write(w, b);
  w.write_file(path);
}

inline ReplayBuffer load_replay_snapshot(const std::string& path) {
  auto r = BinaryReader::from_file(path);
  r.expect_header(kReplayMagic, 1);
  return read_replay_buffer(r);
}

}  // namespace dots
