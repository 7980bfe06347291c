#pragma once

// Discrete-event cluster simulation: cluster shape, virtual clock with a
// deterministic event queue, and utilization metrics over event logs.

#include <cstdio>
#include <functional>
#include <ostream>
#include <queue>

#include "core.hpp"

namespace pf::sim {

struct ClusterConfig {
  std::string name = "sim";
  int node_count = 1;
  int cores_per_node = 1;
  int gpus_per_node = 0;

  std::int64_t total_cores() const { return std::int64_t{node_count} * cores_per_node; }
  std::int64_t total_gpus() const { return std::int64_t{node_count} * gpus_per_node; }

  // Same cluster with reserved cores per node taken out of service.
  ClusterConfig schedulable(int reserved_cores_per_node) const {
    ClusterConfig c = *this;
    c.cores_per_node -= reserved_cores_per_node;
    return c;
  }

  bool operator==(const ClusterConfig&) const = default;
};

inline void validate(const ClusterConfig& c) {
  std::vector<FieldError> errors;
  if (c.node_count < 1) errors.push_back({"node_count", "must be >= 1"});
  if (c.cores_per_node < 1) errors.push_back({"cores_per_node", "must be >= 1"});
  if (c.gpus_per_node < 0) errors.push_back({"gpus_per_node", "negative"});
  if (!errors.empty()) throw ValidationError(std::move(errors));
}

// Zero-padded so that lexicographic order matches index order.
inline std::string node_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "n%05d", index);
  return buf;
}

// ---------------------------------------------------------------------------
// Clock and event queue
// ---------------------------------------------------------------------------

class EmptySchedule : public std::runtime_error {
 public:
  EmptySchedule() : std::runtime_error("advance on an empty schedule") {}
};

struct FiredEvent {
  Timestamp time;
  std::string subject_id;
  std::uint64_t sequence;
};

// Single-threaded by contract: one loop owns the clock and all state.
// Events at equal timestamps fire ordered by subject_id, then by the
// sequence number assigned at scheduling time.
class Simulation {
 public:
  using Action = std::function<void()>;

  explicit Simulation(std::uint64_t seed = 0) : seed_(seed) {}

  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  Timestamp now() const noexcept { return now_; }
  std::uint64_t seed() const noexcept { return seed_; }
  bool idle() const noexcept { return pending_.empty(); }
  std::size_t pending() const noexcept { return pending_.size(); }

  std::optional<Timestamp> next_time() const {
    if (pending_.empty()) return std::nullopt;
    return pending_.top().time;
  }

  void schedule(Timestamp at, std::string subject_id, Action action) {
    if (at < now_) throw std::logic_error("cannot schedule an event in the past");
    pending_.push(Entry{at, std::move(subject_id), next_sequence_++, std::move(action)});
  }

  void schedule_in(Timestamp delay, std::string subject_id, Action action) {
    schedule(now_ + delay, std::move(subject_id), std::move(action));
  }

  // Jumps the clock to the earliest pending timestamp and fires every event
  // queued for it. Events scheduled while firing at the same timestamp are
  // left for the next call.
  std::vector<FiredEvent> advance() {
    if (pending_.empty()) throw EmptySchedule();
    now_ = pending_.top().time;
    std::vector<Entry> batch;
    while (!pending_.empty() && pending_.top().time == now_) {
      batch.push_back(std::move(const_cast<Entry&>(pending_.top())));
      pending_.pop();
    }
    std::vector<FiredEvent> fired;
    fired.reserve(batch.size());
    for (auto& e : batch) {
      fired.push_back({e.time, e.subject_id, e.sequence});
      if (e.action) e.action();
    }
    return fired;
  }

  // Runs until the predicate holds or nothing is pending. Returns the
  // predicate's final value.
  bool run_until(const std::function<bool()>& done) {
    while (!done()) {
      if (pending_.empty()) return false;
      advance();
    }
    return true;
  }

  void run() {
    while (!pending_.empty()) advance();
  }

 private:
  struct Entry {
    Timestamp time;
    std::string subject_id;
    std::uint64_t sequence;
    Action action;
  };
  struct Later {
    bool operator()(const Entry& a, const Entry& b) const {
      if (a.time != b.time) return a.time > b.time;
      if (a.subject_id != b.subject_id) return a.subject_id > b.subject_id;
      return a.sequence > b.sequence;
    }
  };

  Timestamp now_ = 0;
  std::uint64_t seed_;
  std::uint64_t next_sequence_ = 0;
  std::priority_queue<Entry, std::vector<Entry>, Later> pending_;
};

// ---------------------------------------------------------------------------
// Utilization
// ---------------------------------------------------------------------------

class MalformedEvent : public std::runtime_error {
 public:
  MalformedEvent(const std::string& subject, const std::string& reason)
      : std::runtime_error("malformed event for '" + subject + "': " + reason) {}
};

struct UtilizationSample {
  Timestamp tick;
  std::int64_t busy_cores;
  std::int64_t busy_gpus;
  bool operator==(const UtilizationSample&) const = default;
};

struct UtilizationSeries {
  std::vector<UtilizationSample> samples;
  std::int64_t total_cores = 0;
  std::int64_t total_gpus = 0;
};

struct UtilizationReport {
  UtilizationSeries series;
  double core_fraction = 0.0;
  double gpu_fraction = 0.0;
};

namespace detail {

inline std::int64_t detail_int(const EventRecord& e, const char* key) {
  auto it = e.detail.find(key);
  if (it == e.detail.end()) throw MalformedEvent(e.subject_id, std::string("missing ") + key);
  try {
    std::size_t used = 0;
    auto v = std::stoll(it->second, &used);
    if (used != it->second.size() || v < 0) throw std::invalid_argument("bad");
    return v;
  } catch (const std::exception&) {
    throw MalformedEvent(e.subject_id, std::string("bad ") + key + " '" + it->second + "'");
  }
}

}  // namespace detail

// busy(t) is the sum of resources held by EXECUTING task placements at t.
// Placement events (new_state EXECUTING) must carry "cores" and "gpus" in
// their detail; the matching terminal event frees them. Aggregates are the
// time integral of busy over [t0, t1] divided by capacity x (t1 - t0).
inline UtilizationReport compute_utilization(std::span<const EventRecord> events,
                                             const ClusterConfig& config, Timestamp t0,
                                             Timestamp t1) {
  if (!(t0 < t1)) throw std::invalid_argument("utilization window requires t0 < t1");
  UtilizationReport report;
  auto& series = report.series;
  series.total_cores = config.total_cores();
  series.total_gpus = config.total_gpus();

  std::unordered_map<std::string, std::pair<std::int64_t, std::int64_t>> held;
  std::int64_t cores = 0, gpus = 0;
  double core_area = 0.0, gpu_area = 0.0;
  Timestamp cursor = t0;
  bool started = false;

  auto flush_until = [&](Timestamp t) {
    // Close the constant segment [cursor, t) clipped to the window.
    Timestamp end = std::min(t, t1);
    if (end > cursor) {
      core_area += static_cast<double>(cores) * static_cast<double>(end - cursor);
      gpu_area += static_cast<double>(gpus) * static_cast<double>(end - cursor);
      cursor = end;
    }
  };
  auto record = [&](Timestamp t) {
    if (t > t1) return;
    Timestamp tick = std::max(t, t0);
    if (!series.samples.empty() && series.samples.back().tick == tick) {
      series.samples.back().busy_cores = cores;
      series.samples.back().busy_gpus = gpus;
    } else {
      series.samples.push_back({tick, cores, gpus});
    }
  };

  for (const auto& e : events) {
    if (!std::holds_alternative<TaskState>(e.new_state)) continue;
    auto to = std::get<TaskState>(e.new_state);
    auto from = std::get<TaskState>(e.old_state);
    bool acquire = to == TaskState::EXECUTING;
    bool free = from == TaskState::EXECUTING && is_terminal(to);
    if (!acquire && !free) continue;
    if (!started && e.timestamp > t0) record(t0);
    started = true;
    if (e.timestamp > cursor) flush_until(e.timestamp);
    if (acquire) {
      auto c = detail::detail_int(e, "cores");
      auto g = detail::detail_int(e, "gpus");
      if (!held.emplace(e.subject_id, std::make_pair(c, g)).second)
        throw MalformedEvent(e.subject_id, "placed twice");
      cores += c;
      gpus += g;
    } else {
      auto it = held.find(e.subject_id);
      if (it == held.end()) throw MalformedEvent(e.subject_id, "release without placement");
      cores -= it->second.first;
      gpus -= it->second.second;
      held.erase(it);
    }
    if (cores > series.total_cores || gpus > series.total_gpus)
      throw MalformedEvent(e.subject_id, "busy resources exceed cluster totals");
    record(e.timestamp);
  }
  if (!started) record(t0);
  flush_until(t1);

  double span = static_cast<double>(t1 - t0);
  report.core_fraction =
      series.total_cores > 0 ? core_area / (static_cast<double>(series.total_cores) * span) : 0.0;
  report.gpu_fraction =
      series.total_gpus > 0 ? gpu_area / (static_cast<double>(series.total_gpus) * span) : 0.0;
  return report;
}

struct Window {
  Timestamp begin = 0;
  Timestamp end = 0;
  bool empty() const { return end <= begin; }
};

// From the first task start to the last task end.
inline Window makespan_window(std::span<const EventRecord> events) {
  std::optional<Timestamp> first, last;
  for (const auto& e : events) {
    if (!std::holds_alternative<TaskState>(e.new_state)) continue;
    auto to = std::get<TaskState>(e.new_state);
    if (to == TaskState::EXECUTING && !first) first = e.timestamp;
    if (std::get<TaskState>(e.old_state) == TaskState::EXECUTING && is_terminal(to))
      last = e.timestamp;
  }
  if (!first || !last) return {};
  return {*first, *last};
}

// The saturated phase: from the first task start to the last task start,
// i.e. while work was still waiting in queues. Falls back to the makespan
// when every task started at once.
inline Window steady_state_window(std::span<const EventRecord> events) {
  std::optional<Timestamp> first, last_start;
  for (const auto& e : events) {
    if (!std::holds_alternative<TaskState>(e.new_state)) continue;
    if (std::get<TaskState>(e.new_state) != TaskState::EXECUTING) continue;
    if (!first) first = e.timestamp;
    last_start = e.timestamp;
  }
  if (!first) return {};
  if (*last_start > *first) return {*first, *last_start};
  return makespan_window(events);
}

inline void write_csv(std::ostream& out, const UtilizationSeries& series) {
  out << "tick,busy_cores,busy_gpus,total_cores,total_gpus\n";
  for (const auto& s : series.samples)
    out << s.tick << ',' << s.busy_cores << ',' << s.busy_gpus << ',' << series.total_cores << ','
        << series.total_gpus << '\n';
}

// ---------------------------------------------------------------------------
// Per-node bounds
// ---------------------------------------------------------------------------

struct NodeShare {
  std::string node_id;
  int cores = 0;
  int gpus = 0;
  bool operator==(const NodeShare&) const = default;
};

// "n00000:4:1;n00001:4:1"
inline std::string encode_assignments(std::span<const NodeShare> shares) {
  std::string out;
  for (const auto& s : shares) {
    if (!out.empty()) out += ';';
    out += s.node_id + ':' + std::to_string(s.cores) + ':' + std::to_string(s.gpus);
  }
  return out;
}

inline std::vector<NodeShare> decode_assignments(std::string_view text) {
  std::vector<NodeShare> out;
  while (!text.empty()) {
    auto end = text.find(';');
    auto item = text.substr(0, end);
    auto c1 = item.find(':');
    auto c2 = item.find(':', c1 == std::string_view::npos ? c1 : c1 + 1);
    if (c1 == std::string_view::npos || c2 == std::string_view::npos)
      throw std::invalid_argument("bad assignment '" + std::string(item) + "'");
    out.push_back({std::string(item.substr(0, c1)), std::stoi(std::string(item.substr(c1 + 1, c2 - c1 - 1))),
                   std::stoi(std::string(item.substr(c2 + 1)))});
    if (end == std::string_view::npos) break;
    text.remove_prefix(end + 1);
  }
  return out;
}

struct BoundViolation {
  Timestamp tick;
  std::string node_id;
  std::int64_t cores;
  std::int64_t gpus;
};

// Replays placement events and reports every timestamp at which some node
// holds more than its per-node capacity. Releases at a tick are applied
// before acquisitions at the same tick are judged.
inline std::vector<BoundViolation> find_oversubscription(std::span<const EventRecord> events,
                                                         int cores_per_node, int gpus_per_node) {
  struct Usage {
    std::int64_t cores = 0, gpus = 0;
  };
  std::unordered_map<std::string, Usage> usage;
  std::unordered_map<std::string, std::vector<NodeShare>> held;
  std::vector<BoundViolation> out;
  std::set<std::string> touched;

  auto check = [&](Timestamp tick) {
    for (const auto& node : touched) {
      const auto& u = usage[node];
      if (u.cores > cores_per_node || u.gpus > gpus_per_node || u.cores < 0 || u.gpus < 0)
        out.push_back({tick, node, u.cores, u.gpus});
    }
    touched.clear();
  };

  std::optional<Timestamp> tick;
  for (const auto& e : events) {
    if (!std::holds_alternative<TaskState>(e.new_state)) continue;
    if (tick && e.timestamp != *tick) check(*tick);
    tick = e.timestamp;
    auto to = std::get<TaskState>(e.new_state);
    auto from = std::get<TaskState>(e.old_state);
    if (to == TaskState::EXECUTING) {
      auto shares = decode_assignments(e.get("assignments"));
      for (const auto& s : shares) {
        usage[s.node_id].cores += s.cores;
        usage[s.node_id].gpus += s.gpus;
        touched.insert(s.node_id);
      }
      held[e.subject_id] = std::move(shares);
    } else if (from == TaskState::EXECUTING && is_terminal(to)) {
      auto it = held.find(e.subject_id);
      if (it == held.end()) continue;
      for (const auto& s : it->second) {
        usage[s.node_id].cores -= s.cores;
        usage[s.node_id].gpus -= s.gpus;
        touched.insert(s.node_id);
      }
      held.erase(it);
    }
  }
  if (tick) check(*tick);
  return out;
}

}  // namespace pf::sim
