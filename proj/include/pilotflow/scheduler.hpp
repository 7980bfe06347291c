#pragma once

// Nested scheduler instance: owns a node subset, places heterogeneous tasks
// first-fit onto cores and GPUs, and frees resources on completion.

#include <deque>
#include <memory>

#include "core.hpp"
#include "sim.hpp"

namespace pf::sched {

using sim::NodeShare;

struct NodeCapacity {
  std::string node_id;
  int cores = 0;
  int gpus = 0;
};

struct NodeSlot {
  std::string node_id;
  int total_cores = 0;
  int total_gpus = 0;
  int free_cores = 0;
  int free_gpus = 0;
  bool operator==(const NodeSlot&) const = default;
};

struct Placement {
  std::string task_uid;
  std::vector<NodeShare> assignments;
  std::optional<Timestamp> start_tick;
  std::optional<Timestamp> end_tick;
  std::uint64_t lease = 0;  // identifies the hold inside its inventory

  int cores() const {
    int n = 0;
    for (const auto& a : assignments) n += a.cores;
    return n;
  }
  int gpus() const {
    int n = 0;
    for (const auto& a : assignments) n += a.gpus;
    return n;
  }
};

class DoubleRelease : public std::logic_error {
 public:
  explicit DoubleRelease(const std::string& uid)
      : std::logic_error("placement for '" + uid + "' already released") {}
};

// Per-node free/total counters for one node subset, kept in ascending
// node_id order. Totals never change after construction.
class NodeInventory {
 public:
  NodeInventory() = default;

  explicit NodeInventory(std::vector<NodeCapacity> nodes) {
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a.node_id < b.node_id; });
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      if (i > 0 && n.node_id == nodes[i - 1].node_id)
        throw std::invalid_argument("duplicate node id '" + n.node_id + "'");
      if (n.cores < 0 || n.gpus < 0) throw std::invalid_argument("negative node capacity");
      slots_.push_back({n.node_id, n.cores, n.gpus, n.cores, n.gpus});
    }
  }

  std::span<const NodeSlot> nodes() const { return slots_; }
  std::size_t size() const { return slots_.size(); }
  bool holds(std::uint64_t lease) const { return held_.count(lease) != 0; }
  std::size_t held_count() const { return held_.size(); }

  std::int64_t total_cores() const { return sum(&NodeSlot::total_cores); }
  std::int64_t total_gpus() const { return sum(&NodeSlot::total_gpus); }
  std::int64_t free_cores() const { return sum(&NodeSlot::free_cores); }
  std::int64_t free_gpus() const { return sum(&NodeSlot::free_gpus); }

  // Counters only; outstanding leases are ignored.
  bool same_counters(const NodeInventory& other) const { return slots_ == other.slots_; }

 private:
  friend class FirstFit;
  friend void release(Placement& placement, NodeInventory& inventory);

  std::int64_t sum(int NodeSlot::*field) const {
    std::int64_t n = 0;
    for (const auto& s : slots_) n += s.*field;
    return n;
  }

  NodeSlot* slot(const std::string& id) {
    auto it = std::lower_bound(slots_.begin(), slots_.end(), id,
                               [](const NodeSlot& s, const std::string& v) { return s.node_id < v; });
    return it != slots_.end() && it->node_id == id ? &*it : nullptr;
  }

  std::vector<NodeSlot> slots_;
  std::set<std::uint64_t> held_;
  std::uint64_t next_lease_ = 1;
};

struct Busy {};
struct Unsatisfiable {};
using PlaceResult = std::variant<Placement, Busy, Unsatisfiable>;

// Ranks a node can host given per-node counters.
inline int ranks_fitting(int cores, int gpus, int cores_per_rank, int gpus_per_rank) {
  int n = cores / cores_per_rank;
  if (gpus_per_rank > 0) n = std::min(n, gpus / gpus_per_rank);
  return n;
}

// True when the task fits on the inventory's totals, i.e. on an empty
// inventory. Ranks never span nodes.
inline bool fits_totals(const TaskDescription& task, const NodeInventory& inv) {
  std::int64_t ranks = 0;
  for (const auto& s : inv.nodes())
    ranks += ranks_fitting(s.total_cores, s.total_gpus, task.cores_per_rank, task.gpus_per_rank);
  return ranks >= task.ranks;
}

class PlacementPolicy {
 public:
  virtual ~PlacementPolicy() = default;
  virtual std::string_view name() const = 0;
  virtual PlaceResult place(const TaskDescription& task, NodeInventory& inventory) = 0;
};

// Scans nodes in ascending node_id and packs whole ranks onto each node
// while it has room, spilling to the next node only when the current one is
// full. Counters are only touched once the whole task fits.
class FirstFit final : public PlacementPolicy {
 public:
  std::string_view name() const override { return "first-fit"; }

  PlaceResult place(const TaskDescription& task, NodeInventory& inv) override {
    if (!fits_totals(task, inv)) return Unsatisfiable{};
    std::vector<std::pair<std::size_t, int>> picks;
    int remaining = task.ranks;
    for (std::size_t i = 0; i < inv.slots_.size() && remaining > 0; ++i) {
      const auto& s = inv.slots_[i];
      int n = std::min(remaining,
                       ranks_fitting(s.free_cores, s.free_gpus, task.cores_per_rank, task.gpus_per_rank));
      if (n > 0) {
        picks.emplace_back(i, n);
        remaining -= n;
      }
    }
    if (remaining > 0) return Busy{};
    Placement p;
    p.task_uid = task.uid;
    for (auto [i, n] : picks) {
      auto& s = inv.slots_[i];
      int cores = n * task.cores_per_rank;
      int gpus = n * task.gpus_per_rank;
      s.free_cores -= cores;
      s.free_gpus -= gpus;
      p.assignments.push_back({s.node_id, cores, gpus});
    }
    p.lease = inv.next_lease_++;
    inv.held_.insert(p.lease);
    return p;
  }
};

inline PlaceResult try_place(const TaskDescription& task, NodeInventory& inventory) {
  FirstFit policy;
  return policy.place(task, inventory);
}

inline void release(Placement& placement, NodeInventory& inventory) {
  if (inventory.held_.erase(placement.lease) == 0) throw DoubleRelease(placement.task_uid);
  for (const auto& a : placement.assignments) {
    auto* s = inventory.slot(a.node_id);
    if (!s) throw std::logic_error("placement names unknown node '" + a.node_id + "'");
    s->free_cores += a.cores;
    s->free_gpus += a.gpus;
  }
}

// ---------------------------------------------------------------------------
// Instance
// ---------------------------------------------------------------------------

// Instance event vocabulary, carried in detail["event"].
inline constexpr std::string_view kEventStart = "start";
inline constexpr std::string_view kEventFinish = "finish";
inline constexpr std::string_view kEventCancel = "cancel";
inline constexpr std::string_view kEventFail = "fail";

struct Launch {
  TaskDescription task;
  Placement placement;
};

// The state machine of one scheduler instance. Drivers feed it submissions,
// completions and cancellations together with the current time; it answers
// with launches and emits EventRecords on its event channel (the sink).
//
// Queue discipline is FIFO without backfill: a head task that does not fit
// right now blocks every younger task.
class SchedulerInstance {
 public:
  using Sink = std::function<void(const EventRecord&)>;

  SchedulerInstance(std::string name, NodeInventory inventory, Sink sink,
                    std::unique_ptr<PlacementPolicy> policy = std::make_unique<FirstFit>())
      : name_(std::move(name)),
        inventory_(std::move(inventory)),
        sink_(std::move(sink)),
        policy_(std::move(policy)) {}

  const std::string& name() const { return name_; }
  const NodeInventory& inventory() const { return inventory_; }
  std::size_t queue_depth() const { return queue_.size(); }
  std::size_t running() const { return running_.size(); }
  bool idle() const { return queue_.empty() && running_.empty(); }

  bool can_ever_fit(const TaskDescription& task) const { return fits_totals(task, inventory_); }

  // Returns false, without queuing, for a task larger than the whole subset.
  bool submit(TaskDescription task) {
    if (!can_ever_fit(task)) return false;
    queue_.push_back(std::move(task));
    return true;
  }

  // Places head-of-queue tasks until the queue is empty or the head is Busy.
  std::vector<Launch> schedule(Timestamp now) {
    std::vector<Launch> out;
    while (!queue_.empty()) {
      auto result = policy_->place(queue_.front(), inventory_);
      if (std::holds_alternative<Busy>(result)) break;
      TaskDescription task = std::move(queue_.front());
      queue_.pop_front();
      if (std::holds_alternative<Unsatisfiable>(result)) {
        emit(now, task.uid, TaskState::SCHEDULING, TaskState::FAILED,
             {{"event", std::string(kEventFail)}, {"reason", "unsatisfiable"}});
        continue;
      }
      auto placement = std::get<Placement>(std::move(result));
      placement.start_tick = now;
      emit(now, task.uid, TaskState::SCHEDULING, TaskState::EXECUTING,
           {{"event", std::string(kEventStart)},
            {"cores", std::to_string(placement.cores())},
            {"gpus", std::to_string(placement.gpus())},
            {"assignments", sim::encode_assignments(placement.assignments)}});
      running_.emplace(task.uid, placement);
      out.push_back({std::move(task), std::move(placement)});
    }
    return out;
  }

  // Payload ended. Unknown uids (already canceled) are ignored.
  bool finish(const std::string& uid, int exit_code, Timestamp now,
              std::map<std::string, std::string> extra = {}) {
    auto it = running_.find(uid);
    if (it == running_.end()) return false;
    free(it, now);
    extra["event"] = std::string(kEventFinish);
    extra["exit_code"] = std::to_string(exit_code);
    emit(now, uid, TaskState::EXECUTING, exit_code == 0 ? TaskState::DONE : TaskState::FAILED,
         std::move(extra));
    return true;
  }

  // The launch itself failed; the task never ran its payload.
  bool fail(const std::string& uid, const std::string& reason, Timestamp now) {
    auto it = running_.find(uid);
    if (it == running_.end()) return false;
    free(it, now);
    emit(now, uid, TaskState::EXECUTING, TaskState::FAILED,
         {{"event", std::string(kEventFail)}, {"reason", reason}});
    return true;
  }

  enum class Canceled : std::uint8_t { NOT_FOUND, WAS_QUEUED, WAS_RUNNING };

  Canceled cancel(const std::string& uid, Timestamp now, const std::string& reason = "canceled") {
    if (auto it = running_.find(uid); it != running_.end()) {
      free(it, now);
      emit(now, uid, TaskState::EXECUTING, TaskState::CANCELED,
           {{"event", std::string(kEventCancel)}, {"reason", reason}});
      return Canceled::WAS_RUNNING;
    }
    auto q = std::find_if(queue_.begin(), queue_.end(), [&](const auto& t) { return t.uid == uid; });
    if (q == queue_.end()) return Canceled::NOT_FOUND;
    queue_.erase(q);
    emit(now, uid, TaskState::SCHEDULING, TaskState::CANCELED,
         {{"event", std::string(kEventCancel)}, {"reason", reason}});
    return Canceled::WAS_QUEUED;
  }

  // Cancels everything; returns the uids that were running.
  std::vector<std::string> cancel_all(Timestamp now, const std::string& reason) {
    std::vector<std::string> was_running;
    for (const auto& [uid, p] : running_) was_running.push_back(uid);
    for (const auto& uid : was_running) cancel(uid, now, reason);
    while (!queue_.empty()) cancel(queue_.front().uid, now, reason);
    return was_running;
  }

 private:
  void free(std::map<std::string, Placement>::iterator it, Timestamp now) {
    it->second.end_tick = now;
    release(it->second, inventory_);
    running_.erase(it);
  }

  void emit(Timestamp now, const std::string& uid, TaskState from, TaskState to,
            std::map<std::string, std::string> detail) {
    detail["instance"] = name_;
    if (sink_) sink_(EventRecord{now, uid, from, to, std::move(detail)});
  }

  std::string name_;
  NodeInventory inventory_;
  Sink sink_;
  std::unique_ptr<PlacementPolicy> policy_;
  std::deque<TaskDescription> queue_;
  std::map<std::string, Placement> running_;
};

}  // namespace pf::sched
