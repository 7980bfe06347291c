#pragma once

// Pilot runtime. A pilot acquires an allocation through an lrm executor,
// splits the granted nodes into k disjoint subsets, runs one scheduler
// instance per subset, balances submitted tasks across the instances and
// converts instance events into pilot-level task states.
//
// On a simulated executor everything runs inside the simulation's event
// loop. On a real executor each instance has its own owner thread and
// message channel, and one agent thread converts instance events and
// follows the pilot job's lifecycle.

#include <atomic>
#include <condition_variable>

#include "lrm.hpp"
#include "scheduler.hpp"

namespace pf::pilot {

using lrm::AllocatedNode;

// ---------------------------------------------------------------------------
// Descriptions
// ---------------------------------------------------------------------------

struct PilotDescription {
  ResourceSpec resources;  // node-level: node_count is what matters
  std::int64_t walltime_s = 3600;
  int instance_count = 1;
  std::string platform = "local";
  std::optional<std::string> queue;
  std::optional<std::string> project;
};

inline void validate(const PilotDescription& d) {
  std::vector<FieldError> errors;
  check_resources(d.resources, errors);
  if (d.walltime_s < 1) errors.push_back({"walltime_s", "must be >= 1"});
  if (d.instance_count < 1) errors.push_back({"instance_count", "must be >= 1"});
  if (d.resources.node_count > 0 && d.instance_count > d.resources.node_count)
    errors.push_back({"instance_count", "exceeds node_count"});
  if (!errors.empty()) throw ValidationError(std::move(errors));
}

struct Allocation {
  std::vector<AllocatedNode> nodes;  // order fixed at acquisition
  std::string job_id;
};

class InvalidPartition : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Contiguous blocks in allocation order; the first (n mod k) blocks get one
// extra node.
inline std::vector<std::vector<AllocatedNode>> partition_nodes(const Allocation& allocation, int k) {
  const auto n = static_cast<int>(allocation.nodes.size());
  if (k < 1 || k > n)
    throw InvalidPartition("cannot split " + std::to_string(n) + " nodes into " +
                           std::to_string(k) + " subsets");
  std::vector<std::vector<AllocatedNode>> out(static_cast<std::size_t>(k));
  const int base = n / k;
  const int extra = n % k;
  auto it = allocation.nodes.begin();
  for (int i = 0; i < k; ++i) {
    int size = base + (i < extra ? 1 : 0);
    out[static_cast<std::size_t>(i)].assign(it, it + size);
    it += size;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Load balancing
// ---------------------------------------------------------------------------

struct InstanceLoad {
  std::size_t outstanding = 0;  // assigned and not yet terminal
  bool fits = false;            // the task fits the instance's subset
};

class BalancePolicy {
 public:
  virtual ~BalancePolicy() = default;
  virtual std::string_view name() const = 0;
  virtual std::optional<std::size_t> pick(const TaskDescription& task,
                                          std::span<const InstanceLoad> loads) = 0;
};

class RoundRobin final : public BalancePolicy {
 public:
  std::string_view name() const override { return "round-robin"; }

  std::optional<std::size_t> pick(const TaskDescription&, std::span<const InstanceLoad> loads) override {
    for (std::size_t step = 0; step < loads.size(); ++step) {
      std::size_t i = (cursor_ + step) % loads.size();
      if (loads[i].fits) {
        cursor_ = i + 1;
        return i;
      }
    }
    return std::nullopt;
  }

 private:
  std::size_t cursor_ = 0;
};

class LeastQueueDepth final : public BalancePolicy {
 public:
  std::string_view name() const override { return "least-queue"; }

  std::optional<std::size_t> pick(const TaskDescription&, std::span<const InstanceLoad> loads) override {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < loads.size(); ++i) {
      if (!loads[i].fits) continue;
      if (!best || loads[i].outstanding < loads[*best].outstanding) best = i;
    }
    return best;
  }
};

inline std::unique_ptr<BalancePolicy> make_balance_policy(std::string_view name) {
  if (name == "round-robin") return std::make_unique<RoundRobin>();
  if (name == "least-queue") return std::make_unique<LeastQueueDepth>();
  throw std::invalid_argument("unknown balancing policy '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Event conversion
// ---------------------------------------------------------------------------

class UnknownEvent : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskUpdate {
  std::string uid;
  TaskState state = TaskState::NEW;
  Timestamp timestamp = 0;
  std::map<std::string, std::string> detail;
};

// start -> EXECUTING, finish -> DONE or FAILED by exit code, cancel ->
// CANCELED, fail -> FAILED. Anything else is an UnknownEvent.
inline TaskUpdate convert_event(const EventRecord& e) {
  auto kind = e.detail.find("event");
  if (kind == e.detail.end())
    throw UnknownEvent("instance event for '" + e.subject_id + "' has no kind");
  TaskUpdate u{e.subject_id, TaskState::NEW, e.timestamp, e.detail};
  const auto& k = kind->second;
  if (k == sched::kEventStart) {
    u.state = TaskState::EXECUTING;
  } else if (k == sched::kEventFinish) {
    auto code = e.detail.find("exit_code");
    if (code == e.detail.end())
      throw UnknownEvent("finish event for '" + e.subject_id + "' without exit_code");
    u.state = code->second == "0" ? TaskState::DONE : TaskState::FAILED;
  } else if (k == sched::kEventCancel) {
    u.state = TaskState::CANCELED;
  } else if (k == sched::kEventFail) {
    u.state = TaskState::FAILED;
  } else {
    throw UnknownEvent("unknown instance event '" + k + "' for '" + e.subject_id + "'");
  }
  return u;
}

inline std::vector<TaskUpdate> convert_events(std::span<const EventRecord> events) {
  std::vector<TaskUpdate> out;
  out.reserve(events.size());
  for (const auto& e : events) out.push_back(convert_event(e));
  return out;
}

// ---------------------------------------------------------------------------
// Handles
// ---------------------------------------------------------------------------

struct TaskSnapshot {
  std::string uid;
  TaskState state = TaskState::NEW;
  std::size_t instance = 0;
  std::optional<int> exit_code;
  std::string reason;
  std::optional<std::string> value;
  std::string error;
};

class TaskHandle {
 public:
  struct Shared {
    mutable std::mutex mutex;
    TaskSnapshot snapshot;
  };

  TaskHandle() = default;
  explicit TaskHandle(std::shared_ptr<Shared> shared) : shared_(std::move(shared)) {}

  TaskSnapshot snapshot() const {
    std::lock_guard lock(shared_->mutex);
    return shared_->snapshot;
  }
  TaskState state() const { return snapshot().state; }
  const std::string& uid() const { return shared_->snapshot.uid; }  // immutable
  bool terminal() const { return is_terminal(state()); }

 private:
  std::shared_ptr<Shared> shared_;
};

enum class PilotState : std::uint8_t { PENDING, READY, DONE, FAILED, CANCELED };

inline constexpr std::string_view to_string(PilotState s) {
  switch (s) {
    case PilotState::PENDING:  return "PENDING";
    case PilotState::READY:    return "READY";
    case PilotState::DONE:     return "DONE";
    case PilotState::FAILED:   return "FAILED";
    case PilotState::CANCELED: return "CANCELED";
  }
  return "UNKNOWN";
}

class PilotNotReady : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BootstrapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsatisfiableTask : public std::runtime_error {
 public:
  explicit UnsatisfiableTask(const std::string& uid)
      : std::runtime_error("task '" + uid + "' exceeds every instance's node subset") {}
};

struct AgentOptions {
  std::shared_ptr<BalancePolicy> balance;  // default: round-robin
  std::shared_ptr<const FunctionRegistry> functions;
  bool keep_instance_logs = false;
};

// ---------------------------------------------------------------------------
// Pilot
// ---------------------------------------------------------------------------

class Pilot : public std::enable_shared_from_this<Pilot> {
  struct Key {};

 public:
  using Watcher = std::function<void(const TaskSnapshot&)>;

  // Submits the pilot job. Returns once the job is queued; bootstrapping
  // happens when the job turns ACTIVE.
  static std::shared_ptr<Pilot> submit(const PilotDescription& desc,
                                       std::shared_ptr<lrm::Executor> executor,
                                       AgentOptions options = {}) {
    validate(desc);
    auto pilot = std::make_shared<Pilot>(Key{}, desc, std::move(executor), std::move(options));
    pilot->start();
    return pilot;
  }

  Pilot(Key, PilotDescription desc, std::shared_ptr<lrm::Executor> executor, AgentOptions options)
      : desc_(std::move(desc)), executor_(std::move(executor)), options_(std::move(options)) {
    if (!options_.balance) options_.balance = std::make_shared<RoundRobin>();
    sim_ = executor_->simulation();
  }

  ~Pilot() { stop_threads(); }

  Pilot(const Pilot&) = delete;
  Pilot& operator=(const Pilot&) = delete;

  const PilotDescription& description() const { return desc_; }
  bool simulated() const { return sim_ != nullptr; }

  std::string job_id() const {
    std::lock_guard lock(mutex_);
    return job_id_;
  }

  PilotState state() const {
    std::lock_guard lock(mutex_);
    return state_;
  }

  std::string detail() const {
    std::lock_guard lock(mutex_);
    return detail_;
  }

  bool ready() const { return state() == PilotState::READY; }

  Timestamp now() const { return sim_ ? sim_->now() : now_ms(); }

  // Waits for bootstrap. Timeout in executor time units. Throws
  // BootstrapError when the allocation cannot host the instances.
  bool wait_ready(std::int64_t timeout) {
    auto done = [&] { return state_ != PilotState::PENDING; };
    wait_for(done, timeout);
    std::lock_guard lock(mutex_);
    if (!bootstrap_error_.empty()) throw BootstrapError(bootstrap_error_);
    return state_ == PilotState::READY;
  }

  std::vector<std::vector<AllocatedNode>> subsets() const {
    std::lock_guard lock(mutex_);
    return subsets_;
  }

  std::size_t instance_count() const {
    std::lock_guard lock(mutex_);
    return subsets_.size();
  }

  std::vector<TaskHandle> submit_tasks(std::vector<TaskDescription> tasks) {
    std::vector<std::size_t> targets;
    std::vector<TaskHandle> handles;
    {
      std::lock_guard lock(mutex_);
      if (state_ != PilotState::READY)
        throw PilotNotReady("pilot is " + std::string(to_string(state_)));
      std::set<std::string> batch;
      for (const auto& t : tasks) {
        validate_task(t);
        if (uids_.contains(t.uid) || !batch.insert(t.uid).second)
          throw ValidationError("uid", "duplicate '" + t.uid + "'");
        bool any = std::any_of(totals_.begin(), totals_.end(),
                               [&](const auto& inv) { return sched::fits_totals(t, inv); });
        if (!any) throw UnsatisfiableTask(t.uid);
      }
      std::vector<InstanceLoad> loads(totals_.size());
      for (const auto& t : tasks) {
        for (std::size_t i = 0; i < loads.size(); ++i)
          loads[i] = {outstanding_[i], sched::fits_totals(t, totals_[i])};
        auto pick = options_.balance->pick(t, loads);
        if (!pick) throw UnsatisfiableTask(t.uid);
        targets.push_back(*pick);
        ++outstanding_[*pick];
      }
      const Timestamp ts = now();
      for (std::size_t n = 0; n < tasks.size(); ++n) {
        const auto& t = tasks[n];
        uids_.claim(t.uid);
        auto shared = std::make_shared<TaskHandle::Shared>();
        shared->snapshot.uid = t.uid;
        shared->snapshot.state = TaskState::SCHEDULING;
        shared->snapshot.instance = targets[n];
        handles_.emplace(t.uid, shared);
        handles.emplace_back(shared);
        log_.push_back(EventRecord{ts, t.uid, TaskState::NEW, TaskState::SCHEDULING,
                                   {{"instance", instance_name(targets[n])}}});
      }
    }
    for (std::size_t n = 0; n < tasks.size(); ++n) {
      auto i = targets[n];
      if (sim_) {
        instances_[i]->submit(std::move(tasks[n]));
        request_dispatch(i);
      } else {
        workers_[i]->inbox.push(WorkerSubmit{std::move(tasks[n])});
      }
    }
    changed_.notify_all();
    return handles;
  }

  // Called from the conversion context on every task state change.
  void add_watcher(Watcher w) {
    std::lock_guard lock(mutex_);
    watchers_.push_back(std::move(w));
  }

  TaskHandle handle(const std::string& uid) const {
    std::lock_guard lock(mutex_);
    auto it = handles_.find(uid);
    if (it == handles_.end()) throw std::out_of_range("unknown task '" + uid + "'");
    return TaskHandle(it->second);
  }

  bool all_terminal() const {
    std::lock_guard lock(mutex_);
    return terminal_count_ == handles_.size();
  }

  // Waits until every submitted task is terminal.
  bool wait_all(std::int64_t timeout) {
    return wait_for([&] { return terminal_count_ == handles_.size(); }, timeout);
  }

  // Simulation only: fires the next batch of events. Returns false when
  // nothing is pending or the pilot is not simulated.
  bool step() {
    if (!sim_ || sim_->idle()) return false;
    sim_->advance();
    return true;
  }

  // Graceful drain for up to drain_timeout, then cancel what is left and
  // end the pilot job.
  void shutdown(std::int64_t drain_timeout) {
    wait_all(drain_timeout);
    cancel_everything("shutdown");
    if (!sim_) wait_all(std::numeric_limits<std::int32_t>::max());
    std::string id = job_id();
    if (!id.empty()) {
      auto h = executor_->status(id);
      if (h.state == JobState::QUEUED) executor_->cancel(id);
      else if (h.state == JobState::ACTIVE) executor_->finish(id, 0);
    }
    wait_for([&] { return is_terminal_pilot(state_); }, std::numeric_limits<std::int32_t>::max());
    stop_threads();
  }

  // Pilot log: pilot job events and pilot-level task events, in order.
  std::vector<EventRecord> events() const {
    std::lock_guard lock(mutex_);
    return log_;
  }

  std::vector<EventRecord> instance_events(std::size_t i) const {
    std::lock_guard lock(mutex_);
    if (i >= instance_logs_.size()) return {};
    return instance_logs_[i];
  }

  std::vector<std::string> conversion_errors() const {
    std::lock_guard lock(mutex_);
    return conversion_errors_;
  }

  // Tasks assigned to each instance so far.
  std::vector<std::size_t> assignment_counts() const {
    std::lock_guard lock(mutex_);
    std::vector<std::size_t> out(subsets_.size(), 0);
    for (const auto& [uid, shared] : handles_) ++out[shared->snapshot.instance];
    return out;
  }

 private:
  // ---- worker messages (real mode) ----
  struct WorkerSubmit { TaskDescription task; };
  struct WorkerDone { std::string uid; TaskResult result; };
  struct WorkerCancelAll { std::string reason; };
  struct WorkerStop {};
  using WorkerMessage = std::variant<WorkerSubmit, WorkerDone, WorkerCancelAll, WorkerStop>;

  struct Worker {
    std::unique_ptr<sched::SchedulerInstance> core;
    Channel<WorkerMessage> inbox;
    std::map<std::string, pid_t> pids;
    std::thread thread;
  };

  struct AgentJobEvent { EventRecord event; };
  struct AgentInstanceEvent { std::size_t instance; EventRecord event; };
  struct AgentStop {};
  using AgentMessage = std::variant<AgentJobEvent, AgentInstanceEvent, AgentStop>;

  static bool is_terminal_pilot(PilotState s) {
    return s == PilotState::DONE || s == PilotState::FAILED || s == PilotState::CANCELED;
  }

  static std::string instance_name(std::size_t i) { return "instance." + std::to_string(i); }

  void start() {
    std::weak_ptr<Pilot> weak = weak_from_this();
    executor_->subscribe([weak](const EventRecord& e) {
      if (auto self = weak.lock()) self->on_executor_event(e);
    });
    if (!sim_) agent_ = std::thread([this] { agent_loop(); });

    JobSpec js;
    if (sim_) {
      js.executable = std::string(kAgentExecutable);
    } else {
      js.executable = "sleep";
      js.arguments = {std::to_string(desc_.walltime_s)};
    }
    js.resources.node_count = desc_.resources.node_count;
    js.resources.process_count = std::max(1, desc_.resources.node_count);
    js.walltime_s = desc_.walltime_s;
    js.queue = desc_.queue;
    js.project = desc_.project;
    js.environment["PILOT_INSTANCES"] = std::to_string(desc_.instance_count);

    lrm::JobHandle h = [&] {
      try {
        return executor_->submit(validate_job_spec(std::move(js)));
      } catch (...) {
        stop_threads();
        throw;
      }
    }();
    std::vector<EventRecord> early;
    {
      std::lock_guard lock(mutex_);
      job_id_ = h.job_id;
      for (auto& e : early_)
        if (e.subject_id == job_id_) early.push_back(std::move(e));
      early_.clear();
    }
    for (const auto& e : early) route_job_event(e);
  }

  void on_executor_event(const EventRecord& e) {
    {
      std::lock_guard lock(mutex_);
      if (job_id_.empty()) {
        early_.push_back(e);
        return;
      }
      if (e.subject_id != job_id_) return;
    }
    route_job_event(e);
  }

  void route_job_event(const EventRecord& e) {
    if (sim_) handle_job_event(e);
    else agent_inbox_.push(AgentJobEvent{e});
  }

  void handle_job_event(const EventRecord& e) {
    {
      std::lock_guard lock(mutex_);
      log_.push_back(e);
    }
    auto next = std::get<JobState>(e.new_state);
    if (next == JobState::ACTIVE) bootstrap();
    if (is_terminal(next)) terminate(next, e.get("reason"));
    changed_.notify_all();
  }

  void bootstrap() {
    auto h = executor_->status(job_id());
    Allocation allocation{h.nodes, h.job_id};
    const auto k = desc_.instance_count;
    if (k > static_cast<int>(allocation.nodes.size())) {
      {
        std::lock_guard lock(mutex_);
        bootstrap_error_ = "bootstrap: " + std::to_string(k) + " instances requested but only " +
                           std::to_string(allocation.nodes.size()) + " nodes granted";
        detail_ = bootstrap_error_;
      }
      executor_->finish(h.job_id, 1);
      return;
    }
    auto subsets = partition_nodes(allocation, k);
    std::vector<sched::NodeInventory> totals;
    for (const auto& subset : subsets) {
      std::vector<sched::NodeCapacity> caps;
      for (const auto& n : subset) caps.push_back({n.node_id, n.cores, n.gpus});
      totals.emplace_back(std::move(caps));
    }
    for (std::size_t i = 0; i < totals.size(); ++i) {
      auto sink = [this, i](const EventRecord& e) {
        if (sim_) on_instance_event(i, e);
        else agent_inbox_.push(AgentInstanceEvent{i, e});
      };
      auto core = std::make_unique<sched::SchedulerInstance>(instance_name(i), totals[i], sink);
      if (sim_) {
        instances_.push_back(std::move(core));
      } else {
        auto w = std::make_unique<Worker>();
        w->core = std::move(core);
        workers_.push_back(std::move(w));
      }
    }
    if (!sim_)
      for (std::size_t i = 0; i < workers_.size(); ++i)
        workers_[i]->thread = std::thread([this, i] { worker_loop(i); });
    {
      std::lock_guard lock(mutex_);
      subsets_ = std::move(subsets);
      totals_ = std::move(totals);
      outstanding_.assign(totals_.size(), 0);
      instance_logs_.resize(totals_.size());
      if (state_ == PilotState::PENDING) state_ = PilotState::READY;
    }
  }

  void terminate(JobState job_state, const std::string& reason) {
    {
      std::lock_guard lock(mutex_);
      if (is_terminal_pilot(state_)) return;
      state_ = job_state == JobState::COMPLETED ? PilotState::DONE
               : job_state == JobState::FAILED  ? PilotState::FAILED
                                                : PilotState::CANCELED;
      if (detail_.empty()) detail_ = reason.empty() ? std::string(to_string(job_state)) : reason;
    }
    cancel_everything(reason.empty() ? "pilot " + std::string(to_string(job_state)) : reason);
  }

  void cancel_everything(const std::string& reason) {
    if (sim_) {
      for (auto& inst : instances_) inst->cancel_all(sim_->now(), reason);
    } else {
      for (auto& w : workers_) w->inbox.push(WorkerCancelAll{reason});
    }
  }

  // ---- conversion ----

  void on_instance_event(std::size_t instance, const EventRecord& e) {
    TaskUpdate update;
    try {
      update = convert_event(e);
    } catch (const UnknownEvent& ex) {
      std::lock_guard lock(mutex_);
      conversion_errors_.push_back(ex.what());
      return;
    }
    TaskSnapshot snapshot;
    std::vector<Watcher> watchers;
    {
      std::lock_guard lock(mutex_);
      if (options_.keep_instance_logs) instance_logs_[instance].push_back(e);
      auto it = handles_.find(update.uid);
      if (it == handles_.end()) {
        conversion_errors_.push_back("event for unknown task '" + update.uid + "'");
        return;
      }
      auto& shared = *it->second;
      std::lock_guard task_lock(shared.mutex);
      auto& s = shared.snapshot;
      if (!is_legal(s.state, update.state)) {
        conversion_errors_.push_back("illegal update for '" + update.uid + "': " +
                                     std::string(to_string(s.state)) + " -> " +
                                     std::string(to_string(update.state)));
        return;
      }
      log_.push_back(EventRecord{update.timestamp, update.uid, s.state, update.state, update.detail});
      s.state = update.state;
      if (auto r = update.detail.find("reason"); r != update.detail.end()) s.reason = r->second;
      if (is_terminal(update.state)) {
        if (auto c = update.detail.find("exit_code"); c != update.detail.end())
          s.exit_code = std::stoi(c->second);
        if (auto r = results_.find(update.uid); r != results_.end()) {
          s.value = std::move(r->second.value);
          s.error = std::move(r->second.error);
          results_.erase(r);
        }
        --outstanding_[s.instance];
        ++terminal_count_;
      }
      snapshot = s;
      watchers = watchers_;
    }
    changed_.notify_all();
    for (auto& w : watchers) w(snapshot);
  }

  // ---- simulated instances ----

  void request_dispatch(std::size_t i) {
    if (dispatch_pending_.size() <= i) dispatch_pending_.resize(instances_.size(), false);
    if (dispatch_pending_[i]) return;
    dispatch_pending_[i] = true;
    std::weak_ptr<Pilot> weak = weak_from_this();
    // '~' sorts after task uids: completions at a tick land before dispatch.
    sim_->schedule(sim_->now(), "~dispatch." + std::to_string(i), [weak, i] {
      if (auto self = weak.lock()) self->dispatch(i);
    });
  }

  void dispatch(std::size_t i) {
    dispatch_pending_[i] = false;
    auto launches = instances_[i]->schedule(sim_->now());
    std::weak_ptr<Pilot> weak = weak_from_this();
    for (auto& launch : launches) {
      const auto& task = launch.task;
      int code = 0;
      Timestamp modeled = 1;
      if (task.kind == TaskKind::FUNCTION) {
        auto result = call_function(options_.functions.get(), task);
        code = result.exit_code;
        std::lock_guard lock(mutex_);
        results_[task.uid] = std::move(result);
      } else {
        auto outcome = simulate_command(task.payload.target, task.payload.arguments);
        code = outcome.exit_code;
        modeled = outcome.duration.value_or(1);
      }
      auto duration = task.expected_duration_s.value_or(modeled);
      sim_->schedule_in(duration, task.uid, [weak, i, uid = task.uid, code] {
        auto self = weak.lock();
        if (!self) return;
        if (self->instances_[i]->finish(uid, code, self->sim_->now())) self->request_dispatch(i);
      });
    }
  }

  // ---- real-mode threads ----

  void agent_loop() {
    while (auto msg = agent_inbox_.pop()) {
      if (std::holds_alternative<AgentStop>(*msg)) break;
      if (auto* j = std::get_if<AgentJobEvent>(&*msg)) handle_job_event(j->event);
      if (auto* m = std::get_if<AgentInstanceEvent>(&*msg)) on_instance_event(m->instance, m->event);
    }
  }

  void worker_loop(std::size_t i) {
    auto& w = *workers_[i];
    while (auto msg = w.inbox.pop()) {
      if (std::holds_alternative<WorkerStop>(*msg)) break;
      const auto ts = now_ms();
      if (auto* m = std::get_if<WorkerSubmit>(&*msg)) {
        w.core->submit(std::move(m->task));
      } else if (auto* m = std::get_if<WorkerDone>(&*msg)) {
        w.pids.erase(m->uid);
        {
          std::lock_guard lock(mutex_);
          results_[m->uid] = m->result;
        }
        std::map<std::string, std::string> extra;
        if (!m->result.error.empty()) extra["reason"] = m->result.error;
        if (!w.core->finish(m->uid, m->result.exit_code, ts, std::move(extra))) {
          std::lock_guard lock(mutex_);
          results_.erase(m->uid);
        }
      } else if (auto* m = std::get_if<WorkerCancelAll>(&*msg)) {
        for (const auto& uid : w.core->cancel_all(ts, m->reason)) {
          if (auto p = w.pids.find(uid); p != w.pids.end()) kill_process_group(p->second);
        }
      }
      for (auto& launch : w.core->schedule(now_ms())) start_payload(i, std::move(launch.task));
    }
  }

  void start_payload(std::size_t i, TaskDescription task) {
    auto& w = *workers_[i];
    if (task.kind == TaskKind::FUNCTION) {
      ++payloads_;
      std::thread([this, i, task = std::move(task)] {
        auto result = call_function(options_.functions.get(), task);
        workers_[i]->inbox.push(WorkerDone{task.uid, std::move(result)});
        payload_done();
      }).detach();
      return;
    }
    pid_t pid = 0;
    try {
      pid = spawn_process(ProcessSpec{task.payload.target, task.payload.arguments, {}, {}, {}, {}});
    } catch (const std::system_error& ex) {
      w.core->fail(task.uid, ex.what(), now_ms());
      return;
    }
    w.pids[task.uid] = pid;
    ++payloads_;
    std::thread([this, i, pid, uid = task.uid] {
      int code = wait_process(pid);
      workers_[i]->inbox.push(WorkerDone{uid, TaskResult{code, std::nullopt, {}}});
      payload_done();
    }).detach();
  }

  void payload_done() {
    std::lock_guard lock(payload_mutex_);
    --payloads_;
    payload_cv_.notify_all();
  }

  void stop_threads() {
    if (sim_ || stopped_.exchange(true)) return;
    for (auto& w : workers_) w->inbox.push(WorkerCancelAll{"shutdown"});
    {
      std::unique_lock lock(payload_mutex_);
      payload_cv_.wait(lock, [&] { return payloads_ == 0; });
    }
    for (auto& w : workers_) {
      w->inbox.push(WorkerStop{});
      if (w->thread.joinable()) w->thread.join();
    }
    agent_inbox_.push(AgentStop{});
    if (agent_.joinable()) agent_.join();
  }

  // ---- waiting ----

  // Sim: advance the clock at most `timeout` ticks. Real: block on the
  // condition variable for `timeout` milliseconds.
  bool wait_for(const std::function<bool()>& done_locked, std::int64_t timeout) {
    auto done = [&] {
      std::lock_guard lock(mutex_);
      return done_locked();
    };
    if (sim_) {
      if (done()) return true;
      const Timestamp deadline = sim_->now() + std::max<std::int64_t>(timeout, 0);
      while (!done()) {
        auto next = sim_->next_time();
        if (!next || *next > deadline) return false;
        sim_->advance();
      }
      return true;
    }
    std::unique_lock lock(mutex_);
    return changed_.wait_for(lock, std::chrono::milliseconds(timeout), done_locked);
  }

  PilotDescription desc_;
  std::shared_ptr<lrm::Executor> executor_;
  AgentOptions options_;
  sim::Simulation* sim_ = nullptr;

  mutable std::mutex mutex_;
  std::condition_variable changed_;
  std::string job_id_;
  std::vector<EventRecord> early_;
  PilotState state_ = PilotState::PENDING;
  std::string detail_;
  std::string bootstrap_error_;
  std::vector<std::vector<AllocatedNode>> subsets_;
  std::vector<sched::NodeInventory> totals_;
  std::vector<std::size_t> outstanding_;
  UidRegistry uids_;
  std::unordered_map<std::string, std::shared_ptr<TaskHandle::Shared>> handles_;
  std::size_t terminal_count_ = 0;
  std::unordered_map<std::string, TaskResult> results_;
  std::vector<EventRecord> log_;
  std::vector<std::vector<EventRecord>> instance_logs_;
  std::vector<std::string> conversion_errors_;
  std::vector<Watcher> watchers_;

  // simulated instances
  std::vector<std::unique_ptr<sched::SchedulerInstance>> instances_;
  std::vector<bool> dispatch_pending_;

  // real-mode threads
  std::vector<std::unique_ptr<Worker>> workers_;
  Channel<AgentMessage> agent_inbox_;
  std::thread agent_;
  std::mutex payload_mutex_;
  std::condition_variable payload_cv_;
  std::size_t payloads_ = 0;
  std::atomic<bool> stopped_ = false;
};

}  // namespace pf::pilot
