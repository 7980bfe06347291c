#pragma once

// Local-resource-manager abstraction: one submit/cancel/status/wait
// contract over pluggable backends.
//
//  - LocalExecutor runs jobs as processes on this machine. A single owner
//    thread applies every state change; callers talk to it through a
//    message channel and read immutable snapshots.
//  - SimBatchExecutor is a FIFO, first-fit, no-backfill batch queue over a
//    simulated cluster. It lives inside a pf::sim::Simulation and is driven
//    by whoever advances that simulation (wait() does so itself).

#include <future>
#include <memory>
#include <mutex>
#include <thread>

#include "channel.hpp"
#include "payload.hpp"
#include "process.hpp"
#include "script.hpp"
#include "sim.hpp"

namespace pf::lrm {

enum class Capability : std::uint8_t { REAL_EXEC, SIMULATED, SCRIPT_RENDERING };

struct ExecutorDescriptor {
  std::string name;
  std::set<Capability> capabilities;
  bool has(Capability c) const { return capabilities.count(c) != 0; }
};

struct AllocatedNode {
  std::string node_id;
  int cores = 0;
  int gpus = 0;
  bool operator==(const AllocatedNode&) const = default;
};

// Exit code recorded when a job is killed at its walltime.
inline constexpr int kWalltimeExitCode = 124;

struct JobHandle {
  std::string job_id;
  ValidatedJobSpec spec;
  JobState state = JobState::NEW;
  std::optional<int> exit_code;
  std::optional<std::string> native_id;
  std::optional<Timestamp> submit_time;
  std::optional<Timestamp> start_time;
  std::optional<Timestamp> end_time;
  std::string detail;                  // "walltime", spawn errors, ...
  std::vector<AllocatedNode> nodes;    // granted nodes once ACTIVE
};

class SubmissionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFound : public std::runtime_error {
 public:
  explicit NotFound(const std::string& id) : std::runtime_error("unknown job '" + id + "'") {}
};

class Timeout : public std::runtime_error {
 public:
  explicit Timeout(const std::string& id) : std::runtime_error("timed out waiting for '" + id + "'") {}
};

enum class CancelOutcome : std::uint8_t { CANCELED, ALREADY_TERMINAL };

class Executor {
 public:
  using Listener = std::function<void(const EventRecord&)>;

  virtual ~Executor() = default;

  virtual const ExecutorDescriptor& descriptor() const = 0;

  virtual JobHandle submit(const ValidatedJobSpec& spec) = 0;
  virtual CancelOutcome cancel(const std::string& job_id) = 0;
  virtual JobHandle status(const std::string& job_id) const = 0;

  // Blocks until the job is terminal. The timeout is in the backend's time
  // unit: milliseconds for real backends, ticks for simulated ones.
  virtual JobHandle wait(const std::string& job_id, std::int64_t timeout) = 0;

  // Ends the payload of an ACTIVE job whose work is managed in-process (a
  // pilot agent): the job completes with the given exit code instead of
  // being canceled.
  virtual void finish(const std::string& job_id, int exit_code) = 0;

  // Listeners see every job state change in order. They run on the
  // backend's owner context and must not block.
  virtual void subscribe(Listener listener) = 0;
  virtual std::vector<EventRecord> events() const = 0;

  virtual void shutdown() = 0;

  // Non-null for simulated backends.
  virtual sim::Simulation* simulation() { return nullptr; }
};

namespace detail {

// Ordered event log plus listeners. Listeners are called without the log
// lock held.
class EventHub {
 public:
  void subscribe(Executor::Listener l) {
    std::lock_guard lock(mutex_);
    listeners_.push_back(std::move(l));
  }

  void publish(const EventRecord& e) {
    std::vector<Executor::Listener> listeners;
    {
      std::lock_guard lock(mutex_);
      log_.push_back(e);
      listeners = listeners_;
    }
    for (auto& l : listeners) l(e);
  }

  std::vector<EventRecord> log() const {
    std::lock_guard lock(mutex_);
    return log_;
  }

 private:
  mutable std::mutex mutex_;
  std::vector<Executor::Listener> listeners_;
  std::vector<EventRecord> log_;
};

inline EventRecord move_job(JobHandle& h, JobState next, Timestamp ts,
                            std::map<std::string, std::string> detail = {}) {
  transition(h.state, next);
  EventRecord e{ts, h.job_id, h.state, next, std::move(detail)};
  h.state = next;
  if (next == JobState::QUEUED) h.submit_time = ts;
  if (next == JobState::ACTIVE) h.start_time = ts;
  if (is_terminal(next)) h.end_time = ts;
  if (h.exit_code) e.detail["exit_code"] = std::to_string(*h.exit_code);
  if (!h.detail.empty()) e.detail["reason"] = h.detail;
  return e;
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

inline std::string job_id(std::string_view backend, std::uint64_t n) {
  char buf[24];
  std::snprintf(buf, sizeof buf, ".%06llu", static_cast<unsigned long long>(n));
  return std::string(backend) + buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

class ExecutorRegistry {
 public:
  void add(std::shared_ptr<Executor> executor) {
    std::lock_guard lock(mutex_);
    const auto& name = executor->descriptor().name;
    if (!executors_.emplace(name, executor).second)
      throw std::invalid_argument("executor '" + name + "' already registered");
  }

  std::shared_ptr<Executor> get(const std::string& name) const {
    std::lock_guard lock(mutex_);
    auto it = executors_.find(name);
    if (it == executors_.end()) throw std::out_of_range("no executor named '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [name, _] : executors_) out.push_back(name);
    return out;
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Executor>> executors_;
};

// ---------------------------------------------------------------------------
// Local processes
// ---------------------------------------------------------------------------

class LocalExecutor final : public Executor {
 public:
  struct Options {
    std::string name = "local";
    int cores = 0;  // advertised node size; 0 = hardware concurrency
  };

  LocalExecutor() : LocalExecutor(Options{}) {}

  explicit LocalExecutor(Options options) : options_(std::move(options)) {
    if (options_.cores <= 0)
      options_.cores = std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
    descriptor_ = {options_.name, {Capability::REAL_EXEC}};
    owner_ = std::thread([this] { loop(); });
  }

  ~LocalExecutor() override { shutdown(); }

  LocalExecutor(const LocalExecutor&) = delete;
  LocalExecutor& operator=(const LocalExecutor&) = delete;

  const ExecutorDescriptor& descriptor() const override { return descriptor_; }

  JobHandle submit(const ValidatedJobSpec& spec) override {
    if (spec.resources().node_count > 1)
      throw ValidationError("node_count", "local backend runs on a single node");
    EventRecord queued;
    JobHandle snapshot{"", spec};
    {
      std::lock_guard lock(mutex_);
      if (!accepting_) throw SubmissionError(options_.name + " is shut down");
      auto id = detail::job_id(options_.name, ++counter_);
      Record rec{JobHandle{id, spec}};
      queued = detail::move_job(rec.handle, JobState::QUEUED, now_ms());
      snapshot = rec.handle;
      jobs_.emplace(id, std::move(rec));
    }
    hub_.publish(queued);
    inbox_.push(Launch{snapshot.job_id});
    return snapshot;
  }

  CancelOutcome cancel(const std::string& job_id) override {
    auto done = std::make_shared<std::promise<CancelOutcome>>();
    auto result = done->get_future();
    {
      std::lock_guard lock(mutex_);
      auto it = jobs_.find(job_id);
      if (it == jobs_.end()) throw NotFound(job_id);
      if (is_terminal(it->second.handle.state) || !loop_alive_)
        return CancelOutcome::ALREADY_TERMINAL;
      inbox_.push(CancelRequest{job_id, done});
    }
    return result.get();
  }

  JobHandle status(const std::string& job_id) const override {
    std::lock_guard lock(mutex_);
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) throw NotFound(job_id);
    return it->second.handle;
  }

  JobHandle wait(const std::string& job_id, std::int64_t timeout_ms) override {
    std::unique_lock lock(mutex_);
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) throw NotFound(job_id);
    bool done = changed_.wait_for(lock, std::chrono::milliseconds(timeout_ms), [&] {
      return jobs_.at(job_id).announced;
    });
    if (!done) throw Timeout(job_id);
    return jobs_.at(job_id).handle;
  }

  void finish(const std::string& job_id, int exit_code) override {
    auto done = std::make_shared<std::promise<void>>();
    auto result = done->get_future();
    {
      std::lock_guard lock(mutex_);
      if (!jobs_.count(job_id)) throw NotFound(job_id);
      if (!loop_alive_) return;
      inbox_.push(FinishRequest{job_id, exit_code, done});
    }
    result.get();
  }

  void subscribe(Listener listener) override { hub_.subscribe(std::move(listener)); }
  std::vector<EventRecord> events() const override { return hub_.log(); }

  // Cancels queued and running jobs, then stops the owner thread.
  void shutdown() override {
    {
      std::lock_guard lock(mutex_);
      if (!running_) return;
      accepting_ = false;
    }
    inbox_.push(Stop{});
    if (owner_.joinable()) owner_.join();
    std::vector<std::thread> waiters;
    {
      std::lock_guard lock(mutex_);
      running_ = false;
      waiters.swap(waiters_);
    }
    for (auto& t : waiters)
      if (t.joinable()) t.join();
  }

  int cores() const { return options_.cores; }

 private:
  struct Record {
    JobHandle handle;
    pid_t pid = 0;
    bool cancel_requested = false;
    bool walltime_hit = false;
    bool announced = false;  // terminal event published
    std::optional<int> finish_code;
    std::vector<std::shared_ptr<std::promise<CancelOutcome>>> cancel_waiters;
    std::vector<std::shared_ptr<std::promise<void>>> finish_waiters;
  };

  struct Launch { std::string id; };
  struct Exited { std::string id; int code; };
  struct CancelRequest { std::string id; std::shared_ptr<std::promise<CancelOutcome>> done; };
  struct FinishRequest { std::string id; int code; std::shared_ptr<std::promise<void>> done; };
  struct Stop {};
  using Message = std::variant<Launch, Exited, CancelRequest, FinishRequest, Stop>;

  void loop() {
    bool stopping = false;
    for (;;) {
      auto msg = inbox_.pop_for(std::chrono::milliseconds(until_next_deadline()));
      enforce_walltimes();
      if (msg) {
        std::visit(detail::overloaded{
                       [&](Launch& m) { on_launch(m); },
                       [&](Exited& m) { on_exit(m); },
                       [&](CancelRequest& m) { on_cancel(m); },
                       [&](FinishRequest& m) { on_finish(m); },
                       [&](Stop&) {
                         stopping = true;
                         cancel_everything();
                       },
                   },
                   *msg);
      }
      if (stopping && active_count() == 0) break;
    }
    {
      std::lock_guard lock(mutex_);
      loop_alive_ = false;
    }
    // Requests that raced with shutdown still get an answer.
    while (auto msg = inbox_.try_pop()) {
      if (auto* c = std::get_if<CancelRequest>(&*msg)) c->done->set_value(CancelOutcome::ALREADY_TERMINAL);
      if (auto* f = std::get_if<FinishRequest>(&*msg)) f->done->set_value();
    }
  }

  std::int64_t until_next_deadline() {
    std::lock_guard lock(mutex_);
    std::int64_t wait = 60'000;
    auto now = now_ms();
    for (const auto& [id, rec] : jobs_) {
      if (rec.handle.state != JobState::ACTIVE || rec.walltime_hit) continue;
      auto deadline = *rec.handle.start_time + rec.handle.spec->walltime_s * 1000;
      wait = std::min(wait, std::max<std::int64_t>(deadline - now, 0));
    }
    return wait;
  }

  void enforce_walltimes() {
    std::lock_guard lock(mutex_);
    auto now = now_ms();
    for (auto& [id, rec] : jobs_) {
      if (rec.handle.state != JobState::ACTIVE || rec.walltime_hit || rec.cancel_requested) continue;
      if (*rec.handle.start_time + rec.handle.spec->walltime_s * 1000 <= now) {
        rec.walltime_hit = true;
        kill_process_group(rec.pid);
      }
    }
  }

  std::size_t active_count() {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(std::count_if(jobs_.begin(), jobs_.end(), [](const auto& kv) {
      return kv.second.handle.state == JobState::ACTIVE;
    }));
  }

  // Listeners see a transition before any waiter can return because of it.
  void commit(std::vector<EventRecord> events) {
    for (const auto& e : events) hub_.publish(e);
    {
      std::lock_guard lock(mutex_);
      for (const auto& e : events)
        if (is_terminal(e.new_state)) jobs_.at(e.subject_id).announced = true;
    }
    changed_.notify_all();
  }

  void on_launch(const Launch& m) {
    std::vector<EventRecord> events;
    {
      std::lock_guard lock(mutex_);
      auto& rec = jobs_.at(m.id);
      if (rec.handle.state != JobState::QUEUED) return;
      const auto& s = rec.handle.spec.spec();
      ProcessSpec ps{s.executable, s.arguments, s.environment, s.directory, s.stdout_path,
                     s.stderr_path};
      try {
        rec.pid = spawn_process(ps);
      } catch (const std::system_error& ex) {
        rec.handle.exit_code = 127;
        rec.handle.detail = ex.what();
        events.push_back(detail::move_job(rec.handle, JobState::FAILED, now_ms()));
      }
      if (rec.pid > 0) {
        rec.handle.native_id = std::to_string(rec.pid);
        rec.handle.nodes = {AllocatedNode{"localhost", options_.cores, 0}};
        events.push_back(detail::move_job(rec.handle, JobState::ACTIVE, now_ms()));
        waiters_.emplace_back([this, id = m.id, pid = rec.pid] {
          int code = wait_process(pid);
          inbox_.push(Exited{id, code});
        });
      }
    }
    commit(std::move(events));
  }

  void on_exit(const Exited& m) {
    std::vector<EventRecord> events;
    std::vector<std::shared_ptr<std::promise<CancelOutcome>>> cancel_waiters;
    std::vector<std::shared_ptr<std::promise<void>>> finish_waiters;
    {
      std::lock_guard lock(mutex_);
      auto& rec = jobs_.at(m.id);
      auto& h = rec.handle;
      JobState next;
      if (rec.cancel_requested) {
        next = JobState::CANCELED;
      } else if (rec.walltime_hit) {
        h.exit_code = kWalltimeExitCode;
        h.detail = "walltime";
        next = JobState::FAILED;
      } else {
        h.exit_code = rec.finish_code.value_or(m.code);
        next = *h.exit_code == 0 ? JobState::COMPLETED : JobState::FAILED;
      }
      events.push_back(detail::move_job(h, next, now_ms()));
      cancel_waiters.swap(rec.cancel_waiters);
      finish_waiters.swap(rec.finish_waiters);
    }
    commit(std::move(events));
    for (auto& w : cancel_waiters) w->set_value(CancelOutcome::CANCELED);
    for (auto& w : finish_waiters) w->set_value();
  }

  void on_cancel(CancelRequest& m) {
    std::vector<EventRecord> events;
    CancelOutcome immediate = CancelOutcome::CANCELED;
    bool deferred = false;
    {
      std::lock_guard lock(mutex_);
      auto& rec = jobs_.at(m.id);
      if (is_terminal(rec.handle.state)) {
        immediate = CancelOutcome::ALREADY_TERMINAL;
      } else if (rec.handle.state == JobState::QUEUED) {
        events.push_back(detail::move_job(rec.handle, JobState::CANCELED, now_ms()));
      } else {
        rec.cancel_requested = true;
        rec.cancel_waiters.push_back(m.done);
        kill_process_group(rec.pid);
        deferred = true;
      }
    }
    commit(std::move(events));
    if (!deferred) m.done->set_value(immediate);
  }

  void on_finish(FinishRequest& m) {
    bool deferred = false;
    {
      std::lock_guard lock(mutex_);
      auto& rec = jobs_.at(m.id);
      if (rec.handle.state == JobState::ACTIVE && !rec.cancel_requested) {
        rec.finish_code = m.code;
        rec.finish_waiters.push_back(m.done);
        kill_process_group(rec.pid);
        deferred = true;
      }
    }
    if (!deferred) m.done->set_value();
  }

  void cancel_everything() {
    std::vector<EventRecord> events;
    {
      std::lock_guard lock(mutex_);
      for (auto& [id, rec] : jobs_) {
        if (rec.handle.state == JobState::QUEUED) {
          events.push_back(detail::move_job(rec.handle, JobState::CANCELED, now_ms()));
        } else if (rec.handle.state == JobState::ACTIVE && !rec.cancel_requested) {
          rec.cancel_requested = true;
          kill_process_group(rec.pid);
        }
      }
    }
    commit(std::move(events));
  }

  Options options_;
  ExecutorDescriptor descriptor_;
  detail::EventHub hub_;
  Channel<Message> inbox_;

  mutable std::mutex mutex_;
  std::condition_variable changed_;
  std::map<std::string, Record> jobs_;
  std::vector<std::thread> waiters_;
  std::uint64_t counter_ = 0;
  bool accepting_ = true;
  bool running_ = true;
  bool loop_alive_ = true;

  std::thread owner_;  // last: started after every other member exists
};

// ---------------------------------------------------------------------------
// Simulated batch queue
// ---------------------------------------------------------------------------

class SimBatchExecutor final : public Executor {
 public:
  using PayloadModel = std::function<SimOutcome(const ValidatedJobSpec&)>;

  struct Options {
    std::string name = "sim-batch";
    int reserved_cores_per_node = 0;
    PayloadModel model;                       // default: simulate_command
    std::optional<ScriptTemplate> dialect;    // render a submit script per job
  };

  SimBatchExecutor(std::shared_ptr<sim::Simulation> simulation, sim::ClusterConfig cluster)
      : SimBatchExecutor(std::move(simulation), std::move(cluster), Options{}) {}

  SimBatchExecutor(std::shared_ptr<sim::Simulation> simulation, sim::ClusterConfig cluster,
                   Options options)
      : sim_(std::move(simulation)), cluster_(std::move(cluster)), options_(std::move(options)) {
    sim::validate(cluster_);
    if (options_.reserved_cores_per_node < 0 ||
        options_.reserved_cores_per_node >= cluster_.cores_per_node)
      throw ValidationError("reserved_cores_per_node", "must be in [0, cores_per_node)");
    if (!options_.model) {
      options_.model = [](const ValidatedJobSpec& s) {
        return simulate_command(s->executable, s->arguments);
      };
    }
    descriptor_ = {options_.name, {Capability::SIMULATED, Capability::SCRIPT_RENDERING}};
    free_.assign(static_cast<std::size_t>(cluster_.node_count), true);
    free_count_ = cluster_.node_count;
  }

  const ExecutorDescriptor& descriptor() const override { return descriptor_; }
  const sim::ClusterConfig& cluster() const { return cluster_; }
  sim::Simulation* simulation() override { return sim_.get(); }

  int schedulable_cores_per_node() const {
    return cluster_.cores_per_node - options_.reserved_cores_per_node;
  }

  // Nodes a job occupies exclusively; throws ValidationError if the
  // request cannot fit this cluster at all.
  int nodes_needed(const ValidatedJobSpec& spec) const {
    const auto& r = spec.resources();
    const int cpn = schedulable_cores_per_node();
    const int gpn = cluster_.gpus_per_node;
    if (r.cores_per_process > cpn)
      throw ValidationError("cores_per_process", "exceeds node size");
    if (r.gpus_per_process > gpn) throw ValidationError("gpus_per_process", "exceeds node size");
    int per_node = cpn / r.cores_per_process;
    if (r.gpus_per_process > 0) per_node = std::min(per_node, gpn / r.gpus_per_process);
    int nodes = 0;
    if (r.node_count > 0) {
      nodes = r.node_count;
      int ranks_per_node = (r.process_count + nodes - 1) / nodes;
      if (ranks_per_node > per_node) throw ValidationError("process_count", "exceeds node size");
    } else if (r.processes_per_node > 0) {
      if (r.processes_per_node > per_node)
        throw ValidationError("processes_per_node", "exceeds node size");
      nodes = (r.process_count + r.processes_per_node - 1) / r.processes_per_node;
    } else {
      nodes = (r.process_count + per_node - 1) / per_node;
    }
    if (nodes > cluster_.node_count) throw ValidationError("node_count", "exceeds cluster size");
    return nodes;
  }

  JobHandle submit(const ValidatedJobSpec& spec) override {
    std::lock_guard lock(mutex_);
    if (!accepting_) throw SubmissionError(options_.name + " is shut down");
    int nodes = nodes_needed(spec);
    auto id = detail::job_id(options_.name, ++counter_);
    Record rec{JobHandle{id, spec}, nodes};
    rec.handle.native_id = std::to_string(counter_);
    if (options_.dialect) rec.script = render_submit_script(*options_.dialect, spec);
    auto e = detail::move_job(rec.handle, JobState::QUEUED, sim_->now());
    auto snapshot = rec.handle;
    jobs_.emplace(id, std::move(rec));
    queue_.push_back(id);
    hub_.publish(e);
    request_dispatch();
    return snapshot;
  }

  CancelOutcome cancel(const std::string& job_id) override {
    std::lock_guard lock(mutex_);
    auto& rec = find(job_id);
    auto& h = rec.handle;
    if (is_terminal(h.state)) return CancelOutcome::ALREADY_TERMINAL;
    if (h.state == JobState::QUEUED) {
      queue_.erase(std::find(queue_.begin(), queue_.end(), job_id));
      hub_.publish(detail::move_job(h, JobState::CANCELED, sim_->now()));
      request_dispatch();
      return CancelOutcome::CANCELED;
    }
    end_job(rec, JobState::CANCELED);
    return CancelOutcome::CANCELED;
  }

  JobHandle status(const std::string& job_id) const override {
    std::lock_guard lock(mutex_);
    return find(job_id).handle;
  }

  std::optional<std::string> script(const std::string& job_id) const {
    std::lock_guard lock(mutex_);
    return find(job_id).script;
  }

  // Advances the simulation until the job is terminal or timeout ticks have
  // elapsed. A timer event at the deadline lets the clock reach it.
  JobHandle wait(const std::string& job_id, std::int64_t timeout_ticks) override {
    std::lock_guard lock(mutex_);
    auto& rec = find(job_id);
    if (is_terminal(rec.handle.state)) return rec.handle;
    const Timestamp deadline = sim_->now() + std::max<std::int64_t>(timeout_ticks, 0);
    sim_->schedule(deadline, "~timer", {});
    while (!is_terminal(rec.handle.state)) {
      auto next = sim_->next_time();
      if (!next || *next > deadline) break;
      sim_->advance();
    }
    if (!is_terminal(rec.handle.state)) throw Timeout(job_id);
    return rec.handle;
  }

  void finish(const std::string& job_id, int exit_code) override {
    std::lock_guard lock(mutex_);
    auto& rec = find(job_id);
    if (rec.handle.state != JobState::ACTIVE) return;
    rec.handle.exit_code = exit_code;
    end_job(rec, exit_code == 0 ? JobState::COMPLETED : JobState::FAILED);
  }

  void subscribe(Listener listener) override { hub_.subscribe(std::move(listener)); }
  std::vector<EventRecord> events() const override { return hub_.log(); }

  void shutdown() override {
    std::lock_guard lock(mutex_);
    accepting_ = false;
    while (!queue_.empty()) {
      auto id = queue_.front();
      queue_.pop_front();
      hub_.publish(detail::move_job(jobs_.at(id).handle, JobState::CANCELED, sim_->now()));
    }
    for (auto& [id, rec] : jobs_)
      if (rec.handle.state == JobState::ACTIVE) end_job(rec, JobState::CANCELED);
  }

  // Conservation check helper: free node count plus nodes held by ACTIVE
  // jobs always equals the cluster size.
  int free_nodes() const {
    std::lock_guard lock(mutex_);
    return free_count_;
  }

  int busy_nodes() const {
    std::lock_guard lock(mutex_);
    int busy = 0;
    for (const auto& [id, rec] : jobs_) busy += static_cast<int>(rec.node_indices.size());
    return busy;
  }

 private:
  struct Record {
    JobHandle handle;
    int nodes_needed = 0;
    std::vector<int> node_indices;
    std::uint64_t generation = 0;
    std::optional<std::string> script;
  };

  Record& find(const std::string& id) {
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw NotFound(id);
    return it->second;
  }
  const Record& find(const std::string& id) const {
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw NotFound(id);
    return it->second;
  }

  void request_dispatch() {
    if (dispatch_pending_) return;
    dispatch_pending_ = true;
    sim_->schedule(sim_->now(), "~batch", [this] {
      std::lock_guard lock(mutex_);
      dispatch_pending_ = false;
      dispatch();
    });
  }

  // Strict FIFO: the head job blocks everything behind it.
  void dispatch() {
    while (!queue_.empty()) {
      auto& rec = jobs_.at(queue_.front());
      if (rec.nodes_needed > free_count_) break;
      queue_.pop_front();
      start_job(rec);
    }
  }

  void start_job(Record& rec) {
    auto& h = rec.handle;
    for (int i = 0; i < cluster_.node_count && static_cast<int>(rec.node_indices.size()) < rec.nodes_needed; ++i) {
      if (!free_[static_cast<std::size_t>(i)]) continue;
      free_[static_cast<std::size_t>(i)] = false;
      rec.node_indices.push_back(i);
      h.nodes.push_back({sim::node_name(i), schedulable_cores_per_node(), cluster_.gpus_per_node});
    }
    free_count_ -= rec.nodes_needed;
    std::string ids;
    for (const auto& n : h.nodes) ids += (ids.empty() ? "" : ",") + n.node_id;
    hub_.publish(detail::move_job(h, JobState::ACTIVE, sim_->now(), {{"node_ids", ids}}));

    auto outcome = options_.model(h.spec);
    const auto generation = ++rec.generation;
    const auto walltime = h.spec->walltime_s;
    const auto id = h.job_id;
    if (outcome.duration && *outcome.duration <= walltime) {
      int code = outcome.exit_code;
      sim_->schedule_in(*outcome.duration, id, [this, id, generation, code] {
        std::lock_guard lock(mutex_);
        auto& r = jobs_.at(id);
        if (r.generation != generation || r.handle.state != JobState::ACTIVE) return;
        r.handle.exit_code = code;
        end_job(r, code == 0 ? JobState::COMPLETED : JobState::FAILED);
      });
    } else {
      sim_->schedule_in(walltime, id, [this, id, generation] {
        std::lock_guard lock(mutex_);
        auto& r = jobs_.at(id);
        if (r.generation != generation || r.handle.state != JobState::ACTIVE) return;
        r.handle.exit_code = kWalltimeExitCode;
        r.handle.detail = "walltime";
        end_job(r, JobState::FAILED);
      });
    }
  }

  void end_job(Record& rec, JobState next) {
    ++rec.generation;
    for (int i : rec.node_indices) free_[static_cast<std::size_t>(i)] = true;
    free_count_ += static_cast<int>(rec.node_indices.size());
    rec.node_indices.clear();
    hub_.publish(detail::move_job(rec.handle, next, sim_->now()));
    request_dispatch();
  }

  std::shared_ptr<sim::Simulation> sim_;
  sim::ClusterConfig cluster_;
  Options options_;
  ExecutorDescriptor descriptor_;
  detail::EventHub hub_;

  mutable std::recursive_mutex mutex_;
  std::map<std::string, Record> jobs_;
  std::deque<std::string> queue_;
  std::vector<bool> free_;
  int free_count_ = 0;
  std::uint64_t counter_ = 0;
  bool accepting_ = true;
  bool dispatch_pending_ = false;
};

}  // namespace pf::lrm
