#pragma once

// Dataflow engine: workflow graphs of apps with futures, a dependency kernel
// that releases ready nodes to a task executor, and the translator from
// dataflow nodes to pilot task descriptions.

#include <climits>

#include "pilot.hpp"
#include "serialize.hpp"

namespace pf::dataflow {

struct DataflowNode {
  std::string uid;
  TaskKind kind = TaskKind::EXECUTABLE;
  Payload payload;
  std::set<std::string> depends_on;
  std::optional<std::map<std::string, std::int64_t>> resource_specification;
  std::optional<std::int64_t> expected_duration_s;  // simulated runtime
};

class WorkflowGraph {
 public:
  // Returns the uid so apps can be chained: g.add(...) feeds depends_on.
  const std::string& add(DataflowNode node) {
    if (node.uid.empty()) throw ValidationError("uid", "empty");
    auto [it, inserted] = nodes_.emplace(node.uid, std::move(node));
    if (!inserted) throw ValidationError("uid", "duplicate '" + it->first + "'");
    return it->first;
  }

  const std::map<std::string, DataflowNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& [uid, node] : nodes_) n += node.depends_on.size();
    return n;
  }

 private:
  std::map<std::string, DataflowNode> nodes_;
};

// Convenience for building graphs in code.
inline DataflowNode app(std::string uid, std::string executable, std::vector<std::string> arguments,
                        std::set<std::string> depends_on = {}) {
  DataflowNode n;
  n.uid = std::move(uid);
  n.payload = {std::move(executable), std::move(arguments)};
  n.depends_on = std::move(depends_on);
  return n;
}

inline DataflowNode function_app(std::string uid, std::string function,
                                 std::vector<std::string> arguments,
                                 std::set<std::string> depends_on = {}) {
  auto n = app(std::move(uid), std::move(function), std::move(arguments), std::move(depends_on));
  n.kind = TaskKind::FUNCTION;
  return n;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

class CyclicDependency : public std::runtime_error {
 public:
  explicit CyclicDependency(std::vector<std::string> witness)
      : std::runtime_error("cyclic dependency: " + join(witness)), witness_(std::move(witness)) {}
  const std::vector<std::string>& witness() const { return witness_; }

 private:
  static std::string join(const std::vector<std::string>& w) {
    std::string out;
    for (const auto& uid : w) out += (out.empty() ? "" : " -> ") + uid;
    return out;
  }
  std::vector<std::string> witness_;
};

class DanglingReference : public std::runtime_error {
 public:
  DanglingReference(std::string node, std::string missing)
      : std::runtime_error("'" + node + "' depends on missing '" + missing + "'"),
        node_(std::move(node)),
        missing_(std::move(missing)) {}
  const std::string& node() const { return node_; }
  const std::string& missing() const { return missing_; }

 private:
  std::string node_;
  std::string missing_;
};

// Iterative DFS in uid order. The witness starts and ends at the same uid,
// following depends_on edges.
inline void validate_graph(const WorkflowGraph& graph) {
  const auto& nodes = graph.nodes();
  for (const auto& [uid, node] : nodes)
    for (const auto& dep : node.depends_on)
      if (!nodes.count(dep)) throw DanglingReference(uid, dep);

  enum Mark : std::uint8_t { WHITE, GREY, BLACK };
  std::map<std::string, Mark> mark;
  for (const auto& [root, unused] : nodes) {
    if (mark[root] != WHITE) continue;
    using Frame = std::pair<std::string, std::set<std::string>::const_iterator>;
    std::vector<Frame> stack{{root, nodes.at(root).depends_on.begin()}};
    mark[root] = GREY;
    while (!stack.empty()) {
      auto& [uid, next] = stack.back();
      const auto& deps = nodes.at(uid).depends_on;
      if (next == deps.end()) {
        mark[uid] = BLACK;
        stack.pop_back();
        continue;
      }
      const std::string dep = *next++;
      if (mark[dep] == GREY) {
        std::vector<std::string> witness;
        auto from = std::find_if(stack.begin(), stack.end(), [&](const Frame& f) { return f.first == dep; });
        for (auto it = from; it != stack.end(); ++it) witness.push_back(it->first);
        witness.push_back(dep);
        throw CyclicDependency(std::move(witness));
      }
      if (mark[dep] == WHITE) {
        mark[dep] = GREY;
        stack.emplace_back(dep, nodes.at(dep).depends_on.begin());
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Translation
// ---------------------------------------------------------------------------

class TranslationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kResourceKeys[] = {"ranks", "cores_per_rank", "gpus_per_rank"};

inline TaskDescription translate_task(const DataflowNode& node) {
  TaskDescription t;
  t.uid = node.uid;
  t.kind = node.kind;
  t.payload = node.payload;
  t.expected_duration_s = node.expected_duration_s;
  if (node.resource_specification) {
    for (const auto& [key, value] : *node.resource_specification) {
      auto bad = [&](const char* why) {
        return TranslationError(node.uid + ": " + key + "=" + std::to_string(value) + " " + why);
      };
      if (value > INT_MAX) throw bad("out of range");
      if (key == "ranks") {
        if (value < 1) throw bad("must be >= 1");
        t.ranks = static_cast<int>(value);
      } else if (key == "cores_per_rank") {
        if (value < 1) throw bad("must be >= 1");
        t.cores_per_rank = static_cast<int>(value);
      } else if (key == "gpus_per_rank") {
        if (value < 0) throw bad("must be >= 0");
        t.gpus_per_rank = static_cast<int>(value);
      } else {
        throw TranslationError(node.uid + ": unknown resource key '" + key + "'");
      }
    }
  }
  if (t.payload.target.empty()) throw TranslationError(node.uid + ": empty payload");
  return t;
}

// Inverse of the translator's resource mapping.
inline std::map<std::string, std::int64_t> read_resource_specification(const TaskDescription& t) {
  return {{"ranks", t.ranks}, {"cores_per_rank", t.cores_per_rank}, {"gpus_per_rank", t.gpus_per_rank}};
}

// ---------------------------------------------------------------------------
// Workflow documents
// ---------------------------------------------------------------------------

inline DataflowNode node_from_json(const Json& j) {
  pf::detail::expect_keys(
      j, {"uid", "kind", "payload", "depends_on", "resource_specification", "expected_duration_s"},
      "workflow node");
  DataflowNode n;
  n.uid = pf::detail::read<std::string>(j, "uid", "");
  auto kind = pf::detail::read<std::string>(j, "kind", "EXECUTABLE");
  if (kind == "EXECUTABLE") n.kind = TaskKind::EXECUTABLE;
  else if (kind == "FUNCTION") n.kind = TaskKind::FUNCTION;
  else throw FormatError("workflow node: unknown kind '" + kind + "'");
  if (auto it = j.find("payload"); it != j.end()) {
    const char* key = n.kind == TaskKind::EXECUTABLE ? "executable" : "function";
    pf::detail::expect_keys(*it, {key, "arguments"}, "payload");
    n.payload.target = pf::detail::read<std::string>(*it, key, "");
    n.payload.arguments = pf::detail::read<std::vector<std::string>>(*it, "arguments", {});
  }
  auto deps = pf::detail::read<std::vector<std::string>>(j, "depends_on", {});
  n.depends_on = {deps.begin(), deps.end()};
  n.resource_specification =
      pf::detail::read_opt<std::map<std::string, std::int64_t>>(j, "resource_specification");
  n.expected_duration_s = pf::detail::read_opt<std::int64_t>(j, "expected_duration_s");
  return n;
}

inline Json to_json(const DataflowNode& n) {
  Json j;
  j["uid"] = n.uid;
  j["kind"] = std::string(to_string(n.kind));
  const char* key = n.kind == TaskKind::EXECUTABLE ? "executable" : "function";
  j["payload"] = {{key, n.payload.target}, {"arguments", n.payload.arguments}};
  j["depends_on"] = std::vector<std::string>(n.depends_on.begin(), n.depends_on.end());
  if (n.resource_specification) {
    j["resource_specification"] = Json::object();
    for (const auto& [k, v] : *n.resource_specification) j["resource_specification"][k] = v;
  }
  if (n.expected_duration_s) j["expected_duration_s"] = *n.expected_duration_s;
  return j;
}

// A workflow document is a list of node documents.
inline WorkflowGraph workflow_from_json(const Json& j) {
  if (!j.is_array()) throw FormatError("workflow: expected a list of nodes");
  WorkflowGraph g;
  for (const auto& node : j) g.add(node_from_json(node));
  return g;
}

inline Json to_json(const WorkflowGraph& g) {
  Json j = Json::array();
  for (const auto& [uid, node] : g.nodes()) j.push_back(to_json(node));
  return j;
}

// ---------------------------------------------------------------------------
// Futures
// ---------------------------------------------------------------------------

enum class NodeStatus : std::uint8_t { PENDING, DONE, FAILED, CANCELED };

inline constexpr std::string_view to_string(NodeStatus s) {
  switch (s) {
    case NodeStatus::PENDING:  return "PENDING";
    case NodeStatus::DONE:     return "DONE";
    case NodeStatus::FAILED:   return "FAILED";
    case NodeStatus::CANCELED: return "CANCELED";
  }
  return "UNKNOWN";
}

struct NodeResult {
  NodeStatus status = NodeStatus::PENDING;
  std::optional<int> exit_code;
  std::optional<std::string> value;
  std::string error;
};

inline constexpr std::string_view kDependencyFailed = "dependency failed";

// Result slot for one node. Readable from any thread.
class Future {
 public:
  Future() : state_(std::make_shared<State>()) {}

  bool resolved() const {
    std::lock_guard lock(state_->mutex);
    return state_->result.status != NodeStatus::PENDING;
  }

  NodeResult result() const {
    std::lock_guard lock(state_->mutex);
    return state_->result;
  }

  // Blocks until resolved; only meaningful when another thread drives the
  // run.
  NodeResult wait() const {
    std::unique_lock lock(state_->mutex);
    state_->cv.wait(lock, [&] { return state_->result.status != NodeStatus::PENDING; });
    return state_->result;
  }

  void resolve(NodeResult r) const {
    {
      std::lock_guard lock(state_->mutex);
      state_->result = std::move(r);
    }
    state_->cv.notify_all();
  }

 private:
  struct State {
    mutable std::mutex mutex;
    std::condition_variable cv;
    NodeResult result;
  };
  std::shared_ptr<State> state_;
};

// ---------------------------------------------------------------------------
// Executors
// ---------------------------------------------------------------------------

class ExecutorUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TaskExecutor {
 public:
  using Completion = std::function<void(NodeResult)>;

  virtual ~TaskExecutor() = default;
  virtual bool available() const = 0;
  // The completion may run on any thread, exactly once.
  virtual void submit(TaskDescription task, Completion done) = 0;
  // Simulated executors advance their clock one step; false when there is
  // nothing to advance.
  virtual bool pump() { return false; }
  virtual bool simulated() const { return false; }
};

inline NodeResult to_node_result(const pilot::TaskSnapshot& s) {
  NodeResult r;
  r.exit_code = s.exit_code;
  r.value = s.value;
  switch (s.state) {
    case TaskState::DONE:
      r.status = NodeStatus::DONE;
      break;
    case TaskState::CANCELED:
      r.status = NodeStatus::CANCELED;
      r.error = s.reason.empty() ? "canceled" : s.reason;
      break;
    default:
      r.status = NodeStatus::FAILED;
      r.error = !s.error.empty()    ? s.error
                : !s.reason.empty() ? s.reason
                : s.exit_code       ? "exit code " + std::to_string(*s.exit_code)
                                    : "failed";
  }
  return r;
}

// Submits through a pilot: the starter waits for the pilot, the translator
// has already produced the TaskDescription, the submitter enqueues it.
class PilotTaskExecutor final : public TaskExecutor {
 public:
  PilotTaskExecutor(std::shared_ptr<pilot::Pilot> pilot, std::int64_t ready_timeout)
      : pilot_(std::move(pilot)), shared_(std::make_shared<Shared>()) {
    bool ready = false;
    try {
      ready = pilot_->wait_ready(ready_timeout);
    } catch (const pilot::BootstrapError& e) {
      throw ExecutorUnavailable(e.what());
    }
    if (!ready) throw ExecutorUnavailable("pilot not ready: " + std::string(to_string(pilot_->state())));
    pilot_->add_watcher([shared = shared_](const pilot::TaskSnapshot& s) {
      if (!is_terminal(s.state)) return;
      Completion done;
      {
        std::lock_guard lock(shared->mutex);
        auto it = shared->pending.find(s.uid);
        if (it == shared->pending.end()) return;
        done = std::move(it->second);
        shared->pending.erase(it);
      }
      done(to_node_result(s));
    });
  }

  bool available() const override { return pilot_->ready(); }
  bool simulated() const override { return pilot_->simulated(); }
  bool pump() override { return pilot_->step(); }

  void submit(TaskDescription task, Completion done) override {
    {
      std::lock_guard lock(shared_->mutex);
      shared_->pending.emplace(task.uid, std::move(done));
    }
    const std::string uid = task.uid;
    try {
      pilot_->submit_tasks({std::move(task)});
    } catch (...) {
      std::lock_guard lock(shared_->mutex);
      shared_->pending.erase(uid);
      throw;
    }
  }

  pilot::Pilot& pilot() { return *pilot_; }

 private:
  struct Shared {
    std::mutex mutex;
    std::map<std::string, Completion> pending;
  };
  std::shared_ptr<pilot::Pilot> pilot_;
  std::shared_ptr<Shared> shared_;
};

// Runs payloads directly on this machine, one thread per task, no resource
// accounting.
class LocalTaskExecutor final : public TaskExecutor {
 public:
  explicit LocalTaskExecutor(std::shared_ptr<const FunctionRegistry> functions = nullptr)
      : functions_(std::move(functions)) {}

  ~LocalTaskExecutor() override {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return running_ == 0; });
  }

  bool available() const override { return true; }

  void submit(TaskDescription task, Completion done) override {
    {
      std::lock_guard lock(mutex_);
      ++running_;
    }
    std::thread([this, task = std::move(task), done = std::move(done)] {
      NodeResult r;
      if (task.kind == TaskKind::FUNCTION) {
        auto out = call_function(functions_.get(), task);
        r.exit_code = out.exit_code;
        r.value = out.value;
        r.error = out.error;
      } else {
        try {
          r.exit_code = wait_process(
              spawn_process(ProcessSpec{task.payload.target, task.payload.arguments, {}, {}, {}, {}}));
        } catch (const std::system_error& ex) {
          r.exit_code = 127;
          r.error = ex.what();
        }
      }
      r.status = r.exit_code == 0 ? NodeStatus::DONE : NodeStatus::FAILED;
      if (r.status == NodeStatus::FAILED && r.error.empty())
        r.error = "exit code " + std::to_string(*r.exit_code);
      done(std::move(r));
      std::lock_guard lock(mutex_);
      --running_;
      cv_.notify_all();
    }).detach();
  }

 private:
  std::shared_ptr<const FunctionRegistry> functions_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::size_t running_ = 0;
};

// ---------------------------------------------------------------------------
// Kernel
// ---------------------------------------------------------------------------

// "{{uid}}" in an argument is replaced with that dependency's value.
inline std::vector<std::string> bind_arguments(const DataflowNode& node,
                                               const std::map<std::string, Future>& futures) {
  auto args = node.payload.arguments;
  for (auto& arg : args) {
    for (const auto& dep : node.depends_on) {
      auto value = futures.at(dep).result().value.value_or("");
      arg = pf::detail::replace_all(std::move(arg), "{{" + dep + "}}", value);
    }
  }
  return args;
}

class ExecutorStalled : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Owner loop over the dependency graph. Ready nodes go to the executor in
// uid order; completions come back through an inbox.
class DataflowKernel {
 public:
  explicit DataflowKernel(TaskExecutor& executor) : executor_(executor) {}

  // Valid once run() has started; readable from any thread.
  Future future(const std::string& uid) const {
    std::lock_guard lock(mutex_);
    return futures_.at(uid);
  }

  std::map<std::string, NodeResult> run(const WorkflowGraph& graph) {
    validate_graph(graph);
    if (!executor_.available()) throw ExecutorUnavailable("executor not available");

    std::map<std::string, std::size_t> waiting;
    std::map<std::string, std::vector<std::string>> dependents;
    std::set<std::string> ready;
    {
      std::lock_guard lock(mutex_);
      futures_.clear();
      for (const auto& [uid, node] : graph.nodes()) futures_.emplace(uid, Future{});
    }
    for (const auto& [uid, node] : graph.nodes()) {
      waiting[uid] = node.depends_on.size();
      for (const auto& dep : node.depends_on) dependents[dep].push_back(uid);
      if (node.depends_on.empty()) ready.insert(uid);
    }

    auto inbox = std::make_shared<Channel<std::pair<std::string, NodeResult>>>();
    std::size_t unresolved = graph.size();

    std::function<void(const std::string&, NodeResult)> resolve = [&](const std::string& uid,
                                                                      NodeResult r) {
      const auto& f = futures_.at(uid);
      if (f.resolved()) return;
      const bool ok = r.status == NodeStatus::DONE;
      f.resolve(std::move(r));
      --unresolved;
      for (const auto& child : dependents[uid]) {
        if (ok) {
          if (--waiting[child] == 0) ready.insert(child);
        } else {
          resolve(child, NodeResult{NodeStatus::FAILED, std::nullopt, std::nullopt,
                                    std::string(kDependencyFailed)});
        }
      }
    };

    while (unresolved > 0) {
      while (!ready.empty()) {
        auto uid = *ready.begin();
        ready.erase(ready.begin());
        if (futures_.at(uid).resolved()) continue;
        const auto& node = graph.nodes().at(uid);
        try {
          auto task = translate_task(node);
          task.payload.arguments = bind_arguments(node, futures_);
          executor_.submit(std::move(task), [inbox, uid](NodeResult r) { inbox->push({uid, std::move(r)}); });
        } catch (const std::exception& ex) {
          resolve(uid, NodeResult{NodeStatus::FAILED, std::nullopt, std::nullopt, ex.what()});
        }
      }
      if (unresolved == 0) break;
      std::optional<std::pair<std::string, NodeResult>> msg = inbox->try_pop();
      while (!msg) {
        if (executor_.simulated()) {
          if (!executor_.pump()) throw ExecutorStalled("simulation drained with tasks outstanding");
          msg = inbox->try_pop();
        } else {
          msg = inbox->pop();
        }
      }
      resolve(msg->first, std::move(msg->second));
    }

    std::map<std::string, NodeResult> out;
    for (const auto& [uid, f] : futures_) out.emplace(uid, f.result());
    return out;
  }

 private:
  TaskExecutor& executor_;
  mutable std::mutex mutex_;
  std::map<std::string, Future> futures_;
};

inline Json to_json(const std::map<std::string, NodeResult>& results) {
  Json j = Json::object();
  for (const auto& [uid, r] : results) {
    Json entry;
    entry["status"] = std::string(to_string(r.status));
    entry["exit_code"] = r.exit_code ? Json(*r.exit_code) : Json(nullptr);
    entry["value"] = r.value ? Json(*r.value) : Json(nullptr);
    entry["error"] = r.error;
    j[uid] = entry;
  }
  return j;
}

}  // namespace pf::dataflow
