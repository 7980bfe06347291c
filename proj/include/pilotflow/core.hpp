#pragma once

// Shared data model: job and task specifications, state machines, events.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

namespace pf {

// Simulated time is counted in integer ticks (one tick per second of
// walltime), real time in milliseconds since the epoch.
using Timestamp = std::int64_t;

inline Timestamp now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct FieldError {
  std::string field;
  std::string reason;
  bool operator==(const FieldError&) const = default;
};

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<FieldError> errors)
      : std::runtime_error(format(errors)), errors_(std::move(errors)) {}

  ValidationError(std::string field, std::string reason)
      : ValidationError(std::vector<FieldError>{{std::move(field), std::move(reason)}}) {}

  const std::vector<FieldError>& errors() const noexcept { return errors_; }

  bool names(std::string_view field) const {
    return std::any_of(errors_.begin(), errors_.end(),
                       [&](const FieldError& e) { return e.field == field; });
  }

 private:
  static std::string format(const std::vector<FieldError>& errors) {
    std::string out = "validation failed:";
    for (const auto& e : errors) {
      out += " ";
      out += e.field;
      out += " (";
      out += e.reason;
      out += ");";
    }
    return out;
  }

  std::vector<FieldError> errors_;
};

// ---------------------------------------------------------------------------
// States
// ---------------------------------------------------------------------------

enum class JobState : std::uint8_t { NEW, QUEUED, ACTIVE, COMPLETED, FAILED, CANCELED };

enum class TaskState : std::uint8_t { NEW, SCHEDULING, EXECUTING, DONE, FAILED, CANCELED };

inline constexpr std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::NEW:       return "NEW";
    case JobState::QUEUED:    return "QUEUED";
    case JobState::ACTIVE:    return "ACTIVE";
    case JobState::COMPLETED: return "COMPLETED";
    case JobState::FAILED:    return "FAILED";
    case JobState::CANCELED:  return "CANCELED";
  }
  return "UNKNOWN";
}

inline constexpr std::string_view to_string(TaskState s) {
  switch (s) {
    case TaskState::NEW:        return "NEW";
    case TaskState::SCHEDULING: return "SCHEDULING";
    case TaskState::EXECUTING:  return "EXECUTING";
    case TaskState::DONE:       return "DONE";
    case TaskState::FAILED:     return "FAILED";
    case TaskState::CANCELED:   return "CANCELED";
  }
  return "UNKNOWN";
}

inline constexpr bool is_terminal(JobState s) {
  return s == JobState::COMPLETED || s == JobState::FAILED || s == JobState::CANCELED;
}

inline constexpr bool is_terminal(TaskState s) {
  return s == TaskState::DONE || s == TaskState::FAILED || s == TaskState::CANCELED;
}

inline constexpr bool is_legal(JobState from, JobState to) {
  switch (from) {
    case JobState::NEW:    return to == JobState::QUEUED;
    case JobState::QUEUED: return to == JobState::ACTIVE || to == JobState::CANCELED || to == JobState::FAILED;
    case JobState::ACTIVE: return to == JobState::COMPLETED || to == JobState::FAILED || to == JobState::CANCELED;
    default:               return false;
  }
}

inline constexpr bool is_legal(TaskState from, TaskState to) {
  switch (from) {
    case TaskState::NEW:        return to == TaskState::SCHEDULING;
    case TaskState::SCHEDULING: return to == TaskState::EXECUTING || to == TaskState::CANCELED || to == TaskState::FAILED;
    case TaskState::EXECUTING:  return to == TaskState::DONE || to == TaskState::FAILED || to == TaskState::CANCELED;
    default:                    return false;
  }
}

class IllegalTransition : public std::logic_error {
 public:
  template <typename State>
  IllegalTransition(State from, State to)
      : std::logic_error("illegal transition " + std::string(to_string(from)) + " -> " +
                         std::string(to_string(to))),
        from_(to_string(from)), to_(to_string(to)) {}

  const std::string& from() const noexcept { return from_; }
  const std::string& to() const noexcept { return to_; }

 private:
  std::string from_;
  std::string to_;
};

template <typename State>
  requires std::is_same_v<State, JobState> || std::is_same_v<State, TaskState>
void transition(State current, State next) {
  if (!is_legal(current, next)) throw IllegalTransition(current, next);
}

template <typename State>
std::optional<State> parse_state(std::string_view name);

template <>
inline std::optional<JobState> parse_state<JobState>(std::string_view name) {
  for (auto s : {JobState::NEW, JobState::QUEUED, JobState::ACTIVE, JobState::COMPLETED,
                 JobState::FAILED, JobState::CANCELED})
    if (to_string(s) == name) return s;
  return std::nullopt;
}

template <>
inline std::optional<TaskState> parse_state<TaskState>(std::string_view name) {
  for (auto s : {TaskState::NEW, TaskState::SCHEDULING, TaskState::EXECUTING, TaskState::DONE,
                 TaskState::FAILED, TaskState::CANCELED})
    if (to_string(s) == name) return s;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Job specification
// ---------------------------------------------------------------------------

// Zero for node_count / processes_per_node means "scheduler's choice".
struct ResourceSpec {
  int node_count = 0;
  int process_count = 1;
  int processes_per_node = 0;
  int cores_per_process = 1;
  int gpus_per_process = 0;

  bool operator==(const ResourceSpec&) const = default;
};

struct JobSpec {
  std::string executable;
  std::vector<std::string> arguments;
  std::map<std::string, std::string> environment;
  std::string directory;
  std::optional<std::string> stdout_path;
  std::optional<std::string> stderr_path;
  ResourceSpec resources;
  std::int64_t walltime_s = 3600;
  std::optional<std::string> queue;
  std::optional<std::string> project;

  bool operator==(const JobSpec&) const = default;
};

class ValidatedJobSpec;
ValidatedJobSpec validate_job_spec(JobSpec spec);

// A JobSpec that passed validation with defaults resolved. Only
// validate_job_spec can produce one.
class ValidatedJobSpec {
 public:
  const JobSpec& spec() const noexcept { return spec_; }
  const JobSpec* operator->() const noexcept { return &spec_; }
  const ResourceSpec& resources() const noexcept { return spec_.resources; }

  bool operator==(const ValidatedJobSpec&) const = default;

 private:
  friend ValidatedJobSpec validate_job_spec(JobSpec spec);
  explicit ValidatedJobSpec(JobSpec spec) : spec_(std::move(spec)) {}
  JobSpec spec_;
};

inline void check_resources(const ResourceSpec& r, std::vector<FieldError>& errors) {
  if (r.node_count < 0) errors.push_back({"node_count", "negative"});
  if (r.processes_per_node < 0) errors.push_back({"processes_per_node", "negative"});
  if (r.gpus_per_process < 0) errors.push_back({"gpus_per_process", "negative"});
  if (r.process_count < 1) errors.push_back({"process_count", "must be >= 1"});
  if (r.cores_per_process < 1) errors.push_back({"cores_per_process", "must be >= 1"});
  if (r.node_count > 0 && r.processes_per_node > 0 &&
      static_cast<std::int64_t>(r.node_count) * r.processes_per_node != r.process_count)
    errors.push_back({"process_count", "inconsistent"});
}

// Resolves the working directory default and reports every violated
// invariant together.
inline ValidatedJobSpec validate_job_spec(JobSpec spec) {
  std::vector<FieldError> errors;
  if (spec.executable.empty()) errors.push_back({"executable", "empty"});
  if (spec.walltime_s < 1) errors.push_back({"walltime_s", "must be >= 1"});
  check_resources(spec.resources, errors);
  if (spec.queue && spec.queue->empty()) errors.push_back({"queue", "empty"});
  if (spec.project && spec.project->empty()) errors.push_back({"project", "empty"});
  if (!errors.empty()) throw ValidationError(std::move(errors));
  if (spec.directory.empty()) spec.directory = std::filesystem::current_path().string();
  return ValidatedJobSpec(std::move(spec));
}

// ---------------------------------------------------------------------------
// Task description
// ---------------------------------------------------------------------------

enum class TaskKind : std::uint8_t { EXECUTABLE, FUNCTION };

inline constexpr std::string_view to_string(TaskKind k) {
  return k == TaskKind::EXECUTABLE ? "EXECUTABLE" : "FUNCTION";
}

// target is the executable path or the registered function name.
struct Payload {
  std::string target;
  std::vector<std::string> arguments;
  bool operator==(const Payload&) const = default;
};

struct TaskDescription {
  std::string uid;
  TaskKind kind = TaskKind::EXECUTABLE;
  Payload payload;
  int ranks = 1;
  int cores_per_rank = 1;
  int gpus_per_rank = 0;
  std::optional<std::int64_t> expected_duration_s;

  int total_cores() const { return ranks * cores_per_rank; }
  int total_gpus() const { return ranks * gpus_per_rank; }

  bool operator==(const TaskDescription&) const = default;
};

inline void validate_task(const TaskDescription& t) {
  std::vector<FieldError> errors;
  if (t.uid.empty()) errors.push_back({"uid", "empty"});
  if (t.payload.target.empty()) errors.push_back({"payload", "empty"});
  if (t.ranks < 1) errors.push_back({"ranks", "must be >= 1"});
  if (t.cores_per_rank < 1) errors.push_back({"cores_per_rank", "must be >= 1"});
  if (t.gpus_per_rank < 0) errors.push_back({"gpus_per_rank", "negative"});
  if (t.expected_duration_s && *t.expected_duration_s < 0)
    errors.push_back({"expected_duration_s", "negative"});
  if (!errors.empty()) throw ValidationError(std::move(errors));
}

// uids are caller-supplied; a session only checks that they are unique.
class UidRegistry {
 public:
  void claim(const std::string& uid) {
    if (!seen_.insert(uid).second) throw ValidationError("uid", "duplicate '" + uid + "'");
  }
  bool contains(const std::string& uid) const { return seen_.count(uid) != 0; }

 private:
  std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

using AnyState = std::variant<JobState, TaskState>;

inline std::string_view to_string(const AnyState& s) {
  return std::visit([](auto v) { return to_string(v); }, s);
}

inline bool is_terminal(const AnyState& s) {
  return std::visit([](auto v) { return is_terminal(v); }, s);
}

struct EventRecord {
  Timestamp timestamp = 0;
  std::string subject_id;
  AnyState old_state;
  AnyState new_state;
  std::map<std::string, std::string> detail;

  bool operator==(const EventRecord&) const = default;

  std::string get(const std::string& key, std::string fallback = {}) const {
    auto it = detail.find(key);
    return it == detail.end() ? fallback : it->second;
  }
};

struct ReplayViolation {
  std::size_t index = 0;
  std::string subject_id;
  std::string reason;
};

// Replays an event log subject by subject. Each subject's records must form
// a path in its transition graph: consistent state kind, old_state equal to
// the previous new_state, nondecreasing timestamps, nothing after a
// terminal state. With from_new set, every path has to start at NEW.
inline std::vector<ReplayViolation> replay_events(std::span<const EventRecord> events,
                                                  bool from_new = true) {
  struct Cursor {
    AnyState state;
    Timestamp last;
  };
  std::vector<ReplayViolation> out;
  std::unordered_map<std::string, Cursor> cursors;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    auto fail = [&](std::string why) { out.push_back({i, e.subject_id, std::move(why)}); };
    if (e.old_state.index() != e.new_state.index()) {
      fail("mixed state kinds");
      continue;
    }
    bool legal = std::visit(
        [&](auto from) {
          using S = decltype(from);
          return is_legal(from, std::get<S>(e.new_state));
        },
        e.old_state);
    auto it = cursors.find(e.subject_id);
    if (it == cursors.end()) {
      if (from_new && e.old_state != AnyState{JobState::NEW} &&
          e.old_state != AnyState{TaskState::NEW})
        fail("path does not start at NEW");
    } else {
      if (is_terminal(it->second.state)) fail("event after terminal state");
      else if (it->second.state != e.old_state) fail("discontinuous path");
      if (e.timestamp < it->second.last) fail("timestamp regressed");
    }
    if (!legal)
      fail("illegal edge " + std::string(to_string(e.old_state)) + " -> " +
           std::string(to_string(e.new_state)));
    cursors[e.subject_id] = Cursor{e.new_state, e.timestamp};
  }
  return out;
}

}  // namespace pf
