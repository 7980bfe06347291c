#pragma once

// Canonical structured-text form (JSON) of the core model. Output documents
// keep the declared field order; input documents reject unknown keys.

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "core.hpp"

namespace pf {

using Json = nlohmann::ordered_json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void expect_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                        std::string_view what) {
  if (!j.is_object()) throw FormatError(std::string(what) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw FormatError(std::string(what) + ": unknown field '" + key + "'");
  }
}

template <typename T>
T read(const Json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("field '") + key + "' has the wrong type");
  }
}

template <typename T>
std::optional<T> read_opt(const Json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline Json to_json(const ResourceSpec& r) {
  return Json{{"node_count", r.node_count},
              {"process_count", r.process_count},
              {"processes_per_node", r.processes_per_node},
              {"cores_per_process", r.cores_per_process},
              {"gpus_per_process", r.gpus_per_process}};
}

inline ResourceSpec resource_spec_from_json(const Json& j) {
  detail::expect_keys(j, {"node_count", "process_count", "processes_per_node", "cores_per_process",
                          "gpus_per_process"},
                      "resources");
  ResourceSpec r;
  r.node_count = detail::read(j, "node_count", r.node_count);
  r.process_count = detail::read(j, "process_count", r.process_count);
  r.processes_per_node = detail::read(j, "processes_per_node", r.processes_per_node);
  r.cores_per_process = detail::read(j, "cores_per_process", r.cores_per_process);
  r.gpus_per_process = detail::read(j, "gpus_per_process", r.gpus_per_process);
  return r;
}

inline Json to_json(const JobSpec& s) {
  Json j;
  j["executable"] = s.executable;
  j["arguments"] = s.arguments;
  j["environment"] = Json::object();
  for (const auto& [k, v] : s.environment) j["environment"][k] = v;
  j["directory"] = s.directory;
  if (s.stdout_path) j["stdout_path"] = *s.stdout_path;
  if (s.stderr_path) j["stderr_path"] = *s.stderr_path;
  j["resources"] = to_json(s.resources);
  j["walltime_s"] = s.walltime_s;
  if (s.queue) j["queue"] = *s.queue;
  if (s.project) j["project"] = *s.project;
  return j;
}

inline JobSpec job_spec_from_json(const Json& j) {
  detail::expect_keys(j, {"executable", "arguments", "environment", "directory", "stdout_path",
                          "stderr_path", "resources", "walltime_s", "queue", "project"},
                      "job spec");
  JobSpec s;
  s.executable = detail::read<std::string>(j, "executable", "");
  s.arguments = detail::read<std::vector<std::string>>(j, "arguments", {});
  s.environment = detail::read<std::map<std::string, std::string>>(j, "environment", {});
  s.directory = detail::read<std::string>(j, "directory", "");
  s.stdout_path = detail::read_opt<std::string>(j, "stdout_path");
  s.stderr_path = detail::read_opt<std::string>(j, "stderr_path");
  if (auto it = j.find("resources"); it != j.end()) s.resources = resource_spec_from_json(*it);
  s.walltime_s = detail::read<std::int64_t>(j, "walltime_s", s.walltime_s);
  s.queue = detail::read_opt<std::string>(j, "queue");
  s.project = detail::read_opt<std::string>(j, "project");
  return s;
}

inline Json to_json(const TaskDescription& t) {
  Json j;
  j["uid"] = t.uid;
  j["kind"] = std::string(to_string(t.kind));
  Json payload;
  payload[t.kind == TaskKind::EXECUTABLE ? "executable" : "function"] = t.payload.target;
  payload["arguments"] = t.payload.arguments;
  j["payload"] = payload;
  j["ranks"] = t.ranks;
  j["cores_per_rank"] = t.cores_per_rank;
  j["gpus_per_rank"] = t.gpus_per_rank;
  if (t.expected_duration_s) j["expected_duration_s"] = *t.expected_duration_s;
  return j;
}

inline TaskDescription task_from_json(const Json& j) {
  detail::expect_keys(j, {"uid", "kind", "payload", "ranks", "cores_per_rank", "gpus_per_rank",
                          "expected_duration_s"},
                      "task");
  TaskDescription t;
  t.uid = detail::read<std::string>(j, "uid", "");
  auto kind = detail::read<std::string>(j, "kind", "EXECUTABLE");
  if (kind == "EXECUTABLE") t.kind = TaskKind::EXECUTABLE;
  else if (kind == "FUNCTION") t.kind = TaskKind::FUNCTION;
  else throw FormatError("task: unknown kind '" + kind + "'");
  if (auto it = j.find("payload"); it != j.end()) {
    const char* key = t.kind == TaskKind::EXECUTABLE ? "executable" : "function";
    detail::expect_keys(*it, {key, "arguments"}, "payload");
    t.payload.target = detail::read<std::string>(*it, key, "");
    t.payload.arguments = detail::read<std::vector<std::string>>(*it, "arguments", {});
  }
  t.ranks = detail::read(j, "ranks", t.ranks);
  t.cores_per_rank = detail::read(j, "cores_per_rank", t.cores_per_rank);
  t.gpus_per_rank = detail::read(j, "gpus_per_rank", t.gpus_per_rank);
  t.expected_duration_s = detail::read_opt<std::int64_t>(j, "expected_duration_s");
  return t;
}

// Event log line: timestamp, subject_id, kind, old_state, new_state, detail.
inline Json to_json(const EventRecord& e) {
  Json j;
  j["timestamp"] = e.timestamp;
  j["subject_id"] = e.subject_id;
  j["kind"] = std::holds_alternative<JobState>(e.old_state) ? "job" : "task";
  j["old_state"] = std::string(to_string(e.old_state));
  j["new_state"] = std::string(to_string(e.new_state));
  j["detail"] = Json::object();
  for (const auto& [k, v] : e.detail) j["detail"][k] = v;
  return j;
}

inline EventRecord event_from_json(const Json& j) {
  detail::expect_keys(j, {"timestamp", "subject_id", "kind", "old_state", "new_state", "detail"},
                      "event");
  EventRecord e;
  e.timestamp = detail::read<std::int64_t>(j, "timestamp", 0);
  e.subject_id = detail::read<std::string>(j, "subject_id", "");
  auto kind = detail::read<std::string>(j, "kind", "task");
  auto old_name = detail::read<std::string>(j, "old_state", "");
  auto new_name = detail::read<std::string>(j, "new_state", "");
  auto convert = [&](auto tag, const std::string& name) -> AnyState {
    using S = decltype(tag);
    auto s = parse_state<S>(name);
    if (!s) throw FormatError("event: unknown state '" + name + "'");
    return *s;
  };
  if (kind == "job") {
    e.old_state = convert(JobState{}, old_name);
    e.new_state = convert(JobState{}, new_name);
  } else if (kind == "task") {
    e.old_state = convert(TaskState{}, old_name);
    e.new_state = convert(TaskState{}, new_name);
  } else {
    throw FormatError("event: unknown kind '" + kind + "'");
  }
  e.detail = detail::read<std::map<std::string, std::string>>(j, "detail", {});
  return e;
}

inline void write_event_log(std::ostream& out, std::span<const EventRecord> events) {
  for (const auto& e : events) out << to_json(e).dump() << '\n';
}

inline std::vector<EventRecord> read_event_log(std::istream& in) {
  std::vector<EventRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(event_from_json(Json::parse(line)));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("event log: ") + ex.what());
    }
  }
  return out;
}

inline Json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
}

}  // namespace pf
