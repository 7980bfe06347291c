#pragma once

// Batch submit-script rendering. Dialects are data: a directive prefix, an
// ordered list of field -> directive format rules, and a launch line.

#include <cctype>
#include <cstdio>
#include <sstream>

#include "core.hpp"
#include "serialize.hpp"

namespace pf {

class TemplateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fields a directive rule may map. Placement-relevant ones must be covered
// by every template, either by a format or by an unsupported marker.
inline constexpr std::string_view kScriptFields[] = {
    "node_count", "process_count", "processes_per_node", "cores_per_process", "gpus_per_process",
    "walltime",   "queue",         "project",            "directory",         "stdout_path",
    "stderr_path"};

inline constexpr std::string_view kRequiredScriptFields[] = {
    "node_count", "process_count", "walltime", "queue", "project", "stdout_path", "stderr_path"};

struct DirectiveRule {
  std::string field;
  std::string format;  // "{value}" is replaced; ignored when unsupported
  bool unsupported = false;
};

struct ScriptTemplate {
  std::string dialect;
  std::string shebang = "#!/bin/bash";
  std::string directive_prefix;
  std::vector<DirectiveRule> directives;
  std::string launch_line_format;  // "{ranks}" and "{command}" are replaced
};

inline void validate_template(const ScriptTemplate& t) {
  std::set<std::string> seen;
  for (const auto& rule : t.directives) {
    if (std::find(std::begin(kScriptFields), std::end(kScriptFields), rule.field) ==
        std::end(kScriptFields))
      throw TemplateError(t.dialect + ": unknown field '" + rule.field + "'");
    if (!seen.insert(rule.field).second)
      throw TemplateError(t.dialect + ": field '" + rule.field + "' mapped twice");
  }
  for (auto field : kRequiredScriptFields) {
    if (!seen.count(std::string(field)))
      throw TemplateError(t.dialect + ": no directive or unsupported marker for '" +
                          std::string(field) + "'");
  }
  if (t.launch_line_format.find("{ranks}") == std::string::npos)
    throw TemplateError(t.dialect + ": launch line lacks {ranks}");
}

inline ScriptTemplate template_from_json(const Json& j) {
  detail::expect_keys(j, {"dialect", "shebang", "directive_prefix", "directives", "launch_line"},
                      "script template");
  ScriptTemplate t;
  t.dialect = detail::read<std::string>(j, "dialect", "");
  t.shebang = detail::read<std::string>(j, "shebang", t.shebang);
  t.directive_prefix = detail::read<std::string>(j, "directive_prefix", "");
  t.launch_line_format = detail::read<std::string>(j, "launch_line", "");
  for (const auto& d : j.value("directives", Json::array())) {
    detail::expect_keys(d, {"field", "format", "unsupported"}, "directive");
    DirectiveRule rule;
    rule.field = detail::read<std::string>(d, "field", "");
    rule.format = detail::read<std::string>(d, "format", "");
    rule.unsupported = detail::read<bool>(d, "unsupported", false);
    t.directives.push_back(std::move(rule));
  }
  validate_template(t);
  return t;
}

// Shipped dialects.
inline constexpr std::string_view kSlurmLike = R"({
  "dialect": "slurm-like",
  "directive_prefix": "#SBATCH",
  "directives": [
    {"field": "node_count",         "format": "--nodes={value}"},
    {"field": "process_count",      "format": "--ntasks={value}"},
    {"field": "processes_per_node", "format": "--ntasks-per-node={value}"},
    {"field": "cores_per_process",  "format": "--cpus-per-task={value}"},
    {"field": "gpus_per_process",   "format": "--gpus-per-task={value}"},
    {"field": "walltime",           "format": "--time={value}"},
    {"field": "queue",              "format": "--partition={value}"},
    {"field": "project",            "format": "--account={value}"},
    {"field": "directory",          "format": "--chdir={value}"},
    {"field": "stdout_path",        "format": "--output={value}"},
    {"field": "stderr_path",        "format": "--error={value}"}
  ],
  "launch_line": "srun -n {ranks} {command}"
})";

inline constexpr std::string_view kPbsLike = R"({
  "dialect": "pbs-like",
  "directive_prefix": "#PBS",
  "directives": [
    {"field": "queue",              "format": "-q {value}"},
    {"field": "project",            "format": "-A {value}"},
    {"field": "node_count",         "format": "-l nodes={value}"},
    {"field": "process_count",      "format": "-l mpiprocs={value}"},
    {"field": "processes_per_node", "unsupported": true},
    {"field": "cores_per_process",  "format": "-l ncpus={value}"},
    {"field": "gpus_per_process",   "format": "-l ngpus={value}"},
    {"field": "walltime",           "format": "-l walltime={value}"},
    {"field": "directory",          "format": "-d {value}"},
    {"field": "stdout_path",        "format": "-o {value}"},
    {"field": "stderr_path",        "format": "-e {value}"}
  ],
  "launch_line": "mpiexec -n {ranks} {command}"
})";

inline std::vector<std::string> dialect_names() { return {"pbs-like", "slurm-like"}; }

inline std::optional<ScriptTemplate> find_dialect(std::string_view name) {
  if (name == "slurm-like") return template_from_json(Json::parse(kSlurmLike));
  if (name == "pbs-like") return template_from_json(Json::parse(kPbsLike));
  return std::nullopt;
}

// H:MM:SS with unbounded hours, two-digit padding.
inline std::string format_walltime(std::int64_t seconds) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld", static_cast<long long>(seconds / 3600),
                static_cast<long long>(seconds / 60 % 60), static_cast<long long>(seconds % 60));
  return buf;
}

// Single-quotes a word unless it consists of shell-safe characters only.
inline std::string shell_quote(std::string_view word) {
  auto safe = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || std::string_view("@%+=:,./-_").find(c) !=
                                                              std::string_view::npos;
  };
  if (!word.empty() && std::all_of(word.begin(), word.end(), safe)) return std::string(word);
  std::string out = "'";
  for (char c : word) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  out += "'";
  return out;
}

namespace detail {

inline std::string replace_all(std::string text, std::string_view key, std::string_view value) {
  std::size_t pos = 0;
  while ((pos = text.find(key, pos)) != std::string::npos) {
    text.replace(pos, key.size(), value);
    pos += value.size();
  }
  return text;
}

// Value of a script field, or nullopt when the spec leaves it unset.
inline std::optional<std::string> field_value(const JobSpec& s, std::string_view field) {
  const auto& r = s.resources;
  auto positive = [](int v) -> std::optional<std::string> {
    if (v > 0) return std::to_string(v);
    return std::nullopt;
  };
  if (field == "node_count") return positive(r.node_count);
  if (field == "process_count") return std::to_string(r.process_count);
  if (field == "processes_per_node") return positive(r.processes_per_node);
  if (field == "cores_per_process") return std::to_string(r.cores_per_process);
  if (field == "gpus_per_process") return positive(r.gpus_per_process);
  if (field == "walltime") return format_walltime(s.walltime_s);
  if (field == "queue") return s.queue;
  if (field == "project") return s.project;
  if (field == "directory") {
    if (s.directory.empty()) return std::nullopt;
    return s.directory;
  }
  if (field == "stdout_path") return s.stdout_path;
  if (field == "stderr_path") return s.stderr_path;
  return std::nullopt;
}

}  // namespace detail

// Shebang, one directive per set field in the template's order, environment
// exports in key order, a blank line, then the launch line. LF endings.
inline std::string render_submit_script(const ScriptTemplate& tpl, const ValidatedJobSpec& validated) {
  const JobSpec& spec = validated.spec();
  std::ostringstream out;
  out << tpl.shebang << '\n';
  for (const auto& rule : tpl.directives) {
    auto value = detail::field_value(spec, rule.field);
    if (!value) continue;
    if (rule.unsupported)
      throw TemplateError(tpl.dialect + " does not support '" + rule.field + "'");
    out << tpl.directive_prefix << ' ' << detail::replace_all(rule.format, "{value}", *value) << '\n';
  }
  if (!spec.environment.empty()) {
    out << '\n';
    for (const auto& [key, value] : spec.environment) {
      bool ident = !key.empty() && !std::isdigit(static_cast<unsigned char>(key[0])) &&
                   std::all_of(key.begin(), key.end(), [](char c) {
                     return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
                   });
      if (!ident) throw TemplateError("environment key '" + key + "' is not a shell identifier");
      out << "export " << key << '=' << shell_quote(value) << '\n';
    }
  }
  std::string command = shell_quote(spec.executable);
  for (const auto& arg : spec.arguments) command += ' ' + shell_quote(arg);
  auto launch = detail::replace_all(tpl.launch_line_format, "{ranks}",
                                    std::to_string(spec.resources.process_count));
  launch = detail::replace_all(launch, "{command}", command);
  out << '\n' << launch << '\n';
  return out.str();
}

}  // namespace pf
