#pragma once

// What a payload does: registered functions for FUNCTION tasks and the
// simulator's interpretation of command lines.

#include <cmath>
#include <functional>
#include <mutex>

#include "core.hpp"

namespace pf {

using Function = std::function<std::string(const std::vector<std::string>&)>;

// Name -> callable table. FUNCTION payloads resolve against it; code is
// never shipped between processes.
class FunctionRegistry {
 public:
  void add(const std::string& name, Function fn) {
    std::lock_guard lock(mutex_);
    if (!table_.emplace(name, std::move(fn)).second)
      throw std::invalid_argument("function '" + name + "' already registered");
  }

  std::optional<Function> find(const std::string& name) const {
    std::lock_guard lock(mutex_);
    auto it = table_.find(name);
    if (it == table_.end()) return std::nullopt;
    return it->second;
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, Function> table_;
};

struct TaskResult {
  int exit_code = 0;
  std::optional<std::string> value;
  std::string error;
};

inline TaskResult call_function(const FunctionRegistry* registry, const TaskDescription& task) {
  std::optional<Function> fn;
  if (registry) fn = registry->find(task.payload.target);
  if (!fn) return {127, std::nullopt, "unknown function '" + task.payload.target + "'"};
  try {
    return {0, (*fn)(task.payload.arguments), {}};
  } catch (const std::exception& ex) {
    return {1, std::nullopt, ex.what()};
  } catch (...) {
    return {1, std::nullopt, "unknown exception"};
  }
}

// duration == nullopt: the payload runs until it is ended from outside
// (an agent-held pilot job) or its walltime expires.
struct SimOutcome {
  std::optional<Timestamp> duration = 1;
  int exit_code = 0;
};

inline constexpr std::string_view kAgentExecutable = "pilot-agent";

namespace detail {

inline std::string_view basename(std::string_view path) {
  auto slash = path.rfind('/');
  return slash == std::string_view::npos ? path : path.substr(slash + 1);
}

inline std::optional<double> to_number(std::string_view text) {
  try {
    std::size_t used = 0;
    std::string s(text);
    double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline std::vector<std::string_view> words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    auto j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline SimOutcome simulate_words(std::span<const std::string_view> w) {
  SimOutcome out;
  if (w.empty()) return out;
  auto cmd = basename(w[0]);
  if (cmd == kAgentExecutable) {
    out.duration = std::nullopt;
  } else if (cmd == "sleep" && w.size() > 1) {
    if (auto n = to_number(w[1])) out.duration = static_cast<Timestamp>(std::ceil(*n));
  } else if (cmd == "false") {
    out.exit_code = 1;
  } else if (cmd == "exit") {
    if (w.size() > 1) {
      if (auto n = to_number(w[1])) out.exit_code = static_cast<int>(*n) & 0xff;
    }
  }
  return out;
}

}  // namespace detail

// Simulator semantics for a command line: "sleep N" runs N ticks,
// "exit N" / "false" end with that code, "sh -c '<cmd>'" is read through,
// the pilot agent placeholder runs until ended. Anything else succeeds
// after one tick.
inline SimOutcome simulate_command(const std::string& executable,
                                   const std::vector<std::string>& arguments) {
  auto name = detail::basename(executable);
  if ((name == "sh" || name == "bash") && arguments.size() >= 2 && arguments[0] == "-c") {
    auto w = detail::words(arguments[1]);
    return detail::simulate_words(w);
  }
  std::vector<std::string_view> w{executable};
  for (const auto& a : arguments) w.push_back(a);
  return detail::simulate_words(w);
}

}  // namespace pf
