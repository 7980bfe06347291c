#pragma once

// Independent reference implementations used by the unit and acceptance
// tests.

#include <functional>
#include <vector>

#include "pilotflow.hpp"

namespace oracle {

struct Free {
  int cores;
  int gpus;
};

// Tries every rank -> node assignment (nodes^ranks of them) and reports
// whether one fits the given free counters.
inline bool feasible(const std::vector<Free>& nodes, int ranks, int cores_per_rank, int gpus_per_rank) {
  if (nodes.empty()) return false;
  std::vector<int> choice(static_cast<std::size_t>(ranks), 0);
  while (true) {
    std::vector<Free> left = nodes;
    bool ok = true;
    for (int r = 0; r < ranks && ok; ++r) {
      auto& n = left[static_cast<std::size_t>(choice[static_cast<std::size_t>(r)])];
      n.cores -= cores_per_rank;
      n.gpus -= gpus_per_rank;
      ok = n.cores >= 0 && n.gpus >= 0;
    }
    if (ok) return true;
    int r = 0;
    while (r < ranks && ++choice[static_cast<std::size_t>(r)] == static_cast<int>(nodes.size())) {
      choice[static_cast<std::size_t>(r)] = 0;
      ++r;
    }
    if (r == ranks) return false;
  }
}

inline std::vector<Free> free_of(const pf::sched::NodeInventory& inv) {
  std::vector<Free> out;
  for (const auto& s : inv.nodes()) out.push_back({s.free_cores, s.free_gpus});
  return out;
}

inline std::vector<Free> totals_of(const pf::sched::NodeInventory& inv) {
  std::vector<Free> out;
  for (const auto& s : inv.nodes()) out.push_back({s.total_cores, s.total_gpus});
  return out;
}

// Runs one scheduler instance on a private simulation. Durations come from
// expected_duration_s (default 1); exit codes from the callback.
inline std::vector<pf::EventRecord> drive_instance(
    pf::sched::NodeInventory inventory, std::vector<pf::TaskDescription> tasks,
    std::function<int(const pf::TaskDescription&)> exit_code = [](const auto&) { return 0; }) {
  pf::sim::Simulation sim;
  std::vector<pf::EventRecord> log;
  pf::sched::SchedulerInstance inst("i0", std::move(inventory), [&](const pf::EventRecord& e) { log.push_back(e); });
  for (auto& t : tasks) inst.submit(std::move(t));
  std::function<void()> dispatch = [&] {
    for (auto& l : inst.schedule(sim.now())) {
      int code = exit_code(l.task);
      sim.schedule_in(l.task.expected_duration_s.value_or(1), l.task.uid, [&, uid = l.task.uid, code] {
        inst.finish(uid, code, sim.now());
        dispatch();
      });
    }
  };
  dispatch();
  sim.run();
  return log;
}

struct Interval {
  pf::Timestamp start = -1;
  pf::Timestamp end = -1;
};

inline std::map<std::string, Interval> intervals(const std::vector<pf::EventRecord>& log) {
  std::map<std::string, Interval> out;
  for (const auto& e : log) {
    if (!std::holds_alternative<pf::TaskState>(e.new_state)) continue;
    auto to = std::get<pf::TaskState>(e.new_state);
    if (to == pf::TaskState::EXECUTING) out[e.subject_id].start = e.timestamp;
    else if (std::get<pf::TaskState>(e.old_state) == pf::TaskState::EXECUTING && pf::is_terminal(to))
      out[e.subject_id].end = e.timestamp;
  }
  return out;
}

}  // namespace oracle
