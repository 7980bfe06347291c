#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "pilotflow.hpp"

using namespace pf;

namespace {

// Edge lists written out independently of the switch tables.
const std::set<std::pair<JobState, JobState>> kJobEdges = {
    {JobState::NEW, JobState::QUEUED},         {JobState::QUEUED, JobState::ACTIVE},
    {JobState::QUEUED, JobState::CANCELED},    {JobState::QUEUED, JobState::FAILED},
    {JobState::ACTIVE, JobState::COMPLETED},   {JobState::ACTIVE, JobState::FAILED},
    {JobState::ACTIVE, JobState::CANCELED}};

const std::set<std::pair<TaskState, TaskState>> kTaskEdges = {
    {TaskState::NEW, TaskState::SCHEDULING},      {TaskState::SCHEDULING, TaskState::EXECUTING},
    {TaskState::SCHEDULING, TaskState::CANCELED}, {TaskState::SCHEDULING, TaskState::FAILED},
    {TaskState::EXECUTING, TaskState::DONE},      {TaskState::EXECUTING, TaskState::FAILED},
    {TaskState::EXECUTING, TaskState::CANCELED}};

constexpr JobState kJobStates[] = {JobState::NEW,       JobState::QUEUED, JobState::ACTIVE,
                                   JobState::COMPLETED, JobState::FAILED, JobState::CANCELED};
constexpr TaskState kTaskStates[] = {TaskState::NEW,  TaskState::SCHEDULING, TaskState::EXECUTING,
                                     TaskState::DONE, TaskState::FAILED,     TaskState::CANCELED};

JobSpec minimal(std::string exe = "/bin/date") {
  JobSpec s;
  s.executable = std::move(exe);
  return s;
}

}  // namespace

TEST(StateMachine, JobEdgesMatchTable) {
  for (auto a : kJobStates)
    for (auto b : kJobStates) EXPECT_EQ(is_legal(a, b), kJobEdges.count({a, b}) == 1);
}

TEST(StateMachine, TaskEdgesMatchTable) {
  for (auto a : kTaskStates)
    for (auto b : kTaskStates) EXPECT_EQ(is_legal(a, b), kTaskEdges.count({a, b}) == 1);
}

TEST(StateMachine, TerminalStatesHaveNoExits) {
  for (auto a : kJobStates) {
    if (!is_terminal(a)) continue;
    for (auto b : kJobStates) EXPECT_FALSE(is_legal(a, b));
  }
  for (auto a : kTaskStates) {
    if (!is_terminal(a)) continue;
    for (auto b : kTaskStates) EXPECT_FALSE(is_legal(a, b));
  }
}

TEST(StateMachine, TransitionExamples) {
  EXPECT_NO_THROW(transition(JobState::QUEUED, JobState::ACTIVE));
  EXPECT_THROW(transition(JobState::COMPLETED, JobState::ACTIVE), IllegalTransition);
  EXPECT_NO_THROW(transition(TaskState::EXECUTING, TaskState::DONE));
  try {
    transition(JobState::COMPLETED, JobState::ACTIVE);
  } catch (const IllegalTransition& e) {
    EXPECT_EQ(e.from(), "COMPLETED");
    EXPECT_EQ(e.to(), "ACTIVE");
  }
}

TEST(StateMachine, ParseRoundTrip) {
  for (auto s : kJobStates) EXPECT_EQ(parse_state<JobState>(to_string(s)), s);
  for (auto s : kTaskStates) EXPECT_EQ(parse_state<TaskState>(to_string(s)), s);
  EXPECT_FALSE(parse_state<JobState>("RUNNING"));
}

TEST(ValidateJobSpec, MinimalSpecGetsDefaults) {
  auto v = validate_job_spec(minimal());
  EXPECT_EQ(v.resources().process_count, 1);
  EXPECT_EQ(v.resources().cores_per_process, 1);
  EXPECT_EQ(v.resources().gpus_per_process, 0);
  EXPECT_FALSE(v->directory.empty());
}

TEST(ValidateJobSpec, EmptyExecutableRejected) {
  auto s = minimal("");
  s.walltime_s = 60;
  try {
    validate_job_spec(s);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    ASSERT_EQ(e.errors().size(), 1u);
    EXPECT_EQ(e.errors()[0], (FieldError{"executable", "empty"}));
  }
}

TEST(ValidateJobSpec, NodeTimesPpnConsistency) {
  auto s = minimal();
  s.resources.node_count = 2;
  s.resources.processes_per_node = 4;
  s.resources.process_count = 8;
  EXPECT_NO_THROW(validate_job_spec(s));
  s.resources.process_count = 7;
  try {
    validate_job_spec(s);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.errors()[0], (FieldError{"process_count", "inconsistent"}));
  }
}

TEST(ValidateJobSpec, ReportsEveryViolation) {
  JobSpec s;
  s.walltime_s = 0;
  s.resources.cores_per_process = 0;
  try {
    validate_job_spec(s);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_TRUE(e.names("executable"));
    EXPECT_TRUE(e.names("walltime_s"));
    EXPECT_TRUE(e.names("cores_per_process"));
  }
}

TEST(ValidateJobSpec, Idempotent) {
  auto s = minimal();
  s.resources.process_count = 4;
  s.environment["A"] = "1";
  auto once = validate_job_spec(s);
  auto twice = validate_job_spec(once.spec());
  EXPECT_EQ(once, twice);
}

TEST(ValidateJobSpec, RandomSpecsValidateOrNameAField) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> small(-2, 6);
  std::bernoulli_distribution coin(0.2);
  for (int i = 0; i < 5000; ++i) {
    JobSpec s;
    s.executable = coin(rng) ? "" : "/bin/true";
    s.walltime_s = small(rng);
    s.resources = {small(rng), small(rng), small(rng), small(rng), small(rng)};
    try {
      validate_job_spec(s);
    } catch (const ValidationError& e) {
      ASSERT_FALSE(e.errors().empty());
      for (const auto& f : e.errors()) EXPECT_FALSE(f.field.empty());
    }
  }
}

TEST(TaskDescription, ValidationAndUids) {
  TaskDescription t{"a", TaskKind::EXECUTABLE, {"/bin/true", {}}};
  EXPECT_NO_THROW(validate_task(t));
  t.ranks = 0;
  EXPECT_THROW(validate_task(t), ValidationError);
  UidRegistry reg;
  reg.claim("a");
  EXPECT_THROW(reg.claim("a"), ValidationError);
  EXPECT_TRUE(reg.contains("a"));
}

TEST(Replay, AcceptsLegalPaths) {
  std::vector<EventRecord> log = {
      {0, "j", JobState::NEW, JobState::QUEUED, {}},
      {0, "t", TaskState::NEW, TaskState::SCHEDULING, {}},
      {1, "j", JobState::QUEUED, JobState::ACTIVE, {}},
      {2, "t", TaskState::SCHEDULING, TaskState::EXECUTING, {}},
      {3, "t", TaskState::EXECUTING, TaskState::DONE, {}},
      {3, "j", JobState::ACTIVE, JobState::COMPLETED, {}},
  };
  EXPECT_TRUE(replay_events(log).empty());
}

TEST(Replay, FlagsEachKindOfViolation) {
  std::vector<EventRecord> log = {
      {0, "a", JobState::NEW, JobState::ACTIVE, {}},                 // illegal edge
      {5, "b", TaskState::NEW, TaskState::SCHEDULING, {}},
      {4, "b", TaskState::SCHEDULING, TaskState::EXECUTING, {}},    // time regressed
      {6, "b", TaskState::SCHEDULING, TaskState::CANCELED, {}},     // discontinuous
      {7, "c", TaskState::EXECUTING, TaskState::DONE, {}},          // not from NEW
      {8, "c", TaskState::DONE, TaskState::FAILED, {}},             // after terminal
  };
  auto v = replay_events(log);
  std::set<std::size_t> flagged;
  for (const auto& x : v) flagged.insert(x.index);
  EXPECT_EQ(flagged, (std::set<std::size_t>{0, 2, 3, 4, 5}));
  EXPECT_TRUE(replay_events(std::span(log).subspan(4, 1), false).empty());
}

TEST(Serialize, JobSpecRoundTrip) {
  auto s = minimal("/bin/echo");
  s.arguments = {"a b", "c"};
  s.environment = {{"X", "1"}};
  s.directory = "/tmp";
  s.stdout_path = "out.txt";
  s.resources = {2, 8, 4, 2, 1};
  s.walltime_s = 90;
  s.queue = "debug";
  EXPECT_EQ(job_spec_from_json(to_json(s)), s);
}

TEST(Serialize, UnknownFieldsRejected) {
  auto j = to_json(minimal());
  j["colour"] = "red";
  EXPECT_THROW(job_spec_from_json(j), FormatError);
}

TEST(Serialize, TaskRoundTrip) {
  TaskDescription t{"x", TaskKind::FUNCTION, {"square", {"3"}}, 2, 4, 1, 30};
  EXPECT_EQ(task_from_json(to_json(t)), t);
}

TEST(Serialize, EventLogRoundTripWithStableFieldOrder) {
  std::vector<EventRecord> log = {
      {1, "j", JobState::NEW, JobState::QUEUED, {{"k", "v"}}},
      {2, "t", TaskState::EXECUTING, TaskState::DONE, {{"exit_code", "0"}}},
  };
  std::stringstream ss;
  write_event_log(ss, log);
  auto first = ss.str().substr(0, ss.str().find('\n'));
  EXPECT_EQ(first,
            R"({"timestamp":1,"subject_id":"j","kind":"job","old_state":"NEW","new_state":"QUEUED","detail":{"k":"v"}})");
  EXPECT_EQ(read_event_log(ss), log);
}
