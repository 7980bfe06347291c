#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pilotflow.hpp"

using namespace pf;
using namespace pf::lrm;

namespace {

ValidatedJobSpec shell(const std::string& command, std::int64_t walltime = 3600) {
  JobSpec s;
  s.executable = "sh";
  s.arguments = {"-c", command};
  s.walltime_s = walltime;
  return validate_job_spec(s);
}

ValidatedJobSpec nodes(int n, const std::string& command = "sleep 10") {
  JobSpec s;
  s.executable = "sh";
  s.arguments = {"-c", command};
  s.resources.node_count = n;
  s.resources.process_count = n;
  return validate_job_spec(s);
}

std::shared_ptr<SimBatchExecutor> sim_batch(int node_count = 4) {
  return std::make_shared<SimBatchExecutor>(std::make_shared<sim::Simulation>(),
                                            sim::ClusterConfig{"test", node_count, 8, 0});
}

void expect_handle_invariants(const JobHandle& h) {
  EXPECT_EQ(h.exit_code.has_value(), h.state == JobState::COMPLETED || h.state == JobState::FAILED);
  if (h.state == JobState::COMPLETED) {
    EXPECT_EQ(h.exit_code, 0);
  }
  EXPECT_EQ(h.end_time.has_value(), is_terminal(h.state));
}

}  // namespace

// The same scenarios run unchanged against both backends. Wait timeouts
// are generous in either unit.
class Backends : public ::testing::TestWithParam<std::string> {
 protected:
  void SetUp() override {
    if (GetParam() == "local") executor_ = std::make_shared<LocalExecutor>();
    else executor_ = sim_batch();
  }
  void TearDown() override {
    executor_->shutdown();
    EXPECT_TRUE(replay_events(executor_->events()).empty());
  }
  std::shared_ptr<Executor> executor_;
};

TEST_P(Backends, ZeroExitCompletes) {
  auto h = executor_->submit(shell("exit 0"));
  h = executor_->wait(h.job_id, 10'000);
  EXPECT_EQ(h.state, JobState::COMPLETED);
  EXPECT_EQ(h.exit_code, 0);
  expect_handle_invariants(h);
}

TEST_P(Backends, NonzeroExitFails) {
  auto h = executor_->wait(executor_->submit(shell("exit 3")).job_id, 10'000);
  EXPECT_EQ(h.state, JobState::FAILED);
  EXPECT_EQ(h.exit_code, 3);
  expect_handle_invariants(h);
}

TEST_P(Backends, CancelActiveJob) {
  auto h = executor_->submit(shell("sleep 3600"));
  if (auto* sim = executor_->simulation()) sim->advance();
  else
    for (int i = 0; i < 200 && executor_->status(h.job_id).state != JobState::ACTIVE; ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
  ASSERT_EQ(executor_->status(h.job_id).state, JobState::ACTIVE);
  EXPECT_EQ(executor_->cancel(h.job_id), CancelOutcome::CANCELED);
  auto after = executor_->status(h.job_id);
  EXPECT_EQ(after.state, JobState::CANCELED);
  EXPECT_TRUE(after.end_time.has_value());
  EXPECT_FALSE(after.exit_code.has_value());
  EXPECT_EQ(executor_->cancel(h.job_id), CancelOutcome::ALREADY_TERMINAL);
  EXPECT_EQ(executor_->status(h.job_id).state, JobState::CANCELED);
}

TEST_P(Backends, CancelCompletedIsAlreadyTerminal) {
  auto h = executor_->wait(executor_->submit(shell("exit 0")).job_id, 10'000);
  EXPECT_EQ(executor_->cancel(h.job_id), CancelOutcome::ALREADY_TERMINAL);
  EXPECT_EQ(executor_->status(h.job_id).state, JobState::COMPLETED);
}

TEST_P(Backends, UnknownJobIsNotFound) {
  EXPECT_THROW(executor_->status("nope"), NotFound);
  EXPECT_THROW(executor_->cancel("nope"), NotFound);
}

TEST_P(Backends, WaitOnTerminalReturnsImmediately) {
  auto h = executor_->wait(executor_->submit(shell("exit 0")).job_id, 10'000);
  auto again = executor_->wait(h.job_id, 0);
  EXPECT_EQ(again.state, JobState::COMPLETED);
}

TEST_P(Backends, ListenersSeeEveryTransitionInOrder) {
  std::mutex m;
  std::vector<EventRecord> seen;
  executor_->subscribe([&](const EventRecord& e) {
    std::lock_guard lock(m);
    seen.push_back(e);
  });
  auto h = executor_->wait(executor_->submit(shell("exit 0")).job_id, 10'000);
  std::lock_guard lock(m);
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_EQ(seen[0].new_state, AnyState{JobState::QUEUED});
  EXPECT_EQ(seen[1].new_state, AnyState{JobState::ACTIVE});
  EXPECT_EQ(seen[2].new_state, AnyState{JobState::COMPLETED});
  EXPECT_EQ(seen[2].get("exit_code"), "0");
  EXPECT_EQ(h.job_id, seen[0].subject_id);
}

INSTANTIATE_TEST_SUITE_P(Lrm, Backends, ::testing::Values("local", "sim-batch"));

TEST(SimBatch, StatusAfterSubmitIsQueued) {
  auto ex = sim_batch();
  auto h = ex->submit(shell("exit 0"));
  EXPECT_EQ(ex->status(h.job_id).state, JobState::QUEUED);
  EXPECT_EQ(h.state, JobState::QUEUED);
}

TEST(SimBatch, ExceedsClusterSize) {
  auto ex = sim_batch(4);
  try {
    ex->submit(nodes(8));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.errors()[0].reason, "exceeds cluster size");
  }
}

TEST(SimBatch, WaitTimesOutAfterTicks) {
  auto ex = sim_batch();
  JobSpec s;
  s.executable = "sleep";
  s.arguments = {"60"};
  auto h = ex->submit(validate_job_spec(s));
  EXPECT_THROW(ex->wait(h.job_id, 1), Timeout);
  EXPECT_EQ(ex->simulation()->now(), 1);
  EXPECT_EQ(ex->wait(h.job_id, 100).state, JobState::COMPLETED);
  EXPECT_EQ(ex->status(h.job_id).end_time, 60);
}

TEST(SimBatch, CancelQueuedNeverActivates) {
  auto ex = sim_batch(1);
  auto a = ex->submit(nodes(1));
  auto b = ex->submit(nodes(1));
  ex->simulation()->advance();
  ASSERT_EQ(ex->status(b.job_id).state, JobState::QUEUED);
  ex->cancel(b.job_id);
  ex->simulation()->run();
  for (const auto& e : ex->events()) {
    if (e.subject_id == b.job_id) {
      EXPECT_NE(e.new_state, AnyState{JobState::ACTIVE});
    }
  }
  EXPECT_EQ(ex->status(a.job_id).state, JobState::COMPLETED);
}

TEST(SimBatch, WalltimeKillsWithDetail) {
  auto ex = sim_batch();
  auto h = ex->wait(ex->submit(shell("sleep 100", 30)).job_id, 1000);
  EXPECT_EQ(h.state, JobState::FAILED);
  EXPECT_EQ(h.detail, "walltime");
  EXPECT_EQ(h.exit_code, kWalltimeExitCode);
  EXPECT_EQ(*h.end_time - *h.start_time, 30);
}

TEST(SimBatch, FifoNeverInvertsIdenticalJobs) {
  auto ex = sim_batch(3);
  std::vector<std::string> ids;
  for (int i = 0; i < 12; ++i) ids.push_back(ex->submit(nodes(2, "sleep 5")).job_id);
  ex->simulation()->run();
  for (std::size_t i = 1; i < ids.size(); ++i)
    EXPECT_LE(*ex->status(ids[i - 1]).start_time, *ex->status(ids[i]).start_time);
  EXPECT_TRUE(replay_events(ex->events()).empty());
}

TEST(SimBatch, NodeConservationAtEveryTick) {
  auto ex = sim_batch(5);
  for (int i = 0; i < 20; ++i) ex->submit(nodes(1 + i % 3, "sleep " + std::to_string(1 + i % 4)));
  auto* sim = ex->simulation();
  while (!sim->idle()) {
    sim->advance();
    EXPECT_EQ(ex->free_nodes() + ex->busy_nodes(), 5);
  }
}

TEST(SimBatch, FinishEndsAgentJob) {
  auto ex = sim_batch();
  JobSpec s;
  s.executable = std::string(kAgentExecutable);
  auto h = ex->submit(validate_job_spec(s));
  ex->simulation()->advance();
  EXPECT_EQ(ex->status(h.job_id).state, JobState::ACTIVE);
  EXPECT_EQ(ex->status(h.job_id).nodes.size(), 1u);
  ex->finish(h.job_id, 0);
  EXPECT_EQ(ex->status(h.job_id).state, JobState::COMPLETED);
}

TEST(SimBatch, ReservedCoresShrinkNodes) {
  SimBatchExecutor::Options o;
  o.reserved_cores_per_node = 8;
  auto ex = std::make_shared<SimBatchExecutor>(std::make_shared<sim::Simulation>(),
                                               sim::ClusterConfig{"r", 2, 56, 8}, o);
  EXPECT_EQ(ex->schedulable_cores_per_node(), 48);
  auto h = ex->submit(nodes(2));
  ex->simulation()->advance();
  auto granted = ex->status(h.job_id).nodes;
  ASSERT_EQ(granted.size(), 2u);
  EXPECT_EQ(granted[0], (AllocatedNode{"n00000", 48, 8}));
  o.reserved_cores_per_node = 56;
  EXPECT_THROW(SimBatchExecutor(std::make_shared<sim::Simulation>(), sim::ClusterConfig{"r", 2, 56, 8}, o),
               ValidationError);
}

TEST(SimBatch, RendersScriptWhenDialectConfigured) {
  SimBatchExecutor::Options o;
  o.dialect = find_dialect("slurm-like");
  SimBatchExecutor ex(std::make_shared<sim::Simulation>(), sim::ClusterConfig{"r", 2, 8, 0}, o);
  auto h = ex.submit(shell("exit 0"));
  auto script = ex.script(h.job_id);
  ASSERT_TRUE(script);
  EXPECT_NE(script->find("#SBATCH --ntasks=1"), std::string::npos);
}

TEST(Local, RejectsMultiNode) {
  LocalExecutor ex;
  EXPECT_THROW(ex.submit(nodes(2)), ValidationError);
}

TEST(Local, WalltimeWatchdog) {
  LocalExecutor ex;
  auto h = ex.wait(ex.submit(shell("sleep 30", 1)).job_id, 10'000);
  EXPECT_EQ(h.state, JobState::FAILED);
  EXPECT_EQ(h.detail, "walltime");
  EXPECT_EQ(h.exit_code, kWalltimeExitCode);
}

TEST(Local, SpawnFailureFailsJob) {
  LocalExecutor ex;
  JobSpec s;
  s.executable = "/nonexistent/binary";
  auto h = ex.wait(ex.submit(validate_job_spec(s)).job_id, 10'000);
  EXPECT_EQ(h.state, JobState::FAILED);
  EXPECT_EQ(h.exit_code, 127);
}

TEST(Local, RedirectsOutputAndEnvironment) {
  auto dir = std::filesystem::temp_directory_path() / "pf_lrm_local";
  std::filesystem::create_directories(dir);
  JobSpec s;
  s.executable = "sh";
  s.arguments = {"-c", "echo $GREETING; pwd"};
  s.environment = {{"GREETING", "hello"}};
  s.directory = dir.string();
  s.stdout_path = (dir / "out.txt").string();
  LocalExecutor ex;
  auto h = ex.wait(ex.submit(validate_job_spec(s)).job_id, 10'000);
  EXPECT_EQ(h.state, JobState::COMPLETED);
  std::ifstream in(dir / "out.txt");
  std::string line1, line2;
  std::getline(in, line1);
  std::getline(in, line2);
  EXPECT_EQ(line1, "hello");
  EXPECT_EQ(std::filesystem::path(line2), std::filesystem::canonical(dir));
}

TEST(Local, FinishCompletesRunningJob) {
  LocalExecutor ex;
  auto h = ex.submit(shell("sleep 3600"));
  for (int i = 0; i < 200 && ex.status(h.job_id).state != JobState::ACTIVE; ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  ex.finish(h.job_id, 0);
  auto after = ex.status(h.job_id);
  EXPECT_EQ(after.state, JobState::COMPLETED);
  EXPECT_EQ(after.exit_code, 0);
}

TEST(Local, ConcurrentSubmittersAndCancellers) {
  LocalExecutor ex;
  std::vector<std::thread> threads;
  std::mutex m;
  std::vector<std::string> ids;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 5; ++i) {
        auto h = ex.submit(shell("sleep 3600"));
        ex.cancel(h.job_id);
        std::lock_guard lock(m);
        ids.push_back(h.job_id);
      }
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& id : ids) EXPECT_EQ(ex.status(id).state, JobState::CANCELED);
  ex.shutdown();
  EXPECT_TRUE(replay_events(ex.events()).empty());
}

TEST(Registry, LookupByName) {
  ExecutorRegistry reg;
  reg.add(sim_batch());
  EXPECT_NE(reg.get("sim-batch"), nullptr);
  EXPECT_EQ(reg.names(), std::vector<std::string>{"sim-batch"});
}
