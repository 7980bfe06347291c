#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pilotflow.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = PF_FIXTURES_DIR;

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run_cli(const std::string& args) {
  std::string command = std::string(PF_CLI_PATH) + " " + args + " 2>&1";
  Outcome out;
  FILE* pipe = popen(command.c_str(), "r");
  if (!pipe) return out;
  char buf[4096];
  while (auto n = fread(buf, 1, sizeof buf, pipe)) out.output.append(buf, n);
  int status = pclose(pipe);
  out.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pilotflow-cli-" + std::to_string(::getpid()) + "-" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write("local.json", R"({"name": "laptop", "backend": "local"})");
    write("sim.json", R"({"name": "toy", "backend": "sim-batch",
      "cluster": {"name": "toy", "node_count": 2, "cores_per_node": 4, "gpus_per_node": 0}})");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name, std::ios::binary) << text;
    return (dir_ / name).string();
  }

  std::string chain() {
    return write("chain.json", R"([
      {"uid": "a", "payload": {"executable": "sh", "arguments": ["-c", "exit 0"]}},
      {"uid": "b", "payload": {"executable": "sh", "arguments": ["-c", "exit 0"]}, "depends_on": ["a"]},
      {"uid": "c", "payload": {"executable": "sh", "arguments": ["-c", "exit 0"]}, "depends_on": ["b"]}
    ])");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, ValidateCountsNodesAndEdges) {
  auto r = run_cli("validate " + chain());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output, "3 nodes, 2 edges\n");
}

TEST_F(Cli, ValidateRejectsCycle) {
  auto wf = write("cycle.json", R"([
    {"uid": "A", "payload": {"executable": "true"}, "depends_on": ["B"]},
    {"uid": "B", "payload": {"executable": "true"}, "depends_on": ["A"]}])");
  auto r = run_cli("validate " + wf);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("A -> B -> A"), std::string::npos) << r.output;
}

TEST_F(Cli, ValidateMissingFileIsUsageError) {
  EXPECT_EQ(run_cli("validate " + (dir_ / "absent.json").string()).code, 1);
  EXPECT_EQ(run_cli("validate " + write("bad.json", "{not json")).code, 1);
  EXPECT_EQ(run_cli("").code, 1);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST_F(Cli, RenderEightRanks) {
  auto r = run_cli("render " + (kFixtures / "eight_ranks.json").string() + " --dialect slurm-like");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.output, slurp(kFixtures / "eight_ranks.slurm-like.sh"));
  auto again = run_cli("render " + (kFixtures / "eight_ranks.json").string() + " -m slurm-like");
  EXPECT_EQ(again.output, r.output);
}

TEST_F(Cli, RenderUnknownDialectListsAvailable) {
  auto r = run_cli("render " + (kFixtures / "eight_ranks.json").string() + " --dialect xyz");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("pbs-like, slurm-like"), std::string::npos) << r.output;
}

TEST_F(Cli, RenderInvalidSpecIsValidationError) {
  auto spec = write("bad_spec.json", R"({"executable": "", "walltime_s": 60})");
  EXPECT_EQ(run_cli("render " + spec + " --dialect pbs-like").code, 2);
}

TEST_F(Cli, SubmitOnSimulatedCluster) {
  auto ok = write("ok.json", R"({"executable": "sleep", "arguments": ["5"]})");
  auto bad = write("bad.json", R"({"executable": "false"})");
  auto sim = (dir_ / "sim.json").string();
  auto r = run_cli("submit " + ok + " --platform " + sim);
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("COMPLETED exit=0"), std::string::npos);
  EXPECT_EQ(run_cli("submit " + bad + " --platform " + sim).code, 3);
}

TEST_F(Cli, RunLocalWorkflowSucceeds) {
  auto r = run_cli("run " + chain() + " --platform " + (dir_ / "local.json").string() +
                   " --run-id r1 --out " + dir_.string());
  EXPECT_EQ(r.code, 0) << r.output;
  for (auto f : {"results.json", "events.jsonl", "utilization.csv"})
    EXPECT_TRUE(fs::exists(dir_ / "r1" / f)) << f;
  auto results = pf::load_json_file(dir_ / "r1" / "results.json");
  EXPECT_EQ(results["c"]["status"], "DONE");
  std::ifstream events(dir_ / "r1" / "events.jsonl");
  EXPECT_TRUE(pf::replay_events(pf::read_event_log(events)).empty());
}

TEST_F(Cli, RunWithFailingBranchReportsTaskFailure) {
  auto wf = write("fail.json", R"([
    {"uid": "a", "payload": {"executable": "sh", "arguments": ["-c", "exit 0"]}},
    {"uid": "b", "payload": {"executable": "sh", "arguments": ["-c", "exit 1"]}, "depends_on": ["a"]},
    {"uid": "c", "payload": {"executable": "sh", "arguments": ["-c", "exit 0"]}, "depends_on": ["b"]},
    {"uid": "d", "payload": {"executable": "sh", "arguments": ["-c", "exit 0"]}, "depends_on": ["a"]}])");
  auto r = run_cli("run " + wf + " --platform " + (dir_ / "local.json").string() + " --run-id r2 --out " +
                   dir_.string());
  EXPECT_EQ(r.code, 3) << r.output;
  auto results = pf::load_json_file(dir_ / "r2" / "results.json");
  EXPECT_EQ(results["c"]["error"], "dependency failed");
  EXPECT_EQ(results["d"]["status"], "DONE");
}

TEST_F(Cli, RunTooManyInstancesIsValidationError) {
  auto r = run_cli("run " + chain() + " --platform " + (dir_ / "sim.json").string() +
                   " -k 3 --run-id r3 --out " + dir_.string());
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(Cli, SimulatedRunsAreReproducible) {
  auto wf = (dir_ / "bag.json").string();
  ASSERT_EQ(run_cli("generate --count 40 --duration 7 --cores 2 --out " + wf).code, 0);
  auto sim = (dir_ / "sim.json").string();
  for (auto id : {"x", "y"}) {
    auto r = run_cli("run " + wf + " --platform " + sim + " -k 2 --seed 5 --run-id " + id + " --out " +
                     dir_.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("utilization: cores 1.0000"), std::string::npos) << r.output;
  }
  EXPECT_EQ(slurp(dir_ / "x" / "events.jsonl"), slurp(dir_ / "y" / "events.jsonl"));
  EXPECT_EQ(slurp(dir_ / "x" / "utilization.csv"), slurp(dir_ / "y" / "utilization.csv"));
}

TEST_F(Cli, WalltimeExpiryIsPilotFailure) {
  auto wf = (dir_ / "long.json").string();
  ASSERT_EQ(run_cli("generate --count 4 --duration 100 --out " + wf).code, 0);
  auto r = run_cli("run " + wf + " --platform " + (dir_ / "sim.json").string() +
                   " --walltime 50 --run-id w --out " + dir_.string());
  EXPECT_EQ(r.code, 4) << r.output;
  EXPECT_NE(r.output.find("walltime"), std::string::npos);
}
