#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pilotflow.hpp"

using namespace pf;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = PF_FIXTURES_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ValidatedJobSpec fixture_spec(const std::string& name) {
  return validate_job_spec(job_spec_from_json(load_json_file(kFixtures / (name + ".json"))));
}

JobSpec eight_ranks() {
  JobSpec s;
  s.executable = "swift-t";
  s.arguments = {"workflow.swift"};
  s.directory = "/scratch/run";
  s.resources.process_count = 8;
  s.walltime_s = 3600;
  return s;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

class Golden : public ::testing::TestWithParam<std::tuple<std::string, std::string>> {};

TEST_P(Golden, MatchesFrozenFixture) {
  auto [name, dialect] = GetParam();
  auto rendered = render_submit_script(*find_dialect(dialect), fixture_spec(name));
  EXPECT_EQ(rendered, slurp(kFixtures / (name + "." + dialect + ".sh")));
}

INSTANTIATE_TEST_SUITE_P(
    Fixtures, Golden,
    ::testing::Combine(::testing::Values("eight_ranks", "debug_queue", "gpu_training", "environment",
                                         "long_walltime"),
                       ::testing::Values("slurm-like", "pbs-like")),
    [](const auto& info) {
      auto name = std::get<0>(info.param) + "_" + std::get<1>(info.param);
      std::replace(name.begin(), name.end(), '-', '_');
      return name;
    });

TEST(Render, EightRanksOneHour) {
  auto script = render_submit_script(*find_dialect("slurm-like"), validate_job_spec(eight_ranks()));
  EXPECT_NE(script.find("\nsrun -n 8 swift-t workflow.swift\n"), std::string::npos);
  EXPECT_NE(script.find("#SBATCH --time=01:00:00\n"), std::string::npos);
}

TEST(Render, Deterministic) {
  auto tpl = *find_dialect("pbs-like");
  auto spec = validate_job_spec(eight_ranks());
  EXPECT_EQ(render_submit_script(tpl, spec), render_submit_script(tpl, spec));
}

TEST(Render, QueueDirectiveExactlyOnce) {
  auto s = eight_ranks();
  s.queue = "debug";
  auto script = render_submit_script(*find_dialect("pbs-like"), validate_job_spec(s));
  EXPECT_EQ(count(script, "#PBS -q debug\n"), 1u);
}

TEST(Render, UnsupportedFieldRejected) {
  auto s = eight_ranks();
  s.resources.node_count = 2;
  s.resources.processes_per_node = 4;
  auto v = validate_job_spec(s);
  EXPECT_THROW(render_submit_script(*find_dialect("pbs-like"), v), TemplateError);
  EXPECT_NO_THROW(render_submit_script(*find_dialect("slurm-like"), v));
}

TEST(Render, EnvironmentKeysMustBeIdentifiers) {
  auto s = eight_ranks();
  s.environment["BAD-KEY"] = "x";
  EXPECT_THROW(render_submit_script(*find_dialect("slurm-like"), validate_job_spec(s)), TemplateError);
}

TEST(Render, LfEndingsOnly) {
  auto script = render_submit_script(*find_dialect("slurm-like"), fixture_spec("environment"));
  EXPECT_EQ(script.find('\r'), std::string::npos);
  EXPECT_EQ(script.back(), '\n');
}

TEST(Templates, DialectsAreData) {
  EXPECT_EQ(dialect_names(), (std::vector<std::string>{"pbs-like", "slurm-like"}));
  EXPECT_FALSE(find_dialect("xyz"));
  auto custom = template_from_json(Json::parse(R"({
    "dialect": "tiny", "directive_prefix": "#X",
    "directives": [
      {"field": "node_count", "format": "N={value}"},
      {"field": "process_count", "format": "P={value}"},
      {"field": "walltime", "format": "T={value}"},
      {"field": "queue", "unsupported": true},
      {"field": "project", "unsupported": true},
      {"field": "stdout_path", "unsupported": true},
      {"field": "stderr_path", "unsupported": true}
    ],
    "launch_line": "run {ranks} {command}"})"));
  auto s = eight_ranks();
  s.directory.clear();
  auto text = render_submit_script(custom, validate_job_spec(s));
  EXPECT_NE(text.find("#X P=8\n#X T=01:00:00\n\nrun 8 swift-t workflow.swift\n"), std::string::npos);
}

TEST(Templates, IncompleteTemplateRejected) {
  EXPECT_THROW(template_from_json(Json::parse(R"({"dialect": "x", "directives": [],
                                                  "launch_line": "run {ranks}"})")),
               TemplateError);
  EXPECT_THROW(template_from_json(Json::parse(R"({"dialect": "x", "directives": [
                                                  {"field": "colour", "format": "c"}],
                                                  "launch_line": "run {ranks}"})")),
               TemplateError);
}

TEST(Helpers, WalltimeAndQuoting) {
  EXPECT_EQ(format_walltime(59), "00:00:59");
  EXPECT_EQ(format_walltime(3600), "01:00:00");
  EXPECT_EQ(format_walltime(360000), "100:00:00");
  EXPECT_EQ(shell_quote("plain-word_1.txt"), "plain-word_1.txt");
  EXPECT_EQ(shell_quote("a b"), "'a b'");
  EXPECT_EQ(shell_quote("it's"), "'it'\\''s'");
  EXPECT_EQ(shell_quote(""), "''");
}
