// pilotflow: validate and run workflows, render and submit batch jobs.
//
// Exit codes: 0 success, 1 usage or I/O, 2 validation, 3 task failures,
// 4 pilot or bootstrap failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "pilotflow.hpp"

namespace fs = std::filesystem;
using namespace pf;

namespace {

enum Exit : int { OK = 0, USAGE = 1, INVALID = 2, TASKS_FAILED = 3, PILOT_FAILED = 4 };

struct Failure {
  int code;
  std::string message;
};

Json read_document(const std::string& path) {
  try {
    return load_json_file(path);
  } catch (const std::exception& ex) {
    throw Failure{USAGE, ex.what()};
  }
}

dataflow::WorkflowGraph load_workflow(const std::string& path) {
  auto doc = read_document(path);
  dataflow::WorkflowGraph graph;
  try {
    graph = dataflow::workflow_from_json(doc);
  } catch (const FormatError& ex) {
    throw Failure{USAGE, path + ": " + ex.what()};
  } catch (const ValidationError& ex) {
    throw Failure{INVALID, path + ": " + ex.what()};
  }
  try {
    dataflow::validate_graph(graph);
    for (const auto& [uid, node] : graph.nodes()) dataflow::translate_task(node);
  } catch (const std::exception& ex) {
    throw Failure{INVALID, ex.what()};
  }
  return graph;
}

PlatformConfig load_platform(const std::string& path) {
  auto doc = read_document(path);
  try {
    return platform_from_json(doc);
  } catch (const FormatError& ex) {
    throw Failure{USAGE, path + ": " + ex.what()};
  } catch (const ValidationError& ex) {
    throw Failure{INVALID, path + ": " + ex.what()};
  }
}

ValidatedJobSpec load_job_spec(const std::string& path) {
  auto doc = read_document(path);
  try {
    return validate_job_spec(job_spec_from_json(doc));
  } catch (const FormatError& ex) {
    throw Failure{INVALID, path + ": " + ex.what()};
  } catch (const ValidationError& ex) {
    throw Failure{INVALID, path + ": " + ex.what()};
  }
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Failure{USAGE, "cannot write " + path.string()};
  return out;
}

std::string dialect_list() {
  std::string out;
  for (const auto& d : dialect_names()) out += (out.empty() ? "" : ", ") + d;
  return out;
}

// ---------------------------------------------------------------------------

int cmd_validate(const std::string& workflow) {
  auto graph = load_workflow(workflow);
  std::cout << graph.size() << " nodes, " << graph.edge_count() << " edges\n";
  return OK;
}

int cmd_render(const std::string& spec_path, const std::string& dialect) {
  auto tpl = find_dialect(dialect);
  if (!tpl) throw Failure{USAGE, "unknown dialect '" + dialect + "'; available: " + dialect_list()};
  auto spec = load_job_spec(spec_path);
  try {
    std::cout << render_submit_script(*tpl, spec);
  } catch (const TemplateError& ex) {
    throw Failure{INVALID, ex.what()};
  }
  return OK;
}

int cmd_submit(const std::string& spec_path, const std::string& platform_path, std::int64_t timeout) {
  auto platform = load_platform(platform_path);
  auto spec = load_job_spec(spec_path);
  auto executor = make_executor(platform);
  std::optional<lrm::JobHandle> submitted;
  try {
    submitted = executor->submit(spec);
  } catch (const ValidationError& ex) {
    throw Failure{INVALID, ex.what()};
  } catch (const lrm::SubmissionError& ex) {
    throw Failure{USAGE, ex.what()};
  }
  lrm::JobHandle h = *submitted;
  try {
    h = executor->wait(h.job_id, timeout);
  } catch (const lrm::Timeout&) {
    executor->cancel(h.job_id);
    h = executor->status(h.job_id);
  }
  executor->shutdown();
  std::cout << h.job_id << ' ' << to_string(h.state);
  if (h.exit_code) std::cout << " exit=" << *h.exit_code;
  if (!h.detail.empty()) std::cout << " (" << h.detail << ')';
  std::cout << '\n';
  return h.state == JobState::COMPLETED ? OK : TASKS_FAILED;
}

struct RunOptions {
  std::string workflow;
  std::string platform;
  int nodes = 0;
  int instances = 1;
  std::int64_t walltime = 3600;
  std::string run_id;
  std::string out = "runs";
  std::uint64_t seed = 0;
  std::string policy = "round-robin";
  std::optional<std::string> queue;
  std::optional<std::string> project;
};

int cmd_run(const RunOptions& o) {
  auto graph = load_workflow(o.workflow);
  auto platform = load_platform(o.platform);

  pilot::PilotDescription desc;
  desc.platform = platform.name;
  desc.resources.node_count = o.nodes > 0 ? o.nodes
                              : platform.backend == "sim-batch" ? platform.cluster.node_count
                                                                : 1;
  desc.resources.process_count = desc.resources.node_count;
  desc.walltime_s = o.walltime;
  desc.instance_count = o.instances;
  desc.queue = o.queue;
  desc.project = o.project;

  pilot::AgentOptions agent;
  try {
    agent.balance = pilot::make_balance_policy(o.policy);
    pilot::validate(desc);
  } catch (const std::exception& ex) {
    throw Failure{INVALID, ex.what()};
  }

  auto executor = make_executor(platform, o.seed);
  const bool simulated = executor->simulation() != nullptr;
  std::shared_ptr<pilot::Pilot> pilot;
  try {
    pilot = pilot::Pilot::submit(desc, executor, agent);
  } catch (const ValidationError& ex) {
    throw Failure{INVALID, ex.what()};
  } catch (const lrm::SubmissionError& ex) {
    throw Failure{PILOT_FAILED, ex.what()};
  }

  std::map<std::string, dataflow::NodeResult> results;
  try {
    const std::int64_t ready_timeout = simulated ? std::numeric_limits<std::int32_t>::max() : 60'000;
    dataflow::PilotTaskExecutor tasks(pilot, ready_timeout);
    dataflow::DataflowKernel kernel(tasks);
    results = kernel.run(graph);
  } catch (const pilot::BootstrapError& ex) {
    pilot->shutdown(0);
    throw Failure{PILOT_FAILED, ex.what()};
  } catch (const dataflow::ExecutorUnavailable& ex) {
    pilot->shutdown(0);
    throw Failure{PILOT_FAILED, ex.what()};
  }
  pilot->shutdown(0);
  executor->shutdown();

  const auto pilot_state = pilot->state();
  auto events = pilot->events();
  fs::path dir = fs::path(o.out) / o.run_id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{USAGE, "cannot create " + dir.string() + ": " + ec.message()};
  {
    auto out = open_output(dir / "results.json");
    out << dataflow::to_json(results).dump(2) << '\n';
  }
  {
    auto out = open_output(dir / "events.jsonl");
    write_event_log(out, events);
  }

  // Utilization over the pilot's allocation; reserved cores are not part of
  // the capacity.
  std::stable_sort(events.begin(), events.end(),
                   [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  sim::ClusterConfig allocation;
  allocation.name = platform.name;
  allocation.node_count = 0;
  allocation.cores_per_node = 0;
  for (const auto& subset : pilot->subsets()) {
    for (const auto& node : subset) {
      ++allocation.node_count;
      allocation.cores_per_node = node.cores;
      allocation.gpus_per_node = node.gpus;
    }
  }
  auto window = sim::makespan_window(events);
  {
    auto out = open_output(dir / "utilization.csv");
    if (window.empty() || allocation.node_count == 0) {
      sim::write_csv(out, sim::UtilizationSeries{{}, allocation.total_cores(), allocation.total_gpus()});
    } else {
      auto report = sim::compute_utilization(events, allocation, window.begin, window.end);
      sim::write_csv(out, report.series);
      auto steady = sim::steady_state_window(events);
      auto steady_report = sim::compute_utilization(events, allocation, steady.begin, steady.end);
      std::printf("utilization: cores %.4f gpus %.4f (steady state), cores %.4f gpus %.4f (makespan %lld)\n",
                  steady_report.core_fraction, steady_report.gpu_fraction, report.core_fraction,
                  report.gpu_fraction, static_cast<long long>(window.end - window.begin));
    }
  }

  std::size_t done = 0;
  for (const auto& [uid, r] : results) done += r.status == dataflow::NodeStatus::DONE;
  std::cout << done << "/" << results.size() << " nodes done; pilot " << to_string(pilot_state);
  if (auto d = pilot->detail(); !d.empty() && pilot_state != pilot::PilotState::DONE)
    std::cout << " (" << d << ')';
  std::cout << "; outputs in " << dir.string() << '\n';

  if (done == results.size()) return OK;
  if (pilot_state == pilot::PilotState::FAILED || pilot_state == pilot::PilotState::CANCELED)
    return PILOT_FAILED;
  return TASKS_FAILED;
}

// Bag of identical tasks for utilization experiments.
int cmd_generate(int count, std::int64_t duration, int cores, int gpus, const std::string& out_path,
                 std::uint64_t seed, double gpu_fraction, int gpu_task_gpus) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution gpu_task(gpu_fraction);
  Json doc = Json::array();
  const int width = static_cast<int>(std::to_string(std::max(count - 1, 0)).size());
  for (int i = 0; i < count; ++i) {
    auto index = std::to_string(i);
    dataflow::DataflowNode n = dataflow::app("t" + std::string(width - index.size(), '0') + index,
                                             "sleep", {std::to_string(duration)});
    bool gpu = gpu_fraction > 0 && gpu_task(rng);
    n.resource_specification = std::map<std::string, std::int64_t>{
        {"ranks", 1}, {"cores_per_rank", gpu ? 1 : cores}, {"gpus_per_rank", gpu ? gpu_task_gpus : gpus}};
    n.expected_duration_s = duration;
    doc.push_back(dataflow::to_json(n));
  }
  if (out_path.empty() || out_path == "-") {
    std::cout << doc.dump(1) << '\n';
  } else {
    auto out = open_output(out_path);
    out << doc.dump(1) << '\n';
  }
  return OK;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pilotflow: pilot-job workflow runner"};
  app.require_subcommand(1);

  std::string workflow;
  auto* validate = app.add_subcommand("validate", "check a workflow file");
  validate->add_option("workflow", workflow, "workflow document")->required();

  RunOptions run_opts;
  auto* run = app.add_subcommand("run", "run a workflow through a pilot");
  run->add_option("workflow", run_opts.workflow, "workflow document")->required();
  run->add_option("--platform", run_opts.platform, "platform document")->required();
  run->add_option("--nodes", run_opts.nodes, "pilot node count (default: whole platform)");
  run->add_option("--instances,-k", run_opts.instances, "scheduler instances");
  run->add_option("--walltime", run_opts.walltime, "pilot walltime in seconds");
  run->add_option("--run-id", run_opts.run_id, "output directory name")->required();
  run->add_option("--out", run_opts.out, "output root");
  run->add_option("--seed", run_opts.seed, "simulation seed");
  run->add_option("--policy", run_opts.policy, "round-robin | least-queue");
  run->add_option("--queue", run_opts.queue, "batch queue");
  run->add_option("--project", run_opts.project, "batch project");

  std::string spec_path, dialect;
  auto* render = app.add_subcommand("render", "print the submit script for a job spec");
  render->add_option("spec", spec_path, "job spec document")->required();
  render->add_option("--dialect,-m", dialect, "script dialect")->required();

  std::string submit_spec, submit_platform;
  std::int64_t submit_timeout = 3'600'000;
  auto* submit = app.add_subcommand("submit", "submit one job and wait for it");
  submit->add_option("spec", submit_spec, "job spec document")->required();
  submit->add_option("--platform", submit_platform, "platform document")->required();
  submit->add_option("--timeout", submit_timeout, "wait timeout in backend units");

  int gen_count = 100, gen_cores = 1, gen_gpus = 0, gen_gpu_task_gpus = 1;
  std::int64_t gen_duration = 60;
  double gen_gpu_fraction = 0.0;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  auto* generate = app.add_subcommand("generate", "write a bag-of-tasks workflow");
  generate->add_option("--count", gen_count, "number of tasks")->check(CLI::PositiveNumber);
  generate->add_option("--duration", gen_duration, "seconds per task")->check(CLI::NonNegativeNumber);
  generate->add_option("--cores", gen_cores, "cores per task")->check(CLI::PositiveNumber);
  generate->add_option("--gpus", gen_gpus, "gpus per task")->check(CLI::NonNegativeNumber);
  generate->add_option("--gpu-fraction", gen_gpu_fraction, "share of 1-core GPU tasks")
      ->check(CLI::Range(0.0, 1.0));
  generate->add_option("--gpu-task-gpus", gen_gpu_task_gpus, "gpus per GPU task")
      ->check(CLI::PositiveNumber);
  generate->add_option("--seed", gen_seed, "random seed");
  generate->add_option("--out,-o", gen_out, "output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? OK : USAGE;
  }

  try {
    if (*validate) return cmd_validate(workflow);
    if (*run) return cmd_run(run_opts);
    if (*render) return cmd_render(spec_path, dialect);
    if (*submit) return cmd_submit(submit_spec, submit_platform, submit_timeout);
    if (*generate)
      return cmd_generate(gen_count, gen_duration, gen_cores, gen_gpus, gen_out, gen_seed,
                          gen_gpu_fraction, gen_gpu_task_gpus);
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << '\n';
    return f.code;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return USAGE;
  }
  return USAGE;
}
