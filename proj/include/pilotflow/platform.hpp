#pragma once

// Platform configuration documents and the executor they describe.

#include "lrm.hpp"
#include "serialize.hpp"

namespace pf {

struct PlatformConfig {
  std::string name;
  std::string backend = "local";  // "local" | "sim-batch"
  sim::ClusterConfig cluster;     // sim-batch only
  std::string dialect = "slurm-like";
  int reserved_cores_per_node = 0;
};

inline const std::vector<std::string>& backend_names() {
  static const std::vector<std::string> names{"local", "sim-batch"};
  return names;
}

inline void validate(const PlatformConfig& p) {
  std::vector<FieldError> errors;
  if (p.name.empty()) errors.push_back({"name", "empty"});
  const auto& backends = backend_names();
  if (std::find(backends.begin(), backends.end(), p.backend) == backends.end())
    errors.push_back({"backend", "unknown '" + p.backend + "'"});
  if (!find_dialect(p.dialect)) errors.push_back({"dialect", "unknown '" + p.dialect + "'"});
  if (p.reserved_cores_per_node < 0) errors.push_back({"reserved_cores_per_node", "negative"});
  if (p.backend == "sim-batch") {
    if (p.cluster.node_count < 1) errors.push_back({"cluster.node_count", "must be >= 1"});
    if (p.cluster.cores_per_node < 1) errors.push_back({"cluster.cores_per_node", "must be >= 1"});
    if (p.cluster.gpus_per_node < 0) errors.push_back({"cluster.gpus_per_node", "negative"});
    if (p.reserved_cores_per_node >= p.cluster.cores_per_node)
      errors.push_back({"reserved_cores_per_node", "must be < cores_per_node"});
  }
  if (!errors.empty()) throw ValidationError(std::move(errors));
}

inline PlatformConfig platform_from_json(const Json& j) {
  detail::expect_keys(j, {"name", "backend", "cluster", "dialect", "reserved_cores_per_node"},
                      "platform");
  PlatformConfig p;
  p.name = detail::read<std::string>(j, "name", "");
  p.backend = detail::read<std::string>(j, "backend", p.backend);
  p.dialect = detail::read<std::string>(j, "dialect", p.dialect);
  p.reserved_cores_per_node = detail::read(j, "reserved_cores_per_node", 0);
  if (auto it = j.find("cluster"); it != j.end()) {
    detail::expect_keys(*it, {"name", "node_count", "cores_per_node", "gpus_per_node"}, "cluster");
    p.cluster.name = detail::read<std::string>(*it, "name", p.name);
    p.cluster.node_count = detail::read(*it, "node_count", 0);
    p.cluster.cores_per_node = detail::read(*it, "cores_per_node", 0);
    p.cluster.gpus_per_node = detail::read(*it, "gpus_per_node", 0);
  }
  validate(p);
  return p;
}

inline Json to_json(const PlatformConfig& p) {
  Json j;
  j["name"] = p.name;
  j["backend"] = p.backend;
  if (p.backend == "sim-batch") {
    j["cluster"] = {{"name", p.cluster.name},
                    {"node_count", p.cluster.node_count},
                    {"cores_per_node", p.cluster.cores_per_node},
                    {"gpus_per_node", p.cluster.gpus_per_node}};
  }
  j["dialect"] = p.dialect;
  j["reserved_cores_per_node"] = p.reserved_cores_per_node;
  return j;
}

inline std::shared_ptr<lrm::Executor> make_executor(const PlatformConfig& p, std::uint64_t seed = 0) {
  validate(p);
  if (p.backend == "sim-batch") {
    lrm::SimBatchExecutor::Options options;
    options.name = p.name;
    options.reserved_cores_per_node = p.reserved_cores_per_node;
    options.dialect = find_dialect(p.dialect);
    return std::make_shared<lrm::SimBatchExecutor>(std::make_shared<sim::Simulation>(seed), p.cluster,
                                                   std::move(options));
  }
  return std::make_shared<lrm::LocalExecutor>(lrm::LocalExecutor::Options{p.name, 0});
}

}  // namespace pf
