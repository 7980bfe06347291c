#pragma once

// Thin POSIX process layer used by the real-execution backends.

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

extern char** environ;

namespace pf {

struct ProcessSpec {
  std::string executable;
  std::vector<std::string> arguments;
  std::map<std::string, std::string> environment;  // added to the parent's
  std::string directory;
  std::optional<std::string> stdout_path;
  std::optional<std::string> stderr_path;
};

// Shell convention: 128 + signal number for signal deaths.
inline int decode_wait_status(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return 255;
}

// Starts the process in its own process group so that a kill reaches its
// children too. Throws std::system_error if the spawn fails.
inline pid_t spawn_process(const ProcessSpec& spec) {
  std::vector<std::string> argv_store;
  argv_store.reserve(spec.arguments.size() + 1);
  argv_store.push_back(spec.executable);
  argv_store.insert(argv_store.end(), spec.arguments.begin(), spec.arguments.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  argv.push_back(nullptr);

  std::map<std::string, std::string> merged;
  for (char** e = environ; e && *e; ++e) {
    std::string entry(*e);
    auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    merged[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  for (const auto& [k, v] : spec.environment) merged[k] = v;
  std::vector<std::string> env_store;
  for (const auto& [k, v] : merged) env_store.push_back(k + "=" + v);
  std::vector<char*> envp;
  for (auto& e : env_store) envp.push_back(e.data());
  envp.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawnattr_t attr;
  posix_spawnattr_init(&attr);
  posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
  posix_spawnattr_setpgroup(&attr, 0);

  if (!spec.directory.empty()) posix_spawn_file_actions_addchdir_np(&actions, spec.directory.c_str());
  posix_spawn_file_actions_addopen(&actions, STDIN_FILENO, "/dev/null", O_RDONLY, 0);
  if (spec.stdout_path)
    posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, spec.stdout_path->c_str(),
                                     O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (spec.stderr_path)
    posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, spec.stderr_path->c_str(),
                                     O_WRONLY | O_CREAT | O_TRUNC, 0644);

  pid_t pid = 0;
  int rc = posix_spawnp(&pid, spec.executable.c_str(), &actions, &attr, argv.data(), envp.data());
  posix_spawn_file_actions_destroy(&actions);
  posix_spawnattr_destroy(&attr);
  if (rc != 0) throw std::system_error(rc, std::generic_category(), "spawn " + spec.executable);
  return pid;
}

// Blocks until the child exits; returns its shell-style exit code.
inline int wait_process(pid_t pid) {
  int status = 0;
  while (waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) return 255;
  }
  return decode_wait_status(status);
}

inline void kill_process_group(pid_t pid, int sig = SIGKILL) {
  if (pid > 0) ::kill(-pid, sig);
}

}  // namespace pf
