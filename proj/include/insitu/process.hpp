#pragma once

// One-shot child process with piped stdio, a wall-clock deadline and
// optional filesystem write confinement.

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace insitu {

struct ProcessSpec {
  std::vector<std::string> argv;  // argv[0] is an absolute path or resolved via PATH
  std::vector<std::string> env;   // KEY=VALUE, replaces the parent environment
  std::filesystem::path cwd;
  std::string stdin_data;
  std::chrono::milliseconds timeout{120000};
  std::size_t max_stdout_bytes = 16u << 20;  // excess is discarded and flagged
  std::size_t max_stderr_bytes = 8u << 10;   // keeps the tail
  // When non-empty, writes are confined beneath these directories
  // (plus /dev/null). Requires kernel write-confinement support.
  std::vector<std::filesystem::path> writable_dirs;
};

struct ProcessOutcome {
  std::optional<int> exit_code;  // unset when killed by a signal
  int term_signal = 0;
  bool timed_out = false;
  bool stdout_overflow = false;
  bool confined = false;  // write confinement was applied
  std::string stdout_data;
  std::string stderr_tail;
  std::chrono::milliseconds wall_time{0};
};

// Throws std::system_error when the child cannot be started.
ProcessOutcome run_process(const ProcessSpec& spec);

// Whether the kernel supports write confinement for children.
bool write_confinement_available();

// Resolves a bare program name against PATH.
std::optional<std::filesystem::path> find_program(const std::string& name);

}  // namespace insitu
