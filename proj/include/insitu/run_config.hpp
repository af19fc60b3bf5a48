#pragma once

// Effective configuration of an evolution run and the operator commands
// built on it.

#include "insitu/evolution.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace insitu {

enum class RunMode { zero_start, warm_start };

struct RunConfig {
  // Provider profile.
  std::string provider = "scripted";  // scripted | live
  std::filesystem::path script;
  std::string endpoint;
  std::string api_prefix = "/v1";
  std::string model = "default";
  std::map<std::string, std::string> role_models;  // role name -> model id
  std::string api_key_env = "OPENAI_API_KEY";
  double temperature = kDefaultTemperature;
  int request_timeout_s = 120;
  int request_attempts = 3;

  std::size_t batch_size = kDefaultBatchSize;
  std::size_t workers = 8;
  WorkflowBudgets budgets;
  AbsorbConfig absorb;

  // Sandbox.
  std::filesystem::path harness;
  std::filesystem::path python = "python3";
  int tool_timeout_s = 120;
  std::size_t max_output_bytes = 64 * 1024;
  std::size_t max_concurrent_tools = 8;
  std::vector<std::string> env_allowlist;
  std::string provision = "installed";  // installed | index | pip
  std::filesystem::path package_index;  // one package name per line
  std::filesystem::path env_cache;
  bool confine_writes = true;

  // Paths.
  std::filesystem::path stream;
  std::filesystem::path library_in;
  std::filesystem::path out_dir = "run";
  RunMode mode = RunMode::zero_start;

  bool resume = false;
  std::size_t stop_after_batches = 0;  // 0: run to the end
  std::size_t egl_window = 0;
  std::string clock = "auto";  // auto | logical | wall
};

// Field-named problems; empty when the config is usable.
std::vector<std::string> validate(const RunConfig& config);

// The config after defaults, as recorded in the trace header. Never holds
// secret values, only environment variable names.
nlohmann::json to_json(const RunConfig& config);

// Plain text: one query per line (blank lines skipped, ids q1, q2, ...).
// Structured: JSON objects per line with "query" and optional "id".
std::vector<QueryJob> load_stream(const std::filesystem::path& path);

struct RunPaths {
  std::filesystem::path trace, answers, library, exports, checkpoint_dir, checkpoint_file, summary;
  explicit RunPaths(const std::filesystem::path& out_dir);
};

enum ExitCode : int { kExitOk = 0, kExitError = 1, kExitPartial = 2 };

int cmd_run(const RunConfig& config, std::ostream& out, std::ostream& err,
            const std::atomic<bool>* interrupt = nullptr);
int cmd_inspect(const std::filesystem::path& library, std::ostream& out, std::ostream& err);
int cmd_validate_tool(const std::filesystem::path& source, const std::optional<std::filesystem::path>& request,
                      std::ostream& out, std::ostream& err);
int cmd_replay(const std::filesystem::path& trace, std::ostream& out, std::ostream& err);
int cmd_export(const std::filesystem::path& trace, const std::filesystem::path& out_dir, std::size_t egl_window,
               std::ostream& out, std::ostream& err);

}  // namespace insitu
