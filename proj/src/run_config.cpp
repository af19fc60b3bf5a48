#include "insitu/run_config.hpp"

#include <fstream>
#include <set>

namespace insitu {

namespace fs = std::filesystem;

std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> errors;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  need(c.provider == "scripted" || c.provider == "live", "provider: must be 'scripted' or 'live'");
  if (c.provider == "scripted") need(!c.script.empty(), "script: required for the scripted provider");
  if (c.provider == "live") {
    need(!c.endpoint.empty(), "endpoint: required for the live provider");
    need(!c.api_key_env.empty(), "api_key_env: required for the live provider");
  }
  for (const auto& [role, _] : c.role_models) {
    need(parse_role(role).has_value(), "role_models: unknown role '" + role + "'");
  }
  need(c.temperature >= 0.0 && c.temperature <= 2.0, "temperature: must lie in [0, 2]");
  need(c.request_timeout_s >= 1, "request_timeout_s: must be >= 1");
  need(c.request_attempts >= 1, "request_attempts: must be >= 1");
  need(c.batch_size >= 1, "batch_size: must be >= 1");
  need(c.workers >= 1, "workers: must be >= 1");
  need(c.budgets.executor_steps >= 1, "executor_steps: must be >= 1");
  need(c.budgets.developer_attempts >= 1, "developer_attempts: must be >= 1");
  need(c.budgets.manager_replans >= 1, "manager_replans: must be >= 1");
  need(c.budgets.suspensions >= 1, "suspensions: must be >= 1");
  need(c.budgets.integrator_retries >= 1, "integrator_retries: must be >= 1");
  need(c.absorb.aggregator_retries >= 1, "aggregator_retries: must be >= 1");
  need(!c.harness.empty(), "harness: path to the tool harness is required");
  need(c.tool_timeout_s >= 1, "tool_timeout_s: must be >= 1");
  need(c.max_output_bytes >= 64, "max_output_bytes: must be >= 64");
  need(c.max_concurrent_tools >= 1, "max_concurrent_tools: must be >= 1");
  need(c.provision == "installed" || c.provision == "index" || c.provision == "pip",
       "provision: must be 'installed', 'index' or 'pip'");
  if (c.provision == "index") need(!c.package_index.empty(), "package_index: required when provision = index");
  if (c.provision == "pip") need(!c.env_cache.empty(), "env_cache: required when provision = pip");
  need(!c.stream.empty(), "stream: path to the query stream is required");
  need(!c.out_dir.empty(), "out_dir: required");
  if (c.mode == RunMode::warm_start) need(!c.library_in.empty(), "library_in: required for warm-start");
  need(c.clock == "auto" || c.clock == "logical" || c.clock == "wall", "clock: must be 'auto', 'logical' or 'wall'");
  return errors;
}

nlohmann::json to_json(const RunConfig& c) {
  return {
      {"provider",
       {{"kind", c.provider},
        {"script", c.script.string()},
        {"endpoint", c.endpoint},
        {"api_prefix", c.api_prefix},
        {"model", c.model},
        {"role_models", c.role_models},
        {"api_key_env", c.api_key_env},
        {"temperature", c.temperature},
        {"request_timeout_s", c.request_timeout_s},
        {"request_attempts", c.request_attempts}}},
      {"batch_size", c.batch_size},
      {"workers", c.workers},
      {"budgets",
       {{"executor_steps", c.budgets.executor_steps},
        {"developer_attempts", c.budgets.developer_attempts},
        {"manager_replans", c.budgets.manager_replans},
        {"suspensions", c.budgets.suspensions},
        {"integrator_retries", c.budgets.integrator_retries},
        {"aggregator_retries", c.absorb.aggregator_retries}}},
      {"allow_global_remerge", c.absorb.allow_global_remerge},
      {"sandbox",
       {{"harness", c.harness.string()},
        {"python", c.python.string()},
        {"tool_timeout_s", c.tool_timeout_s},
        {"max_output_bytes", c.max_output_bytes},
        {"max_concurrent_tools", c.max_concurrent_tools},
        {"env_allowlist", c.env_allowlist},
        {"provision", c.provision},
        {"package_index", c.package_index.string()},
        {"env_cache", c.env_cache.string()},
        {"confine_writes", c.confine_writes}}},
      {"paths", {{"stream", c.stream.string()}, {"library_in", c.library_in.string()}, {"out_dir", c.out_dir.string()}}},
      {"mode", c.mode == RunMode::warm_start ? "warm-start" : "zero-start"},
      {"egl_window", c.egl_window},
      {"clock", c.clock},
  };
}

std::vector<QueryJob> load_stream(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read stream file " + path.string());
  std::vector<QueryJob> jobs;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    QueryJob job;
    auto first = line.find_first_not_of(" \t");
    auto j = line[first] == '{' ? nlohmann::json::parse(line, nullptr, false) : nlohmann::json();
    if (j.is_object() && j.contains("query")) {
      job.query_text = j["query"].get<std::string>();
      if (j.contains("id")) job.query_id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    } else {
      job.query_text = line;
    }
    if (job.query_id.empty()) job.query_id = "q" + std::to_string(jobs.size() + 1);
    if (!ids.insert(job.query_id).second) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": duplicate query id '" + job.query_id +
                               "'");
    }
    jobs.push_back(std::move(job));
  }
  return jobs;
}

RunPaths::RunPaths(const fs::path& out_dir)
    : trace(out_dir / "trace.jsonl"),
      answers(out_dir / "answers.jsonl"),
      library(out_dir / "library"),
      exports(out_dir / "exports"),
      checkpoint_dir(out_dir / "checkpoint"),
      checkpoint_file(out_dir / "checkpoint" / "checkpoint.json"),
      summary(out_dir / "summary.json") {}

}  // namespace insitu
