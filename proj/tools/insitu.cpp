#include "insitu/run_config.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted.store(true); }

}  // namespace

int main(int argc, char** argv) {
  using insitu::RunConfig;
  CLI::App app{"insitu: batched in-situ tool evolution"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; command-line flags take precedence");

  RunConfig rc;
  std::string mode = "zero-start";
  std::vector<std::string> role_models;
  auto* run = app.add_subcommand("run", "Process a query stream and evolve the tool library");
  run->configurable();
  run->add_option("--stream", rc.stream, "Query stream (text or JSON lines)")->required();
  run->add_option("--out", rc.out_dir, "Output directory")->capture_default_str();
  run->add_option("--mode", mode, "zero-start or warm-start")
      ->check(CLI::IsMember({"zero-start", "warm-start"}))
      ->capture_default_str();
  run->add_option("--library", rc.library_in, "Library to start from in warm-start mode");
  run->add_option("--batch-size", rc.batch_size, "Queries per batch")->capture_default_str();
  run->add_option("--workers", rc.workers, "Concurrent jobs per batch")->capture_default_str();
  run->add_option("--provider", rc.provider, "scripted or live")->capture_default_str();
  run->add_option("--script", rc.script, "Scripted provider transcript");
  run->add_option("--endpoint", rc.endpoint, "OpenAI-compatible base URL");
  run->add_option("--api-prefix", rc.api_prefix)->capture_default_str();
  run->add_option("--model", rc.model, "Default model id")->capture_default_str();
  run->add_option("--role-model", role_models, "Per-role model as role=model");
  run->add_option("--api-key-env", rc.api_key_env, "Environment variable holding the API key")
      ->capture_default_str();
  run->add_option("--temperature", rc.temperature)->capture_default_str();
  run->add_option("--request-timeout", rc.request_timeout_s, "Seconds per LLM request")->capture_default_str();
  run->add_option("--request-attempts", rc.request_attempts)->capture_default_str();
  run->add_option("--executor-steps", rc.budgets.executor_steps)->capture_default_str();
  run->add_option("--developer-attempts", rc.budgets.developer_attempts)->capture_default_str();
  run->add_option("--manager-replans", rc.budgets.manager_replans)->capture_default_str();
  run->add_option("--suspensions", rc.budgets.suspensions)->capture_default_str();
  run->add_option("--integrator-retries", rc.budgets.integrator_retries)->capture_default_str();
  run->add_option("--aggregator-retries", rc.absorb.aggregator_retries)->capture_default_str();
  run->add_flag("--allow-global-remerge", rc.absorb.allow_global_remerge);
  run->add_option("--harness", rc.harness, "Tool harness script")->required();
  run->add_option("--python", rc.python)->capture_default_str();
  run->add_option("--tool-timeout", rc.tool_timeout_s, "Seconds per tool invocation")->capture_default_str();
  run->add_option("--max-output-bytes", rc.max_output_bytes)->capture_default_str();
  run->add_option("--max-concurrent-tools", rc.max_concurrent_tools)->capture_default_str();
  run->add_option("--env-allow", rc.env_allowlist, "Environment variables passed to tools");
  run->add_option("--provision", rc.provision, "installed, index or pip")->capture_default_str();
  run->add_option("--package-index", rc.package_index, "Allowed packages, one per line");
  run->add_option("--env-cache", rc.env_cache, "Directory for provisioned environments");
  run->add_flag("!--no-confine-writes", rc.confine_writes, "Do not restrict tool writes to scratch");
  run->add_flag("--resume", rc.resume, "Continue from the checkpoint in --out");
  run->add_option("--stop-after", rc.stop_after_batches, "Stop after this many batches");
  run->add_option("--egl-window", rc.egl_window, "Rolling window for the exported EGL curve");
  run->add_option("--clock", rc.clock, "auto, logical or wall")->capture_default_str();

  std::filesystem::path inspect_lib;
  auto* inspect = app.add_subcommand("inspect", "List tools in a persisted library");
  inspect->add_option("library", inspect_lib)->required();

  std::filesystem::path tool_source;
  std::optional<std::filesystem::path> tool_request;
  auto* vtool = app.add_subcommand("validate-tool", "Check a tool artifact");
  vtool->add_option("source", tool_source)->required();
  vtool->add_option("--request", tool_request, "Tool request JSON to check against");

  std::filesystem::path trace_path;
  auto* replay = app.add_subcommand("replay", "Recompute metrics from a trace");
  replay->add_option("trace", trace_path)->required();

  std::filesystem::path export_dir;
  std::size_t export_window = 0;
  auto* exp = app.add_subcommand("export", "Write metric curves from a trace");
  exp->add_option("trace", trace_path)->required();
  exp->add_option("--out", export_dir)->required();
  exp->add_option("--egl-window", export_window);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? insitu::kExitOk : insitu::kExitError;
  }

  if (*run) {
    rc.mode = mode == "warm-start" ? insitu::RunMode::warm_start : insitu::RunMode::zero_start;
    for (const auto& rm : role_models) {
      auto eq = rm.find('=');
      if (eq == std::string::npos) {
        std::cerr << "config error: role_models: expected role=model, got '" << rm << "'\n";
        return insitu::kExitError;
      }
      rc.role_models[rm.substr(0, eq)] = rm.substr(eq + 1);
    }
    std::signal(SIGINT, on_sigint);
    std::signal(SIGTERM, on_sigint);
    return insitu::cmd_run(rc, std::cout, std::cerr, &g_interrupted);
  }
  if (*inspect) return insitu::cmd_inspect(inspect_lib, std::cout, std::cerr);
  if (*vtool) return insitu::cmd_validate_tool(tool_source, tool_request, std::cout, std::cerr);
  if (*replay) return insitu::cmd_replay(trace_path, std::cout, std::cerr);
  if (*exp) return insitu::cmd_export(trace_path, export_dir, export_window, std::cout, std::cerr);
  return insitu::kExitError;
}
