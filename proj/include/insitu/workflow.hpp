#pragma once

// The fixed per-query workflow: manager selection and tool requests, tool
// synthesis, the executor's ReAct loop with suspension, and answer
// integration, with failure-report re-planning.

#include "insitu/llm_gateway.hpp"
#include "insitu/metrics.hpp"
#include "insitu/prompt_suite.hpp"
#include "insitu/sandbox.hpp"
#include "insitu/tool_registry.hpp"
#include "insitu/trace.hpp"

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace insitu {

struct WorkflowBudgets {
  int executor_steps = 30;
  int developer_attempts = 3;
  int manager_replans = 2;
  int suspensions = 3;
  int integrator_retries = 1;
};

struct WorkflowConfig {
  WorkflowBudgets budgets;
  std::optional<InvocationLimits> limits;  // defaults to the runner's
  std::size_t context_summary_bytes = 4096;
};

enum class Phase { manager_select, synthesize, execute, suspended, integrate, done, failed };

std::string_view to_string(Phase p);
std::optional<Phase> parse_phase(std::string_view text);
bool legal_transition(Phase from, Phase to);

inline constexpr std::string_view kRequestToolsName = "request_tools";
inline constexpr std::string_view kIncompleteAnswer = "The task is not completable.";

struct QueryJob {
  std::string query_id;
  std::string query_text;
};

// A validation-passing artifact synthesized by one job, with its usage.
struct LocalTool {
  ToolArtifact artifact;
  std::string query_id;
  ToolStats stats;
};

struct QueryOutcome {
  std::string query_id;
  FinalAnswer answer;
  bool completed = false;
  std::string failure_reason;
  std::vector<LocalTool> local_tools;
  std::map<std::string, ToolStats> global_usage;  // by snapshot record name
  QuerySample sample;
  std::vector<Phase> phases;
  std::string listing_digest;  // of the snapshot the job observed
};

struct WorkflowContext {
  const RegistrySnapshot& snapshot;
  Gateway& gateway;
  ToolRunner& runner;
  const PromptSuite& prompts;
  const WorkflowConfig& config;
  EventSink& sink;
};

// A bound tool: a snapshot record or a local artifact.
struct BoundTool {
  ToolArtifact artifact;
  bool local = false;
};

class QueryRun {
 public:
  QueryRun(WorkflowContext ctx, QueryJob job);

  QueryOutcome run();

  // Phases, exposed for tests.
  struct ManagerResult {
    std::optional<ManagerDecision> decision;
    std::string error;  // failure report text when decision is empty
  };
  ManagerResult manager_call(const std::string& failure_report, const std::string& additional_requests);

  struct DevelopResult {
    std::optional<ToolArtifact> artifact;
    int attempts = 0;
    std::string error;
  };
  DevelopResult develop_tool(const ToolRequest& request);

  struct Suspension {
    std::string requests;
  };
  struct ExecFailure {
    std::string reason;
  };
  using ExecResult = std::variant<ExecutorReport, Suspension, ExecFailure>;
  ExecResult executor_loop(const std::string& guidance, const std::string& context_summary);

  std::optional<FinalAnswer> integrate(const ExecutorReport& report, std::string* error);

  const std::map<std::string, BoundTool>& bound() const { return bound_; }
  const QuerySample& sample() const { return sample_; }

 private:
  void transition(Phase to, nlohmann::json detail = nullptr);
  std::string resolve_names(const std::vector<std::string>& names);
  CompletionResult call(AgentRole role, std::vector<ChatMessage> messages);
  std::string task_message(const std::string& guidance, const std::string& context_summary) const;
  nlohmann::json listing_slot() const;
  InvocationResult invoke_bound(const std::string& name, const nlohmann::json& input);

  WorkflowContext ctx_;
  QueryJob job_;
  std::optional<Phase> phase_;
  std::vector<Phase> phases_;
  std::map<std::string, BoundTool> bound_;
  std::vector<LocalTool> locals_;
  std::map<std::string, ToolStats> global_usage_;
  QuerySample sample_;
  std::string execution_log_;
  int suspensions_used_ = 0;
};

QueryOutcome run_query(const QueryJob& job, WorkflowContext ctx);

}  // namespace insitu
