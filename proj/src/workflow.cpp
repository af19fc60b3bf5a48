#include "insitu/workflow.hpp"

#include <algorithm>

namespace insitu {

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::manager_select: return "ManagerSelect";
    case Phase::synthesize: return "Synthesize";
    case Phase::execute: return "Execute";
    case Phase::suspended: return "Suspended";
    case Phase::integrate: return "Integrate";
    case Phase::done: return "Done";
    case Phase::failed: return "Failed";
  }
  return "Unknown";
}

std::optional<Phase> parse_phase(std::string_view text) {
  for (auto p : {Phase::manager_select, Phase::synthesize, Phase::execute, Phase::suspended, Phase::integrate,
                 Phase::done, Phase::failed}) {
    if (to_string(p) == text) return p;
  }
  return std::nullopt;
}

bool legal_transition(Phase from, Phase to) {
  switch (from) {
    case Phase::manager_select:
      return to == Phase::synthesize || to == Phase::execute || to == Phase::failed;
    case Phase::synthesize: return to == Phase::execute;
    case Phase::execute: return to == Phase::suspended || to == Phase::integrate || to == Phase::failed;
    case Phase::suspended: return to == Phase::manager_select;
    case Phase::integrate: return to == Phase::done || to == Phase::failed;
    case Phase::failed: return to == Phase::manager_select;
    case Phase::done: return false;
  }
  return false;
}

namespace {

const nlohmann::json& request_tools_schema() {
  static const nlohmann::json schema = {
      {"type", "object"},
      {"properties",
       {{"capabilities",
         {{"type", "array"}, {"items", {{"type", "string"}}}, {"description", "Missing capabilities, one per entry"}}},
        {"reason", {{"type", "string"}, {"description", "Why the bound tools are insufficient"}}}}},
      {"required", {"capabilities"}}};
  return schema;
}

std::optional<nlohmann::json> as_action(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto t = j.find("tool");
  if (t == j.end() || !t->is_string()) return std::nullopt;
  if (!j.contains("input")) j["input"] = nlohmann::json::object();
  return j;
}

// The first fenced JSON action block, or a reply that is a bare action object.
std::optional<nlohmann::json> find_action(const std::string& reply) {
  for (const auto& block : fenced_blocks(reply)) {
    if (auto a = as_action(block)) return a;
  }
  auto first = reply.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && reply[first] == '{') return as_action(reply.substr(first));
  return std::nullopt;
}

std::string requests_text(const nlohmann::json& input) {
  std::string out;
  if (auto caps = input.find("capabilities"); caps != input.end() && caps->is_array()) {
    for (const auto& c : *caps) out += "- " + (c.is_string() ? c.get<std::string>() : c.dump()) + "\n";
  }
  if (auto r = input.find("reason"); r != input.end() && r->is_string()) out += "Reason: " + r->get<std::string>() + "\n";
  if (out.empty()) out = input.dump() + "\n";
  return out;
}

std::string clip(const std::string& s, std::size_t n) { return truncate_output(s, n); }

}  // namespace

QueryRun::QueryRun(WorkflowContext ctx, QueryJob job) : ctx_(ctx), job_(std::move(job)) {
  sample_.query_id = job_.query_id;
}

void QueryRun::transition(Phase to, nlohmann::json detail) {
  if (phase_ && !legal_transition(*phase_, to)) {
    throw std::logic_error("illegal phase transition " + std::string(to_string(*phase_)) + " -> " +
                           std::string(to_string(to)));
  }
  nlohmann::json payload = {{"query_id", job_.query_id},
                            {"from", phase_ ? nlohmann::json(to_string(*phase_)) : nlohmann::json(nullptr)},
                            {"to", to_string(to)}};
  if (detail.is_object()) payload.update(detail);
  phase_ = to;
  phases_.push_back(to);
  ctx_.sink.emit(EventKind::phase, std::move(payload));
}

CompletionResult QueryRun::call(AgentRole role, std::vector<ChatMessage> messages) {
  ChatExchange ex;
  ex.messages = std::move(messages);
  ex.agent_role = role;
  ex.scope = job_.query_id;
  return ctx_.gateway.complete(std::move(ex), ctx_.sink);
}

nlohmann::json QueryRun::listing_slot() const {
  std::map<std::string, ListingEntry> entries;
  for (auto& e : ctx_.snapshot.listing()) entries.emplace(e.name, e);
  for (const auto& l : locals_) {
    entries.emplace(l.artifact.meta.name, ListingEntry{l.artifact.meta.name, l.artifact.meta.description,
                                                       l.artifact.input_schema});
  }
  std::vector<ListingEntry> list;
  for (auto& [_, e] : entries) list.push_back(e);
  return listing_json(list);
}

std::string QueryRun::resolve_names(const std::vector<std::string>& names) {
  std::string unresolved;
  for (const auto& name : names) {
    auto local = std::find_if(locals_.begin(), locals_.end(),
                              [&](const LocalTool& l) { return l.artifact.meta.name == name; });
    if (local != locals_.end()) {
      bound_[name] = {local->artifact, true};
      continue;
    }
    try {
      auto res = ctx_.snapshot.resolve(name);
      bound_[res.record->name] = {artifact_from_record(*res.record), false};
    } catch (const ResolutionError&) {
      unresolved += (unresolved.empty() ? "" : ", ") + name;
    }
  }
  return unresolved;
}

QueryRun::ManagerResult QueryRun::manager_call(const std::string& failure_report,
                                               const std::string& additional_requests) {
  nlohmann::json slots = {{"user_query", job_.query_text}, {"tools", listing_slot()}};
  if (!failure_report.empty()) slots["failure_report"] = failure_report;
  if (!additional_requests.empty()) slots["additional_tool_requests"] = additional_requests;
  auto prompt = ctx_.prompts.render(PromptRole::manager, slots);
  auto reply = call(AgentRole::manager, {{MessageRole::user, prompt}});

  ManagerResult out;
  ManagerDecision decision;
  try {
    decision = parse_manager(reply.text);
  } catch (const ParseError& e) {
    out.error = std::string("The previous reply could not be parsed (") + e.what() +
                "). Reply with exactly one JSON object holding required_tool_names, tool_usage_guidance and "
                "tool_requests.\nPrevious reply:\n" + clip(e.reply(), 2000);
    return out;
  }
  if (auto missing = resolve_names(decision.required_tool_names); !missing.empty()) {
    out.error = "The following names in required_tool_names are not in the available tool list (names are "
                "case-sensitive): " + missing + ". Select only listed tools, or request new ones under tool_requests.";
    return out;
  }
  out.decision = std::move(decision);
  return out;
}

QueryRun::DevelopResult QueryRun::develop_tool(const ToolRequest& request) {
  DevelopResult out;
  auto prompt = ctx_.prompts.render(PromptRole::tool_developer, {{"tool_request_json", request.to_json().dump(2)}});
  std::vector<ChatMessage> messages = {{MessageRole::user, prompt}};
  const int budget = std::max(1, ctx_.config.budgets.developer_attempts);
  for (out.attempts = 1; out.attempts <= budget; ++out.attempts) {
    auto reply = call(AgentRole::tool_developer, messages);
    nlohmann::json event = {{"query_id", job_.query_id}, {"origin", "develop"}, {"tool", request.name},
                            {"attempt", out.attempts}};
    try {
      auto source = parse_single_code_block(reply.text);
      auto artifact = validate_artifact(source, request);
      ctx_.runner.provision(artifact);
      event["passed"] = true;
      event["digest"] = artifact.digest;
      ctx_.sink.emit(EventKind::validation, std::move(event));
      out.artifact = std::move(artifact);
      return out;
    } catch (const GatewayError&) {
      throw;
    } catch (const std::exception& e) {
      out.error = e.what();
    }
    event["passed"] = false;
    event["error"] = out.error;
    ctx_.sink.emit(EventKind::validation, std::move(event));
    messages.push_back({MessageRole::assistant, reply.text});
    messages.push_back({MessageRole::user, "The tool was rejected: " + out.error +
                                               "\nFix the problem and output the complete tool again as one and "
                                               "only one python code block."});
  }
  out.attempts = budget;
  return out;
}

std::string QueryRun::task_message(const std::string& guidance, const std::string& context_summary) const {
  std::string m = "# Task\n" + job_.query_text + "\n\n# Tool Usage Guidance\n" +
                  (guidance.empty() ? "(none)" : guidance) + "\n\n# Bound Tools\n";
  for (const auto& [name, tool] : bound_) {
    m += "- **" + name + "**: " + tool.artifact.meta.description + " Input schema: " + tool.artifact.input_schema.dump() +
         "\n";
  }
  m += "- **" + std::string(kRequestToolsName) +
       "**: Ask for capabilities that no bound tool provides; execution pauses until they are provisioned. "
       "Input schema: " + request_tools_schema().dump() + "\n";
  if (!context_summary.empty()) m += "\n# Context Summary\n" + context_summary + "\n";
  m += "\n# Action Protocol\n"
       "To call a tool, reply with one fenced json block {\"tool\": \"<name>\", \"input\": {...}} and wait for the "
       "observation. When you are done, reply with the report in the required Markdown format.\n";
  return m;
}

InvocationResult QueryRun::invoke_bound(const std::string& name, const nlohmann::json& input) {
  const auto& tool = bound_.at(name);
  auto limits = ctx_.config.limits.value_or(ctx_.runner.default_limits());
  InvocationResult result;
  try {
    result = ctx_.runner.invoke(tool.artifact, input, limits);
  } catch (const std::exception& e) {
    result.status = InvocationStatus::protocol_error;
    result.payload = {{"kind", "RunnerError"}, {"message", e.what()}};
    result.output_text = truncate_output(result.payload.dump(), limits.max_output_bytes);
  }
  const auto tokens = estimate_tokens(result.output_text);
  ToolStats delta{1, result.status == InvocationStatus::ok ? 1u : 0u, tokens};
  ++sample_.u;
  sample_.successes += delta.successes;
  sample_.tool_tokens += tokens;
  if (tool.local) {
    for (auto& l : locals_) {
      if (l.artifact.meta.name == name) l.stats += delta;
    }
  } else {
    global_usage_[name] += delta;
  }
  nlohmann::json event = {{"query_id", job_.query_id}, {"tool", name},
                          {"origin", tool.local ? "local" : "global"}, {"input", input},
                          {"status", to_string(result.status)}, {"output_tokens", tokens},
                          {"truncated", result.truncated}};
  if (result.status != InvocationStatus::ok && result.payload.is_object()) {
    event["kind"] = result.payload.value("kind", "");
  }
  ctx_.sink.emit(EventKind::invocation, std::move(event));
  return result;
}

QueryRun::ExecResult QueryRun::executor_loop(const std::string& guidance, const std::string& context_summary) {
  nlohmann::json slots = nlohmann::json::object();
  if (!context_summary.empty()) slots["context_summary"] = context_summary;
  std::vector<ChatMessage> messages = {{MessageRole::system, ctx_.prompts.render(PromptRole::executor, slots)},
                                       {MessageRole::user, task_message(guidance, context_summary)}};
  const int steps = std::max(1, ctx_.config.budgets.executor_steps);
  for (int step = 0; step < steps; ++step) {
    auto reply = call(AgentRole::executor, messages);
    messages.push_back({MessageRole::assistant, reply.text});

    std::string observation;
    if (auto action = find_action(reply.text)) {
      const auto tool = (*action)["tool"].get<std::string>();
      const auto& input = (*action)["input"];
      if (tool == kRequestToolsName) {
        if (suspensions_used_ < ctx_.config.budgets.suspensions) {
          ++suspensions_used_;
          return Suspension{requests_text(input)};
        }
        observation = "Error: request_tools is unavailable because the request budget is exhausted. Continue with "
                      "the bound tools, or report that the task is not completable.";
      } else if (!bound_.count(tool)) {
        std::string names;
        for (const auto& [n, _] : bound_) names += n + ", ";
        observation = "Error: tool '" + tool + "' is not in the bound tool list and was not executed. Never assume "
                      "a tool exists. Bound tools: " + names + std::string(kRequestToolsName) + ".";
      } else {
        auto result = invoke_bound(tool, input);
        observation = "Observation from " + tool + " [" + std::string(to_string(result.status)) + "]:\n" +
                      result.output_text;
        execution_log_ += "- " + tool + "(" + clip(input.dump(), 300) + ") -> [" +
                          std::string(to_string(result.status)) + "] " + clip(result.output_text, 600) + "\n";
      }
      messages.push_back({MessageRole::user, observation});
      continue;
    }
    try {
      return parse_executor_report(reply.text);
    } catch (const ParseError& e) {
      messages.push_back({MessageRole::user, std::string("Your reply was neither a tool call nor a complete report (") +
                                                 e.what() + "). Call a tool or write the final report."});
    }
  }
  return ExecFailure{"executor step budget of " + std::to_string(steps) + " exhausted without a report"};
}

std::optional<FinalAnswer> QueryRun::integrate(const ExecutorReport& report, std::string* error) {
  std::vector<ChatMessage> messages = {
      {MessageRole::system, ctx_.prompts.render(PromptRole::integrator, {{"user_query", job_.query_text}})},
      {MessageRole::user, report.to_markdown()}};
  const int attempts = 1 + std::max(0, ctx_.config.budgets.integrator_retries);
  for (int i = 0; i < attempts; ++i) {
    auto reply = call(AgentRole::integrator, messages);
    try {
      return parse_final_answer(reply.text);
    } catch (const ParseError& e) {
      if (error) *error = e.what();
      messages.push_back({MessageRole::assistant, reply.text});
      messages.push_back({MessageRole::user, std::string("The reply was rejected (") + e.what() +
                                                 "). Answer with only the JSON object holding final_answer and "
                                                 "reasoning_summary."});
    }
  }
  return std::nullopt;
}

QueryOutcome QueryRun::run() {
  QueryOutcome out;
  out.query_id = job_.query_id;
  out.listing_digest = listing_digest(ctx_.snapshot);

  auto finish = [&](std::optional<FinalAnswer> answer, std::string reason) {
    if (answer) {
      out.answer = std::move(*answer);
      out.completed = true;
    } else {
      out.answer = {std::string(kIncompleteAnswer), reason};
      out.failure_reason = std::move(reason);
    }
    out.local_tools = locals_;
    out.global_usage = global_usage_;
    out.sample = sample_;
    out.phases = phases_;
    return out;
  };
  auto terminal = [&](const std::string& reason) {
    transition(Phase::failed, {{"reason", reason}, {"terminal", true}});
    return finish(std::nullopt, reason);
  };

  transition(Phase::manager_select, {{"listing_digest", out.listing_digest}});
  std::string failure_report, extra_requests, context_summary, synthesis_failures;
  int replans_left = ctx_.config.budgets.manager_replans;

  try {
    while (true) {
      auto mr = manager_call(failure_report, extra_requests);
      if (!mr.decision) {
        if (replans_left-- <= 0) return terminal("manager re-plan budget exhausted: " + mr.error);
        transition(Phase::failed, {{"reason", mr.error}, {"terminal", false}});
        failure_report = mr.error;
        transition(Phase::manager_select);
        continue;
      }
      const auto decision = std::move(*mr.decision);
      failure_report.clear();
      extra_requests.clear();

      if (!decision.tool_requests.empty()) {
        transition(Phase::synthesize, {{"requests", decision.tool_requests.size()}});
        for (const auto& req : decision.tool_requests) {
          if (bound_.count(req.name)) continue;
          if (resolve_names({req.name}).empty()) continue;
          auto dev = develop_tool(req);
          if (!dev.artifact) {
            synthesis_failures += "- Tool '" + req.name + "' could not be synthesized after " +
                                  std::to_string(dev.attempts) + " attempts: " + clip(dev.error, 800) + "\n";
            continue;
          }
          ++sample_.c;
          locals_.push_back({*dev.artifact, job_.query_id, {}});
          bound_[req.name] = {*dev.artifact, true};
        }
      }
      transition(Phase::execute, {{"bound", [&] {
                                     auto names = nlohmann::json::array();
                                     for (const auto& [n, _] : bound_) names.push_back(n);
                                     return names;
                                   }()}});

      auto result = executor_loop(decision.tool_usage_guidance, context_summary);
      if (auto* report = std::get_if<ExecutorReport>(&result)) {
        transition(Phase::integrate);
        std::string error;
        auto answer = integrate(*report, &error);
        if (!answer) return terminal("integrator reply rejected: " + error);
        transition(Phase::done, {{"final_answer", answer->final_answer}});
        return finish(std::move(answer), {});
      }
      if (auto* s = std::get_if<Suspension>(&result)) {
        transition(Phase::suspended, {{"requests", s->requests}});
        extra_requests = s->requests;
        context_summary = clip(execution_log_.empty() ? "No tool has been called yet." : execution_log_,
                               ctx_.config.context_summary_bytes);
        transition(Phase::manager_select);
        continue;
      }
      const auto& failure = std::get<ExecFailure>(result);
      std::string report = "Execution failed: " + failure.reason + "\n" + synthesis_failures;
      if (replans_left-- <= 0) return terminal(report);
      transition(Phase::failed, {{"reason", report}, {"terminal", false}});
      failure_report = report;
      if (!execution_log_.empty()) context_summary = clip(execution_log_, ctx_.config.context_summary_bytes);
      transition(Phase::manager_select);
    }
  } catch (const GatewayError& e) {
    return terminal(std::string("gateway error: ") + e.what());
  } catch (const RenderError& e) {
    return terminal(std::string("prompt render error: ") + e.what());
  }
}

QueryOutcome run_query(const QueryJob& job, WorkflowContext ctx) { return QueryRun(ctx, job).run(); }

}  // namespace insitu
