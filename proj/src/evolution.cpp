#include "insitu/evolution.hpp"

#include <algorithm>
#include <atomic>
#include <set>
#include <thread>

namespace insitu {

std::optional<std::string> validate_partition(const ClusterPlan& plan, const std::vector<std::string>& candidates) {
  const std::set<std::string> universe(candidates.begin(), candidates.end());
  std::set<std::string> seen;
  for (const auto& cluster : plan.clusters) {
    if (cluster.tool_names.empty()) return "cluster '" + cluster.cluster_id + "' is empty";
    for (const auto& name : cluster.tool_names) {
      if (!universe.count(name)) return "cluster '" + cluster.cluster_id + "' names unknown tool '" + name + "'";
      if (!seen.insert(name).second) return "tool '" + name + "' appears in more than one place";
    }
  }
  std::string missing;
  for (const auto& name : universe) {
    if (!seen.count(name)) missing += (missing.empty() ? "" : ", ") + name;
  }
  if (!missing.empty()) return "tools left out of every cluster: " + missing;
  return std::nullopt;
}

ClusterPlan singleton_plan(const std::vector<std::string>& candidates) {
  ClusterPlan plan;
  for (const auto& name : candidates) plan.clusters.push_back({"singleton_" + name, name, {name}});
  return plan;
}

ToolRecord record_from_local(const LocalTool& local, std::uint64_t step) {
  ToolRecord r;
  r.name = local.artifact.meta.name;
  r.description = local.artifact.meta.description;
  r.input_schema = local.artifact.input_schema;
  r.output_schema = local.artifact.output_schema;
  r.dependencies = local.artifact.meta.dependencies;
  r.source = local.artifact.source;
  r.digest = local.artifact.digest;
  r.provenance.kind = ProvenanceKind::synthesized;
  r.provenance.step = step;
  r.provenance.query_id = local.query_id;
  r.stats = local.stats;
  return r;
}

namespace {

std::string fresh_name(const std::string& base, const std::set<std::string>& taken) {
  if (!taken.count(base)) return base;
  for (int v = 2;; ++v) {
    auto candidate = base + "_v" + std::to_string(v);
    if (!taken.count(candidate)) return candidate;
  }
}

std::string join_sorted(std::vector<std::string> names) {
  std::sort(names.begin(), names.end());
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ",") + n;
  return out;
}

nlohmann::json to_json(const ClusterPlan& plan) {
  auto arr = nlohmann::json::array();
  for (const auto& c : plan.clusters) {
    arr.push_back({{"cluster_id", c.cluster_id},
                   {"suggested_master_tool_name", c.suggested_master_tool_name},
                   {"tool_names", c.tool_names}});
  }
  return arr;
}

std::string_view to_string(ClusterOutcome::Kind k) {
  switch (k) {
    case ClusterOutcome::Kind::passthrough: return "passthrough";
    case ClusterOutcome::Kind::merged: return "merged";
    case ClusterOutcome::Kind::fallback: return "fallback";
  }
  return "unknown";
}

}  // namespace

std::vector<LocalTool> disambiguate_locals(const RegistrySnapshot& global, std::vector<LocalTool> locals) {
  std::set<std::string> taken;
  for (const auto& [name, _] : global.records()) taken.insert(name);
  for (auto& l : locals) {
    auto name = fresh_name(l.artifact.meta.name, taken);
    l.artifact.meta.name = name;
    taken.insert(name);
  }
  return locals;
}

AbsorbResult absorb(const AbsorbInput& input, Gateway& gateway, ToolRunner& runner, const PromptSuite& prompts,
                    const AbsorbConfig& config, EventSink& sink) {
  AbsorbResult result;
  const auto& global = input.global;
  const std::uint64_t step = global.step() + 1;

  auto add_usage = [&](const std::string& name) {
    if (auto it = input.global_usage.find(name); it != input.global_usage.end()) result.update.stats[name] += it->second;
  };

  if (input.locals.empty()) {
    for (const auto& [name, _] : input.global_usage) add_usage(name);
    sink.emit(EventKind::absorb, {{"step", step}, {"skipped", true}, {"candidates", nlohmann::json::array()}});
    return result;
  }

  std::map<std::string, const LocalTool*> locals;
  for (const auto& l : input.locals) locals.emplace(l.artifact.meta.name, &l);
  std::vector<std::string> candidates;
  std::vector<ListingEntry> listing;
  for (const auto& [name, r] : global.records()) listing.push_back({name, r.description, r.input_schema});
  for (const auto& [name, l] : locals) {
    listing.push_back({name, l->artifact.meta.description, l->artifact.input_schema});
  }
  std::sort(listing.begin(), listing.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  for (const auto& e : listing) candidates.push_back(e.name);

  std::vector<std::string> local_names;
  for (const auto& [name, _] : locals) local_names.push_back(name);

  // Aggregator: cluster the candidates.
  std::vector<ChatMessage> messages = {
      {MessageRole::user, prompts.render(PromptRole::aggregator, {{"tools", listing_json(listing)}})}};
  std::optional<ClusterPlan> accepted;
  std::string last_error;
  for (int attempt = 0; attempt <= std::max(0, config.aggregator_retries); ++attempt) {
    ChatExchange ex;
    ex.messages = messages;
    ex.agent_role = AgentRole::aggregator;
    ex.scope = "absorb:" + join_sorted(local_names);
    std::string reply;
    try {
      ++result.aggregator_calls;
      reply = gateway.complete(std::move(ex), sink).text;
      auto plan = parse_cluster_plan(reply);
      if (auto violation = validate_partition(plan, candidates)) {
        last_error = "partition violation: " + *violation;
      } else {
        accepted = std::move(plan);
        break;
      }
    } catch (const ParseError& e) {
      last_error = e.what();
    } catch (const GatewayError& e) {
      last_error = std::string("gateway error: ") + e.what();
      break;
    }
    messages.push_back({MessageRole::assistant, reply});
    messages.push_back({MessageRole::user, "The clustering was rejected (" + last_error +
                                               "). Every input tool must appear in exactly one cluster. Output the "
                                               "corrected JSON only."});
  }
  if (!accepted) {
    result.degraded = true;
    accepted = singleton_plan(candidates);
  }
  result.plan = *accepted;

  auto stats_of = [&](const std::string& name) {
    ToolStats s;
    if (auto l = locals.find(name); l != locals.end()) return l->second->stats;
    s = global.records().at(name).stats;
    if (auto it = input.global_usage.find(name); it != input.global_usage.end()) s += it->second;
    return s;
  };
  auto retire = [&](const std::string& member, const std::string& survivor) {
    if (member == survivor) {
      if (global.contains(member) && !locals.count(member)) result.update.replaced.insert(member);
      return;
    }
    result.update.aliases[member] = survivor;
  };

  std::set<std::string> taken(candidates.begin(), candidates.end());
  for (const auto& cluster : result.plan.clusters) {
    ClusterOutcome outcome;
    outcome.members = cluster.tool_names;
    const bool all_global = std::all_of(cluster.tool_names.begin(), cluster.tool_names.end(),
                                        [&](const std::string& n) { return !locals.count(n); });
    if (cluster.tool_names.size() == 1 || (all_global && !config.allow_global_remerge)) {
      for (const auto& n : cluster.tool_names) {
        if (auto l = locals.find(n); l != locals.end()) {
          result.update.tools.push_back(record_from_local(*l->second, step));
        } else {
          add_usage(n);
        }
      }
      outcome.survivor = cluster.tool_names.size() == 1 ? cluster.tool_names.front() : "";
      result.outcomes.push_back(std::move(outcome));
      continue;
    }

    // Highest invocation count wins the fallback; ties go to the smallest name.
    std::string busiest;
    for (const auto& n : cluster.tool_names) {
      if (busiest.empty() || stats_of(n).invocations > stats_of(busiest).invocations ||
          (stats_of(n).invocations == stats_of(busiest).invocations && n < busiest)) {
        busiest = n;
      }
    }
    const std::set<std::string> members(cluster.tool_names.begin(), cluster.tool_names.end());
    std::string master = is_snake_case(cluster.suggested_master_tool_name) ? cluster.suggested_master_tool_name : busiest;
    if (taken.count(master) && !members.count(master)) {
      std::set<std::string> others;
      for (const auto& t : taken) {
        if (!members.count(t)) others.insert(t);
      }
      master = fresh_name(master, others);
    }

    nlohmann::json tools = nlohmann::json::array();
    for (std::size_t i = 0; i < cluster.tool_names.size(); ++i) {
      const auto& n = cluster.tool_names[i];
      auto l = locals.find(n);
      tools.push_back({{"idx", i + 1}, {"name", n},
                       {"code", l != locals.end() ? l->second->artifact.source : global.records().at(n).source}});
    }
    ChatExchange ex;
    ex.messages = {{MessageRole::user, prompts.render(PromptRole::merger, {{"tools", tools}, {"suggest_name", master}})}};
    ex.agent_role = AgentRole::merger;
    ex.scope = "merge:" + join_sorted(cluster.tool_names);

    nlohmann::json event = {{"origin", "merge"}, {"tool", master}, {"members", cluster.tool_names}};
    std::optional<ToolArtifact> merged;
    try {
      ++result.merger_calls;
      auto reply = gateway.complete(std::move(ex), sink).text;
      auto source = parse_single_code_block(reply);
      auto artifact = validate_artifact(source, request_from_source(source, master));
      runner.provision(artifact);
      merged = std::move(artifact);
      event["passed"] = true;
    } catch (const std::exception& e) {
      outcome.reason = e.what();
      event["passed"] = false;
      event["error"] = outcome.reason;
    }
    sink.emit(EventKind::validation, std::move(event));

    ToolStats total;
    for (const auto& n : cluster.tool_names) total += stats_of(n);

    if (merged) {
      ToolRecord r;
      r.name = master;
      r.description = merged->meta.description;
      r.input_schema = merged->input_schema;
      r.output_schema = merged->output_schema;
      r.dependencies = merged->meta.dependencies;
      r.source = merged->source;
      r.digest = merged->digest;
      r.provenance.kind = ProvenanceKind::merged;
      r.provenance.step = step;
      r.provenance.members = cluster.tool_names;
      std::sort(r.provenance.members.begin(), r.provenance.members.end());
      r.stats = total;
      for (const auto& n : cluster.tool_names) retire(n, master);
      result.update.tools.push_back(std::move(r));
      outcome.kind = ClusterOutcome::Kind::merged;
      outcome.survivor = master;
      taken.insert(master);
    } else {
      outcome.kind = ClusterOutcome::Kind::fallback;
      outcome.survivor = busiest;
      for (const auto& n : cluster.tool_names) {
        if (n != busiest) result.update.aliases[n] = busiest;
      }
      if (auto l = locals.find(busiest); l != locals.end()) {
        auto r = record_from_local(*l->second, step);
        r.stats = total;
        result.update.tools.push_back(std::move(r));
      } else {
        ToolStats delta = total;
        const auto& base = global.records().at(busiest).stats;
        delta.invocations -= base.invocations;
        delta.successes -= base.successes;
        delta.tool_output_tokens -= base.tool_output_tokens;
        result.update.stats[busiest] += delta;
      }
    }
    result.outcomes.push_back(std::move(outcome));
  }

  auto outcomes = nlohmann::json::array();
  for (const auto& o : result.outcomes) {
    nlohmann::json j = {{"kind", to_string(o.kind)}, {"members", o.members}, {"survivor", o.survivor}};
    if (!o.reason.empty()) j["reason"] = o.reason;
    outcomes.push_back(std::move(j));
  }
  sink.emit(EventKind::absorb, {{"step", step},
                                {"skipped", false},
                                {"candidates", candidates},
                                {"plan", to_json(result.plan)},
                                {"degraded", result.degraded},
                                {"error", result.degraded ? nlohmann::json(last_error) : nlohmann::json(nullptr)},
                                {"outcomes", outcomes},
                                {"aggregator_calls", result.aggregator_calls},
                                {"merger_calls", result.merger_calls}});
  return result;
}

std::vector<std::vector<QueryJob>> partition_stream(const std::vector<QueryJob>& stream, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  std::vector<std::vector<QueryJob>> batches;
  for (std::size_t i = 0; i < stream.size(); i += batch_size) {
    batches.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(i),
                         stream.begin() + static_cast<std::ptrdiff_t>(std::min(stream.size(), i + batch_size)));
  }
  return batches;
}

EvolutionEngine::EvolutionEngine(Gateway& gateway, ToolRunner& runner, const PromptSuite& prompts,
                                 EvolutionConfig config)
    : gateway_(gateway), runner_(runner), prompts_(prompts), config_(std::move(config)) {
  if (config_.batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (config_.worker_cap == 0) config_.worker_cap = 1;
}

BatchReport EvolutionEngine::run_batch(SnapshotPtr snapshot, const std::vector<QueryJob>& batch,
                                       std::size_t batch_index, std::uint64_t cumulative_before, EventSink& trace) {
  auto ids = nlohmann::json::array();
  for (const auto& q : batch) ids.push_back(q.query_id);
  trace.emit(EventKind::batch_boundary, {{"phase", "start"},
                                         {"batch", batch_index},
                                         {"step", snapshot->step()},
                                         {"queries", ids},
                                         {"library_size", snapshot->size()},
                                         {"listing_digest", listing_digest(*snapshot)}});

  std::vector<QueryOutcome> outcomes(batch.size());
  std::vector<EventBuffer> buffers(batch.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < batch.size(); i = next++) {
      WorkflowContext ctx{*snapshot, gateway_, runner_, prompts_, config_.workflow, buffers[i]};
      try {
        outcomes[i] = run_query(batch[i], ctx);
      } catch (const std::exception& e) {
        outcomes[i].query_id = batch[i].query_id;
        outcomes[i].answer = {std::string(kIncompleteAnswer), std::string("internal error: ") + e.what()};
        outcomes[i].failure_reason = e.what();
        outcomes[i].sample.query_id = batch[i].query_id;
      }
    }
  };
  const std::size_t n = std::min(batch.size(), config_.worker_cap);
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Barrier.
  BatchReport report;
  report.batch_index = batch_index;
  std::vector<LocalTool> locals;
  std::map<std::string, ToolStats> usage;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    buffers[i].drain_into(trace);
    report.batch_sums.add(outcomes[i].sample);
    for (const auto& l : outcomes[i].local_tools) locals.push_back(l);
    for (const auto& [name, s] : outcomes[i].global_usage) usage[name] += s;
  }
  AbsorbInput input{*snapshot, disambiguate_locals(*snapshot, std::move(locals)), std::move(usage)};
  auto absorbed = absorb(input, gateway_, runner_, prompts_, config_.absorb, trace);
  report.snapshot = commit_union(*snapshot, absorbed.update);

  auto added = nlohmann::json::array();
  for (const auto& t : absorbed.update.tools) added.push_back(t.name);
  const std::uint64_t cumulative = cumulative_before + batch.size();
  trace.emit(EventKind::commit, {{"step", report.snapshot->step()},
                                 {"library_size", report.snapshot->size()},
                                 {"cumulative_queries", cumulative},
                                 {"added", added},
                                 {"aliases", absorbed.update.aliases},
                                 {"listing_digest", listing_digest(*report.snapshot)}});
  trace.emit(EventKind::batch_boundary, {{"phase", "end"}, {"batch", batch_index}, {"queries", batch.size()}});
  report.outcomes = std::move(outcomes);
  return report;
}

StreamResult EvolutionEngine::run_stream(SnapshotPtr state0, const std::vector<QueryJob>& stream, EventSink& trace,
                                         StreamSink& sink, const StreamOptions& options) {
  StreamResult result;
  result.snapshot = state0 ? std::move(state0) : RegistrySnapshot::empty();
  result.stream_offset = options.start_offset;
  result.cumulative = options.start_sums;
  std::size_t batch_index = options.start_batch;

  auto checkpoint = [&](StreamStatus status, std::string error) {
    result.status = status;
    result.error = std::move(error);
    sink.on_checkpoint({result.stream_offset, batch_index, result.snapshot, result.cumulative});
    return result;
  };

  if (options.start_offset > stream.size()) throw std::invalid_argument("start offset beyond the end of the stream");
  std::vector<QueryJob> rest(stream.begin() + static_cast<std::ptrdiff_t>(options.start_offset), stream.end());
  for (const auto& batch : partition_stream(rest, config_.batch_size)) {
    BatchReport report;
    try {
      report = run_batch(result.snapshot, batch, batch_index, result.cumulative.queries, trace);
    } catch (const std::exception& e) {
      return checkpoint(StreamStatus::aborted, e.what());
    }
    result.snapshot = report.snapshot;
    result.stream_offset += batch.size();
    result.cumulative += report.batch_sums;
    ++batch_index;
    report.stream_offset = result.stream_offset;
    report.cumulative = result.cumulative;
    try {
      sink.on_batch(report);
    } catch (const std::exception& e) {
      return checkpoint(StreamStatus::aborted, e.what());
    }
    if (result.stream_offset < stream.size() && options.should_stop && options.should_stop()) {
      return checkpoint(StreamStatus::stopped, "stopped at batch barrier");
    }
  }
  result.status = StreamStatus::completed;
  return result;
}

}  // namespace insitu
