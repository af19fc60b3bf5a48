#include "insitu/run_config.hpp"

#include "insitu/digest.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace insitu {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

nlohmann::json sums_json(const MetricSums& s) {
  return {{"queries", s.queries}, {"c", s.c}, {"u", s.u}, {"successes", s.successes}, {"tool_tokens", s.tool_tokens}};
}

MetricSums sums_from_json(const nlohmann::json& j) {
  MetricSums s;
  s.queries = j.at("queries").get<std::uint64_t>();
  s.c = j.at("c").get<std::uint64_t>();
  s.u = j.at("u").get<std::uint64_t>();
  s.successes = j.at("successes").get<std::uint64_t>();
  s.tool_tokens = j.at("tool_tokens").get<std::uint64_t>();
  return s;
}

// Keeps the first `n` lines of a file.
void truncate_lines(const fs::path& p, std::size_t n) {
  if (!fs::exists(p)) {
    write_text(p, "");
    return;
  }
  std::istringstream in(read_text(p));
  std::string kept, line;
  for (std::size_t i = 0; i < n && std::getline(in, line); ++i) kept += line + "\n";
  write_text(p, kept);
}

std::shared_ptr<ChatProvider> make_provider(const RunConfig& c) {
  if (c.provider == "scripted") return std::make_shared<ScriptedProvider>(load_script(c.script));
  LiveProviderConfig live;
  live.base_url = c.endpoint;
  live.path_prefix = c.api_prefix;
  live.api_key_env = c.api_key_env;
  live.timeout = std::chrono::seconds(c.request_timeout_s);
  live.max_attempts = c.request_attempts;
  return std::make_shared<OpenAICompatibleProvider>(live);
}

SandboxConfig sandbox_config(const RunConfig& c) {
  SandboxConfig s;
  s.harness = c.harness;
  s.limits.timeout = std::chrono::seconds(c.tool_timeout_s);
  s.limits.max_output_bytes = c.max_output_bytes;
  s.max_concurrent = c.max_concurrent_tools;
  s.env_allowlist = c.env_allowlist;
  s.confine_writes = c.confine_writes;
  s.work_root = c.out_dir / "scratch";
  s.provision.python = c.python;
  if (c.provision == "index") {
    s.provision.mode = ProvisionMode::index;
    std::istringstream in(read_text(c.package_index));
    std::string line;
    while (std::getline(in, line)) {
      auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos || line[b] == '#') continue;
      auto e = line.find_last_not_of(" \t\r");
      std::string name = line.substr(b, e - b + 1);
      std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) {
        return ch == '_' || ch == '.' ? '-' : static_cast<char>(std::tolower(ch));
      });
      s.provision.index.insert(name);
    }
  } else if (c.provision == "pip") {
    s.provision.mode = ProvisionMode::pip;
    s.provision.cache_dir = c.env_cache;
  }
  return s;
}

class RunSink final : public StreamSink {
 public:
  RunSink(const RunPaths& paths, TraceWriter& trace, std::ostream& out)
      : paths_(paths), trace_(trace), out_(out), committed_seq_(trace.next_seq()) {}

  void on_batch(const BatchReport& r) override {
    std::ofstream answers(paths_.answers, std::ios::app | std::ios::binary);
    for (const auto& o : r.outcomes) {
      nlohmann::json row = {{"query_id", o.query_id},
                            {"final_answer", o.answer.final_answer},
                            {"reasoning_summary", o.answer.reasoning_summary},
                            {"completed", o.completed}};
      answers << row.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
    }
    answers.close();
    if (!answers) throw std::runtime_error("cannot append to " + paths_.answers.string());
    committed_seq_ = trace_.next_seq();
    ++batches_;
    out_ << "batch " << r.batch_index << ": " << r.outcomes.size() << " queries, library " << r.snapshot->size()
         << " tools, EGL " << format_metric(compute_egl(r.cumulative)) << "\n";
  }

  void on_checkpoint(const Checkpoint& cp) override {
    fs::create_directories(paths_.checkpoint_dir);
    persist(*cp.snapshot, paths_.checkpoint_dir / "library");
    nlohmann::json doc = {{"format_version", 1},
                          {"stream_offset", cp.stream_offset},
                          {"batches_done", cp.batches_done},
                          {"step", cp.snapshot->step()},
                          {"snapshot_path", "library"},
                          {"trace_events", committed_seq_},
                          {"cumulative", sums_json(cp.cumulative)}};
    write_text(paths_.checkpoint_file, doc.dump(2) + "\n");
  }

  std::size_t batches() const { return batches_; }

 private:
  const RunPaths& paths_;
  TraceWriter& trace_;
  std::ostream& out_;
  std::uint64_t committed_seq_;
  std::size_t batches_ = 0;
};

}  // namespace

int cmd_run(const RunConfig& config, std::ostream& out, std::ostream& err, const std::atomic<bool>* interrupt) {
  if (auto errors = validate(config); !errors.empty()) {
    for (const auto& e : errors) err << "config error: " << e << "\n";
    return kExitError;
  }
  try {
    const RunPaths paths(config.out_dir);
    fs::create_directories(config.out_dir);

    auto stream = load_stream(config.stream);
    auto provider = make_provider(config);
    RoutingConfig routing;
    routing.default_model = config.model;
    routing.temperature = config.temperature;
    for (const auto& [role, model] : config.role_models) routing.role_models[*parse_role(role)] = model;
    Gateway gateway(provider, routing);
    Sandbox sandbox(sandbox_config(config));
    const auto& prompts = PromptSuite::canonical();

    const bool logical = config.clock == "logical" || (config.clock == "auto" && config.provider == "scripted");
    const Clock clock = logical ? Clock::logical() : Clock::wall();

    SnapshotPtr state0;
    StreamOptions options;
    std::optional<TraceWriter> trace;
    if (config.resume) {
      if (!fs::exists(paths.checkpoint_file)) {
        err << "config error: resume: no checkpoint at " << paths.checkpoint_file << "\n";
        return kExitError;
      }
      auto cp = nlohmann::json::parse(read_text(paths.checkpoint_file));
      state0 = load(paths.checkpoint_dir / cp.at("snapshot_path").get<std::string>());
      options.start_offset = cp.at("stream_offset").get<std::size_t>();
      options.start_batch = cp.at("batches_done").get<std::size_t>();
      options.start_sums = sums_from_json(cp.at("cumulative"));
      truncate_lines(paths.trace, cp.at("trace_events").get<std::size_t>());
      truncate_lines(paths.answers, options.start_offset);
      trace.emplace(TraceWriter::resume(paths.trace, clock));
    } else {
      state0 = config.mode == RunMode::warm_start ? load(config.library_in) : RegistrySnapshot::empty();
      write_text(paths.answers, "");
      fs::remove_all(paths.checkpoint_dir);
      trace.emplace(paths.trace, clock);
    }

    nlohmann::json checksums = nlohmann::json::object();
    for (const auto& [role, sum] : prompts.checksums()) checksums[std::string(to_string(role))] = sum;
    trace->emit(EventKind::header, {{"format_version", kTraceFormatVersion},
                                    {"config", to_json(config)},
                                    {"prompt_checksums", checksums},
                                    {"stream_queries", stream.size()},
                                    {"resumed", config.resume},
                                    {"start_offset", options.start_offset},
                                    {"initial_library_size", state0->size()}});

    EvolutionConfig ec;
    ec.batch_size = config.batch_size;
    ec.worker_cap = config.workers;
    ec.workflow.budgets = config.budgets;
    ec.absorb = config.absorb;
    EvolutionEngine engine(gateway, sandbox, prompts, ec);

    RunSink sink(paths, *trace, out);
    options.should_stop = [&] {
      if (interrupt && interrupt->load()) return true;
      return config.stop_after_batches > 0 && sink.batches() >= config.stop_after_batches;
    };
    auto result = engine.run_stream(state0, stream, *trace, sink, options);

    if (result.status != StreamStatus::completed) {
      err << (result.status == StreamStatus::stopped ? "stopped" : "aborted") << " after " << result.stream_offset
          << " of " << stream.size() << " queries";
      if (!result.error.empty()) err << ": " << result.error;
      err << "\ncheckpoint written to " << paths.checkpoint_file << "; rerun with --resume to continue\n";
      return kExitPartial;
    }

    persist(*result.snapshot, paths.library);
    fs::remove_all(paths.checkpoint_dir);
    auto metrics = replay_file(paths.trace);
    export_curves(metrics, paths.exports, {config.egl_window});
    auto usage = gateway.usage();
    nlohmann::json summary = {{"queries", stream.size()},
                              {"library_size", result.snapshot->size()},
                              {"step", result.snapshot->step()},
                              {"metrics", to_json(metrics)},
                              {"llm_calls", usage.calls},
                              {"prompt_tokens", usage.prompt_tokens},
                              {"completion_tokens", usage.completion_tokens}};
    summary["metrics"].erase("samples");
    write_text(paths.summary, summary.dump(2) + "\n");
    out << "final EGL: " << format_metric(metrics.egl) << "\n"
        << "library size: " << result.snapshot->size() << "\n"
        << "tool success rate: " << format_metric(metrics.success_rate) << "\n"
        << "avg tokens per invocation: " << format_metric(metrics.avg_tokens) << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

int cmd_inspect(const fs::path& library, std::ostream& out, std::ostream& err) {
  SnapshotPtr snap;
  try {
    snap = load(library);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  std::vector<const ToolRecord*> rows;
  for (const auto& [_, r] : snap->records()) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](const ToolRecord* a, const ToolRecord* b) {
    return a->stats.invocations > b->stats.invocations;
  });
  out << "step " << snap->step() << ", " << rows.size() << " tools, " << snap->aliases().size() << " aliases\n";
  out << std::left << std::setw(28) << "name" << std::right << std::setw(12) << "invocations" << std::setw(11)
      << "successes" << "  " << std::left << std::setw(26) << "provenance" << "description\n";
  for (const auto* r : rows) {
    std::string prov = std::string(to_string(r->provenance.kind)) + "@" + std::to_string(r->provenance.step);
    if (r->provenance.kind == ProvenanceKind::synthesized) prov += " " + r->provenance.query_id;
    if (r->provenance.kind == ProvenanceKind::merged) prov += " x" + std::to_string(r->provenance.members.size());
    auto desc = r->description.size() > 60 ? r->description.substr(0, 57) + "..." : r->description;
    out << std::left << std::setw(28) << r->name << std::right << std::setw(12) << r->stats.invocations
        << std::setw(11) << r->stats.successes << "  " << std::left << std::setw(26) << prov << desc << "\n";
  }
  return kExitOk;
}

int cmd_validate_tool(const fs::path& source, const std::optional<fs::path>& request, std::ostream& out,
                      std::ostream& err) {
  std::string text;
  try {
    text = read_text(source);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  try {
    ToolRequest req = request ? parse_tool_request(nlohmann::json::parse(read_text(*request)))
                              : request_from_source(text, "");
    auto artifact = validate_artifact(text, req);
    out << "valid: " << artifact.meta.name << " sha256=" << artifact.digest << "\n";
    std::string deps;
    for (const auto& d : artifact.meta.dependencies) deps += (deps.empty() ? "" : ", ") + d;
    out << "dependencies: " << (deps.empty() ? "(none)" : deps) << "\n";
    return kExitOk;
  } catch (const ArtifactValidationError& e) {
    out << "invalid: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

int cmd_replay(const fs::path& trace, std::ostream& out, std::ostream& err) {
  try {
    out << to_json(replay_file(trace)).dump(2) << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

int cmd_export(const fs::path& trace, const fs::path& out_dir, std::size_t egl_window, std::ostream& out,
               std::ostream& err) {
  try {
    for (const auto& p : export_curves(replay_file(trace), out_dir, {egl_window})) out << p.string() << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace insitu
