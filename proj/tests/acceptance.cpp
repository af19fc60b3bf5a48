// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "insitu/process.hpp"
#include "insitu/run_config.hpp"

#include "support.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

using namespace insitu;
using nlohmann::json;
using testsupport::read_file;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

class Failed : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Failed(what);
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 6) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

// Independent oracle: long double summation, no shared code with metrics.
std::optional<long double> egl_oracle(const std::vector<QuerySample>& samples) {
  long double c = 0, u = 0;
  for (const auto& s : samples) {
    for (std::uint64_t i = 0; i < s.c; ++i) c += 1;
    for (std::uint64_t i = 0; i < s.u; ++i) u += 1;
  }
  if (u == 0) return std::nullopt;
  return c / u * 1000.0L;
}

std::vector<QuerySample> random_samples(std::mt19937& rng, std::size_t n) {
  std::vector<QuerySample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].query_id = "q" + std::to_string(i);
    out[i].c = rng() % 4;
    out[i].u = rng() % 6;
    out[i].successes = out[i].u ? rng() % (out[i].u + 1) : 0;
    out[i].tool_tokens = out[i].u * (1 + rng() % 20);
  }
  return out;
}

Verdict egl_oracle_equivalence() {
  auto t0 = Clock::now();
  std::mt19937 rng(20261018);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto samples = random_samples(rng, 1 + rng() % 40);
    auto got = compute_egl(samples);
    auto want = egl_oracle(samples);
    require(got.has_value() == want.has_value(), "definedness differs at trial " + std::to_string(trial));
    if (!got) continue;
    const double err = std::fabs(static_cast<double>(*got - static_cast<double>(*want)));
    worst = std::max(worst, err);
    require(err <= 1e-9, "oracle mismatch at trial " + std::to_string(trial));

    auto shuffled = samples;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    require(compute_egl(shuffled) == got, "permutation changed EGL at trial " + std::to_string(trial));

    const int k = 2 + static_cast<int>(rng() % 4);
    std::vector<QuerySample> replicated;
    for (int r = 0; r < k; ++r) replicated.insert(replicated.end(), samples.begin(), samples.end());
    require(compute_egl(replicated) == got, "replication changed EGL at trial " + std::to_string(trial));
  }
  const double secs = seconds_since(t0);
  require(secs < 5.0, "took " + fmt(secs) + " s");
  return {true, "1000 sets, max |err| " + fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

Verdict pure_reuse_decay() {
  std::mt19937 rng(7);
  int cases = 0;
  while (cases < 1000) {
    auto samples = random_samples(rng, 1 + rng() % 20);
    auto before = compute_egl(samples);
    if (!before || *before <= 0) continue;
    QuerySample reuse;
    reuse.query_id = "reuse";
    reuse.u = 1 + rng() % 5;
    reuse.successes = reuse.u;
    samples.push_back(reuse);
    auto after = compute_egl(samples);
    require(after && *after < *before, "EGL did not decrease in case " + std::to_string(cases));
    ++cases;
  }
  return {true, "1000 cases"};
}

// Cached artifacts so fixtures stay cheap.
const ToolArtifact& artifact_for(const std::string& name) {
  static std::map<std::string, ToolArtifact> cache;
  static std::mutex mu;
  std::lock_guard lock(mu);
  auto it = cache.find(name);
  if (it == cache.end()) {
    it = cache.emplace(name, validate_artifact(testsupport::simple_tool(name), testsupport::simple_request(name))).first;
  }
  return it->second;
}

LocalTool local_tool(const std::string& name, const std::string& q, std::uint64_t invocations) {
  return {artifact_for(name), q, {invocations, invocations, 2 * invocations}};
}

std::string absorb_scope(std::vector<std::string> names) {
  std::sort(names.begin(), names.end());
  std::string s = "absorb:";
  for (std::size_t i = 0; i < names.size(); ++i) s += (i ? "," : "") + names[i];
  return s;
}

// Exactly-once over the candidates, judged by counting.
bool is_true_partition(const json& clusters, const std::vector<std::string>& candidates) {
  std::map<std::string, int> count;
  for (const auto& c : clusters) {
    if (c.at("tool_names").empty()) return false;
    for (const auto& n : c.at("tool_names")) ++count[n.get<std::string>()];
  }
  if (count.size() != candidates.size()) return false;
  for (const auto& name : candidates) {
    auto it = count.find(name);
    if (it == count.end() || it->second != 1) return false;
  }
  return true;
}

Verdict partition_completeness() {
  auto t0 = Clock::now();
  std::mt19937 rng(99);
  int accepted = 0, rejected = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 8);
    std::vector<std::string> names;
    std::vector<LocalTool> locals;
    for (int i = 0; i < n; ++i) {
      names.push_back("tool_" + std::to_string(i));
      locals.push_back(local_tool(names.back(), "q" + std::to_string(i), 1));
    }
    std::vector<std::vector<std::string>> groups(1 + rng() % n);
    for (const auto& name : names) groups[rng() % groups.size()].push_back(name);
    std::erase_if(groups, [](const auto& g) { return g.empty(); });
    switch (rng() % 6) {
      case 0: break;  // true partition
      case 1: groups[rng() % groups.size()].push_back(names[rng() % n]); break;   // duplicate
      case 2: groups.push_back({names[rng() % n]}); break;                         // duplicate across
      case 3: groups[rng() % groups.size()].pop_back(); break;                     // omission
      case 4: groups.push_back({"invented_tool"}); break;                          // unknown
      case 5: if (rng() % 2) groups.push_back({}); break;                          // empty cluster
    }
    json clusters = json::array();
    int id = 0;
    for (const auto& g : groups) {
      clusters.push_back({{"cluster_id", "c" + std::to_string(++id)},
                          {"suggested_master_tool_name", g.empty() ? "empty" : g.front()},
                          {"tool_names", g}});
    }
    const bool truth = is_true_partition(clusters, names);
    const std::string reply = testsupport::fence("json", json{{"consolidated_tool_clusters", clusters}}.dump(2));

    bool valid = false;
    try {
      valid = !validate_partition(parse_cluster_plan(reply), names).has_value();
    } catch (const ParseError&) {
      valid = false;  // the parser already refuses empty clusters
    }
    require(valid == truth,
            "validation disagrees with the oracle at trial " + std::to_string(trial));

    // Through the absorbing step with a scripted aggregator and no retries.
    Gateway gw(std::make_shared<ScriptedProvider>(
        std::vector<ScriptEntry>{testsupport::keyed(AgentRole::aggregator, absorb_scope(names), 0, reply)}));
    testsupport::FakeRunner runner;
    NullSink sink;
    AbsorbConfig cfg;
    cfg.aggregator_retries = 0;
    auto r = absorb({*RegistrySnapshot::empty(), locals, {}}, gw, runner, PromptSuite::canonical(), cfg, sink);
    require(r.degraded == !truth, "absorb acceptance disagrees with the oracle at trial " + std::to_string(trial));
    json used = json::array();
    for (const auto& c : r.plan.clusters) used.push_back({{"tool_names", c.tool_names}});
    require(is_true_partition(used, names), "absorb used a non-partition at trial " + std::to_string(trial));
    (truth ? accepted : rejected)++;
  }
  const double secs = seconds_since(t0);
  require(secs < 10.0, "took " + fmt(secs) + " s");
  return {true, std::to_string(accepted) + " accepted, " + std::to_string(rejected) + " rejected, " + fmt(secs, 3) +
                    " s"};
}

Verdict all_singleton_equivalence() {
  std::mt19937 rng(1234);
  for (int trial = 0; trial < 100; ++trial) {
    std::map<std::string, ToolRecord> records;
    const int g = static_cast<int>(rng() % 5);
    for (int i = 0; i < g; ++i) {
      auto r = testsupport::simple_record("global_" + std::to_string(i), 1 + rng() % 3);
      r.stats = {rng() % 9, 0, rng() % 50};
      records.emplace(r.name, r);
    }
    auto global = std::make_shared<RegistrySnapshot>(3, records, std::map<std::string, std::string>{});
    std::vector<LocalTool> locals;
    std::vector<std::string> local_names, all;
    const int l = 1 + static_cast<int>(rng() % 5);
    for (int i = 0; i < l; ++i) {
      locals.push_back(local_tool("local_" + std::to_string(i), "q" + std::to_string(i), rng() % 6));
      local_names.push_back(locals.back().artifact.meta.name);
    }
    std::map<std::string, ToolStats> usage;
    for (const auto& [name, _] : records) {
      all.push_back(name);
      if (rng() % 2) usage[name] = {1 + rng() % 3, 1, 5};
    }
    all.insert(all.end(), local_names.begin(), local_names.end());
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<std::pair<std::string, std::vector<std::string>>> clusters;
    for (const auto& n : all) clusters.push_back({n, {n}});

    Gateway gw(std::make_shared<ScriptedProvider>(std::vector<ScriptEntry>{
        testsupport::keyed(AgentRole::aggregator, absorb_scope(local_names), 0, testsupport::cluster_reply(clusters))}));
    testsupport::FakeRunner runner;
    NullSink sink;
    auto r = absorb({*global, locals, usage}, gw, runner, PromptSuite::canonical(), {}, sink);
    require(!r.degraded && r.merger_calls == 0, "singleton plan was not taken at trial " + std::to_string(trial));

    UnionUpdate plain;
    for (const auto& lt : locals) plain.tools.push_back(record_from_local(lt, global->step() + 1));
    plain.stats = usage;
    require(*commit_union(*global, r.update) == *commit_union(*global, plain),
            "snapshot differs from plain union at trial " + std::to_string(trial));
  }
  return {true, "100 fixtures"};
}

// ---------------------------------------------------------------------------
// Scripted end-to-end runs

RunConfig scenario(const std::string& name, const fs::path& out, std::size_t batch) {
  RunConfig c;
  c.script = fs::path(INSITU_SCENARIO_DIR) / (name + "_script.json");
  c.stream = fs::path(INSITU_SCENARIO_DIR) / (name + "_stream.jsonl");
  c.harness = testsupport::harness();
  c.out_dir = out;
  c.batch_size = batch;
  c.tool_timeout_s = 30;
  return c;
}

void run_ok(const RunConfig& c) {
  std::ostringstream out, err;
  const int code = cmd_run(c, out, err);
  require(code == 0, "run exited " + std::to_string(code) + ": " + err.str());
}

std::map<std::string, std::string> dir_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  }
  return out;
}

std::vector<json> answers_of(const fs::path& out_dir) {
  std::vector<json> out;
  std::istringstream in(read_file(RunPaths(out_dir).answers));
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

struct Shared {
  TempDir dir;
  bool evolution_ok = false;
};

Verdict deterministic_evolution(Shared& shared) {
  auto c = scenario("evolution", shared.dir / "b4", 4);
  auto t0 = Clock::now();
  run_ok(c);
  const double secs = seconds_since(t0);
  const RunPaths p(c.out_dir);

  auto lib = load(p.library);
  require(lib->size() == 0 + 3, "library size " + std::to_string(lib->size()));
  auto events = read_trace(p.trace);
  int synthesized = 0, merged = 0;
  for (const auto& e : events) {
    if (e.kind == EventKind::validation && e.payload.value("origin", "") == "develop" &&
        e.payload.value("passed", false)) {
      ++synthesized;
    }
    if (e.kind == EventKind::absorb && e.payload.contains("outcomes")) {
      for (const auto& o : e.payload.at("outcomes")) merged += o.at("kind") == "merged";
    }
  }
  require(synthesized == 5, std::to_string(synthesized) + " tools synthesized");
  require(merged == 2, std::to_string(merged) + " merges");

  auto stream = load_stream(c.stream);
  auto answers = answers_of(c.out_dir);
  require(answers.size() == stream.size(), "answer count");
  for (std::size_t i = 0; i < stream.size(); ++i) {
    require(answers[i].at("query_id") == stream[i].query_id, "answers out of order at " + std::to_string(i));
  }

  const auto trace1 = read_file(p.trace);
  const auto exports1 = dir_contents(p.exports);
  run_ok(c);
  require(read_file(p.trace) == trace1, "trace differs on rerun");
  require(dir_contents(p.exports) == exports1, "exports differ on rerun");
  require(secs < 60.0, "took " + fmt(secs) + " s");
  shared.evolution_ok = true;
  return {true, "5 synthesized, 2 merged, library 3, " + std::to_string(exports1.size()) + " export files identical, " +
                    fmt(secs, 3) + " s"};
}

Verdict warm_start_transfer(Shared& shared) {
  require(shared.evolution_ok, "depends on the evolution run");
  const auto persisted = RunPaths(shared.dir / "b4").library;
  auto reloaded = load(persisted);
  auto c = scenario("warm", shared.dir / "warm", 4);
  c.mode = RunMode::warm_start;
  c.library_in = persisted;
  run_ok(c);
  auto metrics = replay_file(RunPaths(c.out_dir).trace);
  std::uint64_t created = 0, used = 0;
  for (const auto& s : metrics.samples) {
    created += s.c;
    used += s.u;
  }
  require(created == 0, std::to_string(created) + " new tools");
  require(used > 0, "no tool was reused");
  auto after = load(RunPaths(c.out_dir).library);
  require(listing_text(*after) == listing_text(*reloaded), "listing changed");
  return {true, "0 new tools, " + std::to_string(used) + " reuses, listing unchanged"};
}

Verdict batch_one_reduction(Shared& shared) {
  require(shared.evolution_ok, "depends on the evolution run");
  auto c = scenario("evolution", shared.dir / "b1", 1);
  run_ok(c);
  std::set<std::pair<std::string, std::string>> a, b;
  for (const auto& j : answers_of(shared.dir / "b4")) a.emplace(j.at("query_id").get<std::string>(), j.at("final_answer").get<std::string>());
  for (const auto& j : answers_of(c.out_dir)) b.emplace(j.at("query_id").get<std::string>(), j.at("final_answer").get<std::string>());
  require(a == b, "answer sets differ");
  auto b4 = load(RunPaths(shared.dir / "b4").library);
  auto b1 = load(RunPaths(c.out_dir).library);
  for (const auto& [name, _] : b4->records()) {
    try {
      b1->resolve(name);
    } catch (const ResolutionError&) {
      require(false, "B=1 library lacks '" + name + "'");
    }
  }
  return {true, "12 answers equal, " + std::to_string(b4->size()) + " names covered (B=1 library " +
                    std::to_string(b1->size()) + " tools, " + std::to_string(b1->aliases().size()) + " aliases)"};
}

// ---------------------------------------------------------------------------
// Concurrency

class JitterProvider final : public ChatProvider {
 public:
  JitterProvider(std::shared_ptr<ChatProvider> inner, unsigned seed) : inner_(std::move(inner)), rng_(seed) {}
  CompletionResult complete(const ChatExchange& ex) override {
    std::this_thread::sleep_for(std::chrono::microseconds(delay()));
    return inner_->complete(ex);
  }
  std::string id() const override { return "jitter"; }
  unsigned delay() {
    std::lock_guard lock(mu_);
    return rng_() % 2000;
  }

 private:
  std::shared_ptr<ChatProvider> inner_;
  std::mutex mu_;
  std::mt19937 rng_;
};

std::vector<ScriptEntry> isolation_script(int queries) {
  using namespace testsupport;
  std::vector<ScriptEntry> s;
  std::vector<std::string> batch_tools;
  for (int i = 1; i <= queries; ++i) {
    const auto q = "q" + std::to_string(i);
    // Odd queries synthesize, even ones reuse the seed tool.
    if (i % 2) {
      const auto tool = "tool_" + std::to_string(i);
      s.push_back(keyed(AgentRole::manager, q, 0, manager_reply({}, {simple_request(tool)})));
      s.push_back(keyed(AgentRole::tool_developer, q, 0, code_reply(simple_tool(tool))));
      s.push_back(keyed(AgentRole::executor, q, 0, action_reply(tool, {{"text", q}})));
      batch_tools.push_back(tool);
    } else {
      s.push_back(keyed(AgentRole::manager, q, 0, manager_reply({"seed_tool"})));
      s.push_back(keyed(AgentRole::executor, q, 0, action_reply("seed_tool", {{"text", q}})));
    }
    s.push_back(keyed(AgentRole::executor, q, 1, report_reply(q)));
    s.push_back(keyed(AgentRole::integrator, q, 0, final_reply(q)));
    if (i % 8 == 0) {
      auto all = batch_tools;
      std::vector<std::pair<std::string, std::vector<std::string>>> clusters;
      for (const auto& t : all) clusters.push_back({t, {t}});
      clusters.push_back({"seed_tool", {"seed_tool"}});
      for (int j = 1; j < i - 7; j += 2) clusters.push_back({"tool_" + std::to_string(j), {"tool_" + std::to_string(j)}});
      s.push_back(keyed(AgentRole::aggregator, absorb_scope(batch_tools), 0, cluster_reply(clusters)));
      batch_tools.clear();
    }
  }
  return s;
}

Verdict snapshot_isolation() {
  const int queries = 24;
  const auto script = isolation_script(queries);
  std::vector<QueryJob> stream;
  for (int i = 1; i <= queries; ++i) stream.push_back({"q" + std::to_string(i), "query " + std::to_string(i)});
  auto seed = std::make_shared<RegistrySnapshot>(
      1, std::map<std::string, ToolRecord>{{"seed_tool", testsupport::simple_record("seed_tool")}},
      std::map<std::string, std::string>{});

  std::optional<std::string> reference;
  for (int rep = 0; rep < 50; ++rep) {
    Gateway gw(std::make_shared<JitterProvider>(std::make_shared<ScriptedProvider>(script), 1000 + rep));
    std::mt19937 tool_rng(rep);
    std::mutex tool_mu;
    testsupport::FakeRunner runner([&](const ToolArtifact&, const json& payload) {
      unsigned d;
      {
        std::lock_guard lock(tool_mu);
        d = tool_rng() % 1500;
      }
      std::this_thread::sleep_for(std::chrono::microseconds(d));
      InvocationResult r;
      r.status = InvocationStatus::ok;
      r.payload = {{"result", payload.value("text", "")}};
      r.output_text = r.payload.dump();
      return r;
    });
    EvolutionConfig cfg;
    cfg.batch_size = 8;
    cfg.worker_cap = 8;
    EvolutionEngine engine(gw, runner, PromptSuite::canonical(), cfg);
    MemoryTrace trace;
    struct : StreamSink {
      void on_batch(const BatchReport& r) override {
        for (const auto& o : r.outcomes) digests[r.batch_index].insert(o.listing_digest);
      }
      void on_checkpoint(const Checkpoint&) override {}
      std::map<std::size_t, std::set<std::string>> digests;
    } sink;
    auto result = engine.run_stream(seed, stream, trace, sink);
    require(result.status == StreamStatus::completed, "stream did not complete in repetition " + std::to_string(rep));
    for (const auto& [batch, digests] : sink.digests) {
      require(digests.size() == 1, "jobs saw different snapshots in batch " + std::to_string(batch));
    }

    // From trace ordering: within each batch, every job event precedes the
    // single commit, which precedes the end boundary.
    const auto events = trace.events();
    std::optional<std::string> start_digest;
    bool committed = false, in_batch = false;
    int commits = 0;
    std::string text;
    for (const auto& e : events) {
      text += e.digest;
      switch (e.kind) {
        case EventKind::batch_boundary:
          if (e.payload.at("phase") == "start") {
            start_digest = e.payload.at("listing_digest").get<std::string>();
            committed = false;
            in_batch = true;
          } else {
            require(committed, "batch ended without a commit");
            in_batch = false;
          }
          break;
        case EventKind::commit:
          require(in_batch && !committed, "commit outside the barrier");
          committed = true;
          ++commits;
          break;
        case EventKind::phase:
          require(in_batch && !committed, "job event after the commit");
          if (e.payload.contains("listing_digest")) {
            require(e.payload.at("listing_digest") == *start_digest, "job observed a different listing");
          }
          break;
        case EventKind::invocation:
        case EventKind::llm_exchange:
        case EventKind::validation:
          if (e.kind != EventKind::llm_exchange || e.payload.value("role", "") != "aggregator") {
            require(in_batch && !committed, "job event outside its batch window");
          }
          break;
        default: break;
      }
    }
    require(commits == queries / 8, "expected one commit per batch");
    if (!reference) reference = text;
    require(text == *reference, "trace differs between repetitions (rep " + std::to_string(rep) + ")");
  }
  return {true, "50 repetitions, 3 batches of 8, identical traces"};
}

// ---------------------------------------------------------------------------
// Sandbox

Verdict sandbox_conformance() {
  TempDir dir;
  SandboxConfig cfg;
  cfg.harness = testsupport::harness();
  cfg.work_root = dir.path();
  Sandbox sandbox(cfg);
  const InvocationLimits limits{std::chrono::seconds(20), 64 * 1024};
  auto fixture = [](const std::string& name) {
    auto src = read_file(testsupport::tool_fixture(name));
    return validate_artifact(src, request_from_source(src, ""));
  };
  std::vector<std::string> notes;
  auto expect = [&](const std::string& label, const InvocationResult& r, InvocationStatus want) {
    require(r.status == want, label + ": got " + std::string(to_string(r.status)) + ", want " +
                                  std::string(to_string(want)) + " " + r.output_text);
    notes.push_back(label + "=" + std::string(to_string(r.status)));
  };

  expect("echo_text", sandbox.invoke(fixture("echo_text"), {{"text", "hi"}}, limits), InvocationStatus::ok);
  expect("scratch_writer", sandbox.invoke(fixture("scratch_writer"), {{"marker", "m"}}, limits), InvocationStatus::ok);
  expect("raise_error", sandbox.invoke(fixture("raise_error"), {{"reason", "r"}}, limits), InvocationStatus::tool_error);
  expect("input_violation", sandbox.invoke(fixture("echo_text"), json::object(), limits), InvocationStatus::tool_error);
  {
    auto src = read_file(testsupport::tool_fixture("bad_output"));
    ToolRequest req{"bad_output", "x", testsupport::object_schema({{"text", "string"}}, {"text"}),
                    testsupport::object_schema({{"count", "integer"}}, {"count"})};
    expect("bad_output", sandbox.invoke(validate_artifact(src, req), {{"text", "x"}}, limits),
           InvocationStatus::protocol_error);
  }
  expect("noisy_stdout", sandbox.invoke(fixture("noisy_stdout"), {{"text", "x"}}, limits),
         InvocationStatus::protocol_error);
  expect("syntax_error", sandbox.invoke(fixture("syntax_error"), {{"text", "x"}}, limits),
         InvocationStatus::protocol_error);
  {
    const InvocationLimits tight{std::chrono::seconds(1), 64 * 1024};
    auto t0 = Clock::now();
    auto r = sandbox.invoke(fixture("sleep_seconds"), {{"seconds", 30}}, tight);
    const double secs = seconds_since(t0);
    expect("sleep_seconds", r, InvocationStatus::timeout);
    require(secs <= 1.0 + 2.0, "timeout fixture took " + fmt(secs) + " s");
    notes.back() += "(" + fmt(secs, 3) + "s)";
  }
  if (write_confinement_available()) {
    TempDir outside;
    auto target = outside / "escaped.txt";
    expect("escape_workspace", sandbox.invoke(fixture("escape_workspace"), {{"target", target.string()}}, limits),
           InvocationStatus::tool_error);
    require(!fs::exists(target), "escape_workspace wrote outside its scratch directory");
  } else {
    notes.push_back("escape_workspace=skipped(no confinement)");
  }
  try {
    auto a = fixture("numpy_mean");
    sandbox.provision(a);
    expect("numpy_mean", sandbox.invoke(a, {{"values", {1, 2, 3}}}, limits), InvocationStatus::ok);
  } catch (const ProvisioningError&) {
    notes.push_back("numpy_mean=unprovisionable");
  }
  for (const char* name : {"missing_meta", "self_install"}) {
    bool rejected = false;
    try {
      fixture(name);
    } catch (const ArtifactValidationError&) {
      rejected = true;
    }
    require(rejected, std::string(name) + " passed validation");
    notes.push_back(std::string(name) + "=rejected");
  }
  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : " ") + n;
  return {true, detail};
}

// ---------------------------------------------------------------------------
// Rate metrics

std::uint64_t ceil_quarter(std::size_t chars) { return (chars + 3) / 4; }

Verdict rate_metrics() {
  TempDir dir;
  auto c = scenario("rate", dir / "rate", 2);
  run_ok(c);
  auto m = replay_file(RunPaths(c.out_dir).trace);
  std::uint64_t u = 0, ok = 0;
  for (const auto& s : m.samples) {
    u += s.u;
    ok += s.successes;
  }
  require(u == 11 && ok == 9, std::to_string(ok) + " of " + std::to_string(u) + " invocations succeeded");
  require(m.success_rate && std::fabs(*m.success_rate - 0.818) <= 0.001,
          "success rate " + (m.success_rate ? fmt(*m.success_rate) : "undefined"));

  // The eleven observations exactly as the executor sees them.
  const std::vector<std::string> outputs = {
      R"({"value":2.0})", R"({"value":42.0})", R"({"kind":"ZeroDivisionError","message":"division by zero"})",
      R"({"value":6.0})", R"({"words":3})",    R"({"kind":"ValueError","message":"text is empty"})",
      R"({"words":2})",   R"({"words":5})",    R"({"value":8.0})",
      R"({"value":3.0})", R"({"value":-2.0})"};
  std::uint64_t tokens = 0;
  for (const auto& o : outputs) tokens += ceil_quarter(o.size());
  const double expected = static_cast<double>(tokens) / static_cast<double>(outputs.size());
  require(m.avg_tokens && *m.avg_tokens == expected,
          "avg tokens " + (m.avg_tokens ? fmt(*m.avg_tokens, 17) : "undefined") + ", expected " + fmt(expected, 17));
  return {true, "success rate " + fmt(*m.success_rate) + " (9/11), avg tokens " + std::to_string(tokens) + "/11 = " +
                    fmt(expected)};
}

// Optional: one round trip against a configured endpoint.
std::optional<Verdict> live_smoke() {
  const char* endpoint = std::getenv("INSITU_LIVE_ENDPOINT");
  if (!endpoint || !*endpoint) return std::nullopt;
  LiveProviderConfig cfg;
  cfg.base_url = endpoint;
  cfg.api_key_env = std::getenv("INSITU_LIVE_KEY_ENV") ? std::getenv("INSITU_LIVE_KEY_ENV") : "OPENAI_API_KEY";
  RoutingConfig routing;
  if (const char* model = std::getenv("INSITU_LIVE_MODEL")) routing.default_model = model;
  Gateway gw(std::make_shared<OpenAICompatibleProvider>(cfg), routing);
  ChatExchange ex;
  ex.agent_role = AgentRole::integrator;
  ex.messages = {{MessageRole::user, "Reply with the single word: ready"}};
  NullSink sink;
  auto r = gw.complete(ex, sink);
  require(!r.text.empty(), "empty completion");
  return Verdict{true, "completion of " + std::to_string(r.text.size()) + " chars"};
}

}  // namespace

int main() {
  Shared shared;
  std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"egl-oracle-equivalence", egl_oracle_equivalence},
      {"pure-reuse-decay", pure_reuse_decay},
      {"absorb-partition-completeness", partition_completeness},
      {"all-singleton-equivalence", all_singleton_equivalence},
      {"deterministic-evolution", [&] { return deterministic_evolution(shared); }},
      {"warm-start-transfer", [&] { return warm_start_transfer(shared); }},
      {"batch-one-reduction", [&] { return batch_one_reduction(shared); }},
      {"snapshot-isolation", snapshot_isolation},
      {"sandbox-protocol-conformance", sandbox_conformance},
      {"success-rate-and-tokens", rate_metrics},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, e.what()};
    }
    failures += !v.pass;
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
  }
  try {
    if (auto v = live_smoke()) {
      failures += !v->pass;
      std::cout << (v->pass ? "PASS " : "FAIL ") << "live-smoke: " << v->detail << std::endl;
    } else {
      std::cout << "SKIP live-smoke: INSITU_LIVE_ENDPOINT not set" << std::endl;
    }
  } catch (const std::exception& e) {
    ++failures;
    std::cout << "FAIL live-smoke: " << e.what() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
