#pragma once

#include "insitu/digest.hpp"
#include "insitu/evolution.hpp"
#include "insitu/llm_gateway.hpp"
#include "insitu/sandbox.hpp"
#include "insitu/tool_registry.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

namespace testsupport {

namespace fs = std::filesystem;
using nlohmann::json;

inline fs::path fixtures() { return INSITU_FIXTURES_DIR; }
inline fs::path scenarios() { return INSITU_SCENARIO_DIR; }
inline fs::path harness() { return fixtures() / "harness" / "harness_stub.py"; }
inline fs::path tool_fixture(const std::string& name) { return fixtures() / "tools" / (name + ".py"); }

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "insitu-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Tool sources

inline json object_schema(const std::vector<std::pair<std::string, std::string>>& props,
                          const std::vector<std::string>& required) {
  json p = json::object();
  for (const auto& [name, type] : props) p[name] = {{"type", type}};
  return {{"type", "object"}, {"properties", p}, {"required", required}};
}

// A valid tool with a single string input `text` and string output `result`.
inline std::string simple_tool(const std::string& name, const std::string& description = "Does one thing",
                               const std::string& body = "input.text") {
  return "__TOOL_META__ = {\n    \"name\": \"" + name + "\",\n    \"description\": \"" + description +
         "\",\n    \"dependencies\": [],\n}\n\nfrom pydantic import BaseModel\n\n\nclass InputModel(BaseModel):\n"
         "    text: str\n\n\nclass OutputModel(BaseModel):\n    result: str\n\n\n"
         "def run(input: InputModel) -> OutputModel:\n    return OutputModel(result=" + body + ")\n";
}

inline insitu::ToolRequest simple_request(const std::string& name, const std::string& description = "Does one thing") {
  return {name, description, object_schema({{"text", "string"}}, {"text"}), object_schema({{"result", "string"}}, {"result"})};
}

inline insitu::ToolRecord simple_record(const std::string& name, std::uint64_t step = 1,
                                        const std::string& description = "Does one thing") {
  insitu::ToolRecord r;
  r.name = name;
  r.description = description;
  auto req = simple_request(name, description);
  r.input_schema = req.input_schema;
  r.output_schema = req.output_schema;
  r.source = simple_tool(name, description);
  r.digest = insitu::sha256_hex(r.source);
  r.provenance.kind = insitu::ProvenanceKind::synthesized;
  r.provenance.step = step;
  r.provenance.query_id = "q0";
  return r;
}

// ---------------------------------------------------------------------------
// Scripted replies

inline std::string fence(const std::string& lang, const std::string& body) {
  return "```" + lang + "\n" + body + "\n```";
}

inline std::string manager_reply(const std::vector<std::string>& required,
                                 const std::vector<insitu::ToolRequest>& requests = {},
                                 const std::string& guidance = "use the tools") {
  json reqs = json::array();
  for (const auto& r : requests) reqs.push_back(r.to_json());
  return fence("json", json{{"required_tool_names", required}, {"tool_usage_guidance", guidance},
                            {"tool_requests", reqs}}
                           .dump(2));
}

inline std::string code_reply(const std::string& source) { return "Here it is.\n\n" + fence("python", source); }

inline std::string action_reply(const std::string& tool, const json& input) {
  return fence("json", json{{"tool", tool}, {"input", input}}.dump());
}

inline std::string report_reply(const std::string& conclusion) {
  return "## Reasoning & Plan\nplan\n\n## Key Findings & Evidence\nfindings\n\n## Final Conclusion\n" + conclusion +
         "\n";
}

inline std::string final_reply(const std::string& answer) {
  return fence("json", json{{"final_answer", answer}, {"reasoning_summary", "because"}}.dump());
}

inline std::string cluster_reply(const std::vector<std::pair<std::string, std::vector<std::string>>>& clusters) {
  json cs = json::array();
  int i = 0;
  for (const auto& [master, names] : clusters) {
    cs.push_back({{"cluster_id", "c" + std::to_string(++i)}, {"suggested_master_tool_name", master},
                  {"tool_names", names}});
  }
  return fence("json", json{{"consolidated_tool_clusters", cs}}.dump(2));
}

inline insitu::ScriptEntry keyed(insitu::AgentRole role, const std::string& scope, std::size_t index,
                                 std::string response) {
  insitu::ScriptEntry e;
  e.role = role;
  e.scope = scope;
  e.index = index;
  e.response = std::move(response);
  return e;
}

// ---------------------------------------------------------------------------
// A runner that never spawns: answers from a callback.

class FakeRunner final : public insitu::ToolRunner {
 public:
  using Handler = std::function<insitu::InvocationResult(const insitu::ToolArtifact&, const json&)>;

  FakeRunner() = default;
  explicit FakeRunner(Handler h) : handler_(std::move(h)) {}

  insitu::Environment provision(const insitu::ToolArtifact&) override {
    ++provisions;
    return {"base", "python3"};
  }

  insitu::InvocationResult invoke(const insitu::ToolArtifact& a, const json& payload,
                                  const insitu::InvocationLimits&) override {
    ++invocations;
    if (handler_) return handler_(a, payload);
    insitu::InvocationResult r;
    r.status = insitu::InvocationStatus::ok;
    r.payload = {{"result", payload.value("text", std::string("ok"))}};
    r.output_text = r.payload.dump();
    r.spawned = true;
    return r;
  }

  insitu::InvocationLimits default_limits() const override { return {}; }

  std::atomic<int> invocations{0};
  std::atomic<int> provisions{0};

 private:
  Handler handler_;
};

inline std::vector<insitu::TraceEvent> events_of(const std::vector<insitu::TraceEvent>& all, insitu::EventKind kind) {
  std::vector<insitu::TraceEvent> out;
  for (const auto& e : all) {
    if (e.kind == kind) out.push_back(e);
  }
  return out;
}

}  // namespace testsupport
