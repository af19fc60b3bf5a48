#include "insitu/prompt_suite.hpp"

#include "insitu/digest.hpp"
#include "insitu/json_schema.hpp"

#include <algorithm>
#include <cctype>

namespace insitu {

namespace detail {
std::string_view embedded_prompt(PromptRole role);
std::string_view embedded_prompt_manifest();
}  // namespace detail

const std::set<std::string>& declared_required_slots(PromptRole role) {
  static const std::map<PromptRole, std::set<std::string>> declared = {
      {PromptRole::manager, {"user_query", "tools"}},
      {PromptRole::tool_developer, {"tool_request_json"}},
      {PromptRole::executor, {}},
      {PromptRole::integrator, {}},
      {PromptRole::aggregator, {"tools"}},
      {PromptRole::merger, {"tools", "suggest_name"}},
  };
  return declared.at(role);
}

namespace {

void verify_slots(PromptRole role, const PromptTemplate& t) {
  if (t.required_slots() != declared_required_slots(role)) {
    std::string got;
    for (const auto& s : t.required_slots()) got += (got.empty() ? "" : ",") + s;
    throw TemplateError("template " + std::string(to_string(role)) + " requires {" + got +
                        "}, which differs from its declaration");
  }
}

}  // namespace

const PromptSuite& PromptSuite::canonical() {
  static const PromptSuite suite = [] {
    auto manifest = nlohmann::json::parse(detail::embedded_prompt_manifest());
    PromptSuite s;
    for (PromptRole role : kAllRoles) {
      std::string body(detail::embedded_prompt(role));
      const auto& expected = manifest.at("templates").at(std::string(to_string(role))).at("sha256");
      auto actual = sha256_hex(body);
      if (actual != expected.get<std::string>()) {
        throw TemplateError("checksum mismatch for template " + std::string(to_string(role)));
      }
      auto t = PromptTemplate::compile(std::move(body));
      verify_slots(role, t);
      s.templates_.emplace(role, std::move(t));
      s.checksums_.emplace(role, actual);
    }
    return s;
  }();
  return suite;
}

PromptSuite PromptSuite::from_bodies(const std::map<PromptRole, std::string>& bodies) {
  PromptSuite s;
  for (PromptRole role : kAllRoles) {
    auto it = bodies.find(role);
    if (it == bodies.end()) throw TemplateError("no template for " + std::string(to_string(role)));
    auto t = PromptTemplate::compile(it->second);
    verify_slots(role, t);
    s.checksums_.emplace(role, sha256_hex(it->second));
    s.templates_.emplace(role, std::move(t));
  }
  return s;
}

const PromptTemplate& PromptSuite::get(PromptRole role) const { return templates_.at(role); }

std::string PromptSuite::render(PromptRole role, const nlohmann::json& slots) const {
  return get(role).render(slots);
}

// ---------------------------------------------------------------------------

nlohmann::json ToolRequest::to_json() const {
  return {{"name", name}, {"description", description}, {"input_schema", input_schema},
          {"output_schema", output_schema}};
}

std::string ExecutorReport::to_markdown() const {
  std::string out;
  out.append(kReasoningHeading).append("\n").append(reasoning_plan).append("\n\n");
  out.append(kFindingsHeading).append("\n").append(key_findings).append("\n\n");
  out.append(kConclusionHeading).append("\n").append(final_conclusion).append("\n");
  return out;
}

bool is_snake_case(std::string_view name) {
  if (name.empty() || !std::islower(static_cast<unsigned char>(name.front()))) return false;
  if (name.back() == '_') return false;
  char prev = 0;
  for (char c : name) {
    bool ok = std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '_';
    if (!ok || (c == '_' && prev == '_')) return false;
    prev = c;
  }
  return true;
}

namespace {

std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

std::string_view ltrim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

std::string_view rtrim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string trim_block(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  return std::string(rtrim(s));
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) lines.push_back(strip_cr(text.substr(start)));
      break;
    }
    lines.push_back(strip_cr(text.substr(start, nl - start)));
    start = nl + 1;
  }
  return lines;
}

bool is_fence(std::string_view line) { return ltrim(line).substr(0, 3) == "```"; }
bool is_bare_fence(std::string_view line) { return rtrim(ltrim(line)) == "```"; }

std::string require_string(const nlohmann::json& obj, const char* key, const std::string& reply) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing required key '") + key + "'", reply);
  if (!it->is_string()) throw ParseError(std::string("key '") + key + "' must be a string", reply);
  return it->get<std::string>();
}

const nlohmann::json& require_array(const nlohmann::json& obj, const char* key, const std::string& reply) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing required key '") + key + "'", reply);
  if (!it->is_array()) throw ParseError(std::string("key '") + key + "' must be a list", reply);
  return *it;
}

}  // namespace

std::vector<std::string> fenced_blocks(std::string_view reply) {
  std::vector<std::string> blocks;
  auto lines = split_lines(reply);
  std::size_t i = 0;
  while (i < lines.size()) {
    if (!is_fence(lines[i])) {
      ++i;
      continue;
    }
    std::string body;
    std::size_t j = i + 1;
    for (; j < lines.size() && !is_bare_fence(lines[j]); ++j) {
      body.append(lines[j]).push_back('\n');
    }
    if (!body.empty()) body.pop_back();
    blocks.push_back(std::move(body));
    i = j + 1;
  }
  return blocks;
}

nlohmann::json extract_json_object(const std::string& reply) {
  std::vector<nlohmann::json> objects;
  for (const auto& block : fenced_blocks(reply)) {
    auto j = nlohmann::json::parse(block, nullptr, false);
    if (!j.is_discarded() && j.is_object()) objects.push_back(std::move(j));
  }
  if (objects.size() > 1) throw ParseError("multiple JSON blocks in reply", reply);
  if (objects.size() == 1) return objects.front();

  auto first = reply.find('{');
  auto last = reply.rfind('}');
  if (first == std::string::npos || last == std::string::npos || last < first) {
    throw ParseError("no JSON object found in reply", reply);
  }
  auto j = nlohmann::json::parse(reply.substr(first, last - first + 1), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ParseError("malformed JSON in reply", reply);
  return j;
}

ToolRequest parse_tool_request(const nlohmann::json& j) {
  const std::string dump = j.dump();
  if (!j.is_object()) throw ParseError("tool request must be an object", dump);
  ToolRequest r;
  r.name = require_string(j, "name", dump);
  r.description = require_string(j, "description", dump);
  if (!is_snake_case(r.name)) throw ParseError("tool request name '" + r.name + "' is not snake_case", dump);
  for (const char* key : {"input_schema", "output_schema"}) {
    auto it = j.find(key);
    if (it == j.end() || !is_object_schema(*it)) {
      throw ParseError("tool request '" + r.name + "' has no well-formed " + key, dump);
    }
  }
  r.input_schema = j.at("input_schema");
  r.output_schema = j.at("output_schema");
  return r;
}

ManagerDecision parse_manager(const std::string& reply) {
  auto j = extract_json_object(reply);
  ManagerDecision d;
  for (const auto& name : require_array(j, "required_tool_names", reply)) {
    if (!name.is_string()) throw ParseError("required_tool_names must hold strings", reply);
    d.required_tool_names.push_back(name.get<std::string>());
  }
  d.tool_usage_guidance = require_string(j, "tool_usage_guidance", reply);
  for (const auto& req : require_array(j, "tool_requests", reply)) {
    try {
      d.tool_requests.push_back(parse_tool_request(req));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), reply);
    }
  }
  return d;
}

std::string parse_single_code_block(const std::string& reply) {
  auto blocks = fenced_blocks(reply);
  if (blocks.empty()) throw ParseError("no code block", reply);
  if (blocks.size() > 1) throw ParseError("multiple code blocks", reply);
  return blocks.front();
}

ExecutorReport parse_executor_report(const std::string& reply) {
  const std::string_view headings[] = {kReasoningHeading, kFindingsHeading, kConclusionHeading};
  std::optional<std::string> sections[3];
  int current = -1;
  std::string buffer;
  bool in_fence = false;

  auto close = [&] {
    if (current >= 0 && !sections[current]) sections[current] = trim_block(buffer);
    current = -1;
    in_fence = false;
    buffer.clear();
  };

  for (auto line : split_lines(reply)) {
    auto t = rtrim(ltrim(line));
    int hit = -1;
    if (!in_fence) {
      for (int k = 0; k < 3; ++k) {
        if (t == headings[k]) hit = k;
      }
    }
    if (hit >= 0) {
      close();
      current = hit;
      continue;
    }
    if (current >= 0 && is_fence(line)) {
      if (in_fence) {
        in_fence = !is_bare_fence(line);
      } else if (is_bare_fence(line)) {
        // Closing fence of a wrapper around the whole report.
        close();
        continue;
      } else {
        in_fence = true;
      }
    }
    if (current >= 0) buffer.append(line).push_back('\n');
  }
  close();

  std::string missing;
  for (int k = 0; k < 3; ++k) {
    if (!sections[k]) missing += (missing.empty() ? "" : ", ") + std::string(headings[k]);
  }
  if (!missing.empty()) throw ParseError("executor report missing sections: " + missing, reply);
  return ExecutorReport{*sections[0], *sections[1], *sections[2]};
}

FinalAnswer parse_final_answer(const std::string& reply) {
  auto j = extract_json_object(reply);
  FinalAnswer a;
  auto fa = j.find("final_answer");
  if (fa == j.end()) throw ParseError("missing required key 'final_answer'", reply);
  a.final_answer = fa->is_string() ? fa->get<std::string>() : fa->dump();
  a.reasoning_summary = require_string(j, "reasoning_summary", reply);
  if (a.final_answer.empty()) throw ParseError("final_answer is empty", reply);
  return a;
}

ClusterPlan parse_cluster_plan(const std::string& reply) {
  auto j = extract_json_object(reply);
  ClusterPlan plan;
  for (const auto& c : require_array(j, "consolidated_tool_clusters", reply)) {
    if (!c.is_object()) throw ParseError("cluster must be an object", reply);
    ToolCluster cluster;
    cluster.cluster_id = require_string(c, "cluster_id", reply);
    cluster.suggested_master_tool_name = require_string(c, "suggested_master_tool_name", reply);
    for (const auto& n : require_array(c, "tool_names", reply)) {
      if (!n.is_string()) throw ParseError("tool_names must hold strings", reply);
      cluster.tool_names.push_back(n.get<std::string>());
    }
    if (cluster.tool_names.empty()) throw ParseError("cluster '" + cluster.cluster_id + "' has no tools", reply);
    plan.clusters.push_back(std::move(cluster));
  }
  return plan;
}

}  // namespace insitu
