#pragma once

// The fixed prompt context: six role templates with named-slot rendering,
// and strict parsers for each role's structured reply.

#include "insitu/roles.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace insitu {

using PromptRole = AgentRole;

class TemplateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a required slot (or a referenced attribute) is absent.
class RenderError : public std::runtime_error {
 public:
  explicit RenderError(std::string slot)
      : std::runtime_error("missing template slot: " + slot), slot_(std::move(slot)) {}
  const std::string& slot() const noexcept { return slot_; }

 private:
  std::string slot_;
};

// Minimal Jinja subset: {{ a.b }}, {% if a %}..{% else %}..{% endif %},
// {% for x in a %}..{% endfor %}. A line holding only a block tag is
// removed together with its newline.
class PromptTemplate {
 public:
  static PromptTemplate compile(std::string body);

  std::string render(const nlohmann::json& slots) const;

  // Slots referenced outside any guard on themselves; rendering fails
  // without them.
  const std::set<std::string>& required_slots() const { return required_; }
  // Slots that only gate or fill optional blocks.
  const std::set<std::string>& optional_slots() const { return optional_; }
  const std::string& body() const { return body_; }

  struct Node;

 private:
  std::string body_;
  std::shared_ptr<const std::vector<Node>> nodes_;
  std::set<std::string> required_;
  std::set<std::string> optional_;
};

// Declared required slots per role; verified against the compiled bodies.
const std::set<std::string>& declared_required_slots(PromptRole role);

class PromptSuite {
 public:
  // Built-in templates; checksums verified against the shipped manifest and
  // slot sets verified against the declarations.
  static const PromptSuite& canonical();

  // Builds a suite from explicit bodies (same verification minus checksums).
  static PromptSuite from_bodies(const std::map<PromptRole, std::string>& bodies);

  const PromptTemplate& get(PromptRole role) const;
  std::string render(PromptRole role, const nlohmann::json& slots) const;

  // sha256 per role as listed in the manifest.
  const std::map<PromptRole, std::string>& checksums() const { return checksums_; }

 private:
  std::map<PromptRole, PromptTemplate> templates_;
  std::map<PromptRole, std::string> checksums_;
};

// ---------------------------------------------------------------------------
// Structured replies

struct ToolRequest {
  std::string name;
  std::string description;
  nlohmann::json input_schema;
  nlohmann::json output_schema;

  nlohmann::json to_json() const;
  bool operator==(const ToolRequest&) const = default;
};

struct ManagerDecision {
  std::vector<std::string> required_tool_names;
  std::string tool_usage_guidance;
  std::vector<ToolRequest> tool_requests;
};

struct ExecutorReport {
  std::string reasoning_plan;
  std::string key_findings;
  std::string final_conclusion;

  // The three sections re-assembled under their headings.
  std::string to_markdown() const;
};

struct FinalAnswer {
  std::string final_answer;
  std::string reasoning_summary;
  bool operator==(const FinalAnswer&) const = default;
};

struct ToolCluster {
  std::string cluster_id;
  std::string suggested_master_tool_name;
  std::vector<std::string> tool_names;
  bool operator==(const ToolCluster&) const = default;
};

struct ClusterPlan {
  std::vector<ToolCluster> clusters;
  bool operator==(const ClusterPlan&) const = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::string reply) : std::runtime_error(what), reply_(std::move(reply)) {}
  const std::string& reply() const noexcept { return reply_; }

 private:
  std::string reply_;
};

inline constexpr std::string_view kReasoningHeading = "## Reasoning & Plan";
inline constexpr std::string_view kFindingsHeading = "## Key Findings & Evidence";
inline constexpr std::string_view kConclusionHeading = "## Final Conclusion";

// The single JSON object in a reply: one fenced block, or a bare object.
nlohmann::json extract_json_object(const std::string& reply);

// All fenced code blocks (interiors, fence lines stripped).
std::vector<std::string> fenced_blocks(std::string_view reply);

ManagerDecision parse_manager(const std::string& reply);
std::string parse_single_code_block(const std::string& reply);
ExecutorReport parse_executor_report(const std::string& reply);
FinalAnswer parse_final_answer(const std::string& reply);
ClusterPlan parse_cluster_plan(const std::string& reply);
ToolRequest parse_tool_request(const nlohmann::json& j);

bool is_snake_case(std::string_view name);

}  // namespace insitu
