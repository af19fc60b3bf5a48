#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace insitu {

// The six LLM-backed nodes of the fixed workflow.
enum class AgentRole { manager, tool_developer, executor, integrator, aggregator, merger };

inline constexpr std::array<AgentRole, 6> kAllRoles = {
    AgentRole::manager,    AgentRole::tool_developer, AgentRole::executor,
    AgentRole::integrator, AgentRole::aggregator,     AgentRole::merger};

constexpr std::string_view to_string(AgentRole role) {
  switch (role) {
    case AgentRole::manager: return "manager";
    case AgentRole::tool_developer: return "tool_developer";
    case AgentRole::executor: return "executor";
    case AgentRole::integrator: return "integrator";
    case AgentRole::aggregator: return "aggregator";
    case AgentRole::merger: return "merger";
  }
  return "unknown";
}

constexpr std::optional<AgentRole> parse_role(std::string_view text) {
  for (AgentRole role : kAllRoles) {
    if (to_string(role) == text) return role;
  }
  return std::nullopt;
}

}  // namespace insitu
