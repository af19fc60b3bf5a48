#pragma once

// Uniform chat-completion interface. Two providers: a live client for
// OpenAI-compatible endpoints and a deterministic scripted provider used for
// offline reproduction and tests.

#include "insitu/roles.hpp"
#include "insitu/trace.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace insitu {

enum class MessageRole { system, user, assistant };

std::string_view to_string(MessageRole role);

struct ChatMessage {
  MessageRole role = MessageRole::user;
  std::string text;
};

inline constexpr double kDefaultTemperature = 0.7;

struct ChatExchange {
  std::vector<ChatMessage> messages;  // first message carries the rendered prompt
  double temperature = kDefaultTemperature;
  std::string model_id;  // empty: gateway routing decides
  AgentRole agent_role = AgentRole::executor;
  // Logical owner of the call (query id, or an absorb scope). Used for
  // trace attribution and scoped script matching.
  std::string scope;
};

struct CompletionResult {
  std::string text;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::string provider_id;
};

class GatewayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TransportError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};
class ScriptExhaustedError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};
class ConfigurationError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};
class PreconditionError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

// ceil(character_count / 4). Characters are counted as bytes.
constexpr std::uint64_t estimate_tokens(std::string_view text) {
  return (static_cast<std::uint64_t>(text.size()) + 3) / 4;
}

// Digest of the rendered exchange: every message's role and text.
std::string exchange_digest(const ChatExchange& exchange);

class ChatProvider {
 public:
  virtual ~ChatProvider() = default;
  virtual CompletionResult complete(const ChatExchange& exchange) = 0;
  virtual std::string id() const = 0;
};

// One scripted reply. Matched by digest of the rendered exchange, or by
// (role, scope, index): the index-th call for that role within `scope`.
// An empty scope counts calls for the role across all scopes.
struct ScriptEntry {
  std::optional<std::string> digest;
  std::optional<AgentRole> role;
  std::string scope;
  std::size_t index = 0;
  std::string response;
};

std::vector<ScriptEntry> parse_script(const nlohmann::json& doc);
std::vector<ScriptEntry> load_script(const std::filesystem::path& path);
nlohmann::json to_json(const ScriptEntry& entry);

class ScriptedProvider final : public ChatProvider {
 public:
  explicit ScriptedProvider(std::vector<ScriptEntry> entries);

  CompletionResult complete(const ChatExchange& exchange) override;
  std::string id() const override { return "scripted"; }

  std::size_t remaining() const;

 private:
  struct FallbackKey {
    AgentRole role;
    std::string scope;
    std::size_t index;
    auto operator<=>(const FallbackKey&) const = default;
  };

  mutable std::mutex mu_;
  std::vector<ScriptEntry> entries_;
  std::vector<bool> consumed_;
  std::map<std::string, std::size_t> by_digest_;
  std::map<FallbackKey, std::size_t> by_key_;
  std::map<std::pair<AgentRole, std::string>, std::size_t> counters_;
};

struct LiveProviderConfig {
  std::string base_url;          // e.g. https://api.openai.com
  std::string path_prefix = "/v1";
  std::string api_key_env;       // name of the environment variable holding the key
  std::chrono::seconds timeout{120};
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{1000};
};

// OpenAI-compatible chat-completions client with bounded retry.
class OpenAICompatibleProvider final : public ChatProvider {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit OpenAICompatibleProvider(LiveProviderConfig config, Sleeper sleeper = {});

  CompletionResult complete(const ChatExchange& exchange) override;
  std::string id() const override { return "openai-compatible"; }

  static nlohmann::json request_body(const ChatExchange& exchange);

 private:
  LiveProviderConfig config_;
  std::string api_key_;
  Sleeper sleep_;
};

struct UsageTotals {
  std::uint64_t calls = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;

  UsageTotals& operator+=(const UsageTotals& o);
  bool operator==(const UsageTotals&) const = default;
};

struct RoutingConfig {
  std::string default_model = "default";
  std::map<AgentRole, std::string> role_models;
  double temperature = kDefaultTemperature;
};

// Front door for every LLM call: fills routing defaults, enforces
// preconditions, accounts usage and records an llm_exchange event.
class Gateway {
 public:
  Gateway(std::shared_ptr<ChatProvider> provider, RoutingConfig routing = {});

  CompletionResult complete(ChatExchange exchange, EventSink& sink);

  UsageTotals usage() const;
  const RoutingConfig& routing() const { return routing_; }
  const ChatProvider& provider() const { return *provider_; }

 private:
  std::shared_ptr<ChatProvider> provider_;
  RoutingConfig routing_;
  std::atomic<std::uint64_t> calls_{0};
  std::atomic<std::uint64_t> prompt_tokens_{0};
  std::atomic<std::uint64_t> completion_tokens_{0};
};

}  // namespace insitu
