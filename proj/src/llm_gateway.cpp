#include "insitu/llm_gateway.hpp"

#include "insitu/digest.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <thread>

namespace insitu {

std::string_view to_string(MessageRole role) {
  switch (role) {
    case MessageRole::system: return "system";
    case MessageRole::user: return "user";
    case MessageRole::assistant: return "assistant";
  }
  return "user";
}

std::string exchange_digest(const ChatExchange& exchange) {
  std::string material;
  for (const auto& m : exchange.messages) {
    material += to_string(m.role);
    material.push_back('\x1f');
    material += m.text;
    material.push_back('\x1e');
  }
  return sha256_hex(material);
}

// ---------------------------------------------------------------------------
// Scripted provider

std::vector<ScriptEntry> parse_script(const nlohmann::json& doc) {
  if (!doc.is_array()) throw ConfigurationError("script must be a JSON array of entries");
  std::vector<ScriptEntry> entries;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& j = doc[i];
    auto where = "script entry " + std::to_string(i);
    if (!j.is_object()) throw ConfigurationError(where + ": not an object");
    ScriptEntry e;
    if (auto it = j.find("response"); it != j.end() && it->is_string()) {
      e.response = it->get<std::string>();
    } else if (it != j.end() && it->is_array()) {
      for (std::size_t k = 0; k < it->size(); ++k) {
        if (k) e.response.push_back('\n');
        e.response += (*it)[k].get<std::string>();
      }
    } else {
      throw ConfigurationError(where + ": missing response");
    }
    if (j.contains("digest")) e.digest = j["digest"].get<std::string>();
    if (j.contains("role")) {
      auto role = parse_role(j["role"].get<std::string>());
      if (!role) throw ConfigurationError(where + ": unknown role " + j["role"].dump());
      e.role = role;
      e.scope = j.value("scope", "");
      e.index = j.value("index", std::size_t{0});
    }
    if (!e.digest && !e.role) throw ConfigurationError(where + ": needs a digest or a role key");
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ScriptEntry> load_script(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open script " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigurationError("script " + path.string() + " is not valid JSON: " + ex.what());
  }
  return parse_script(doc);
}

nlohmann::json to_json(const ScriptEntry& entry) {
  nlohmann::json j;
  if (entry.digest) j["digest"] = *entry.digest;
  if (entry.role) {
    j["role"] = std::string(to_string(*entry.role));
    if (!entry.scope.empty()) j["scope"] = entry.scope;
    j["index"] = entry.index;
  }
  j["response"] = entry.response;
  return j;
}

ScriptedProvider::ScriptedProvider(std::vector<ScriptEntry> entries)
    : entries_(std::move(entries)), consumed_(entries_.size(), false) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.digest) {
      if (!by_digest_.emplace(*e.digest, i).second) {
        throw ConfigurationError("duplicate script digest " + *e.digest);
      }
    } else {
      FallbackKey key{*e.role, e.scope, e.index};
      if (!by_key_.emplace(key, i).second) {
        throw ConfigurationError("duplicate script key (" + std::string(to_string(*e.role)) + ", '" + e.scope +
                                 "', " + std::to_string(e.index) + ")");
      }
    }
  }
}

CompletionResult ScriptedProvider::complete(const ChatExchange& exchange) {
  const auto digest = exchange_digest(exchange);
  std::lock_guard lock(mu_);

  auto& scoped_count = counters_[{exchange.agent_role, exchange.scope}];
  const std::size_t scoped_index = scoped_count++;
  std::size_t global_index = scoped_index;
  if (!exchange.scope.empty()) global_index = counters_[{exchange.agent_role, std::string()}]++;

  std::optional<std::size_t> hit;
  if (auto it = by_digest_.find(digest); it != by_digest_.end() && !consumed_[it->second]) {
    hit = it->second;
  } else if (auto k = by_key_.find({exchange.agent_role, exchange.scope, scoped_index});
             k != by_key_.end() && !consumed_[k->second]) {
    hit = k->second;
  } else if (auto g = by_key_.find({exchange.agent_role, std::string(), global_index});
             g != by_key_.end() && !consumed_[g->second]) {
    hit = g->second;
  }
  if (!hit) {
    throw ScriptExhaustedError("no script entry for role=" + std::string(to_string(exchange.agent_role)) +
                               " scope='" + exchange.scope + "' index=" + std::to_string(scoped_index) +
                               " digest=" + digest);
  }
  consumed_[*hit] = true;

  CompletionResult r;
  r.text = entries_[*hit].response;
  std::uint64_t prompt_tokens = 0;
  for (const auto& m : exchange.messages) prompt_tokens += estimate_tokens(m.text);
  r.prompt_tokens = prompt_tokens;
  r.completion_tokens = estimate_tokens(r.text);
  r.provider_id = id();
  return r;
}

std::size_t ScriptedProvider::remaining() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (bool c : consumed_) n += c ? 0 : 1;
  return n;
}

// ---------------------------------------------------------------------------
// Live provider

OpenAICompatibleProvider::OpenAICompatibleProvider(LiveProviderConfig config, Sleeper sleeper)
    : config_(std::move(config)), sleep_(std::move(sleeper)) {
  if (config_.base_url.empty()) throw ConfigurationError("live provider: endpoint URL is empty");
  if (config_.max_attempts < 1) throw ConfigurationError("live provider: max_attempts must be >= 1");
  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw ConfigurationError("live provider: credential variable " + config_.api_key_env + " is not set");
    }
    api_key_ = key;
  }
  if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

nlohmann::json OpenAICompatibleProvider::request_body(const ChatExchange& exchange) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : exchange.messages) {
    messages.push_back({{"role", std::string(to_string(m.role))}, {"content", m.text}});
  }
  return {{"model", exchange.model_id}, {"messages", messages}, {"temperature", exchange.temperature}};
}

CompletionResult OpenAICompatibleProvider::complete(const ChatExchange& exchange) {
  httplib::Client client(config_.base_url);
  const auto secs = static_cast<time_t>(config_.timeout.count());
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);

  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  const std::string body = request_body(exchange).dump();
  const std::string path = config_.path_prefix + "/chat/completions";

  std::string last_error;
  auto backoff = config_.initial_backoff;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512);
    } else if (res->status != 200) {
      throw TransportError("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512));
    } else {
      try {
        auto j = nlohmann::json::parse(res->body);
        CompletionResult r;
        const auto& content = j.at("choices").at(0).at("message").at("content");
        r.text = content.is_string() ? content.get<std::string>() : std::string();
        if (r.text.empty()) throw TransportError("provider returned an empty completion");
        if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
          r.prompt_tokens = u->value("prompt_tokens", std::uint64_t{0});
          r.completion_tokens = u->value("completion_tokens", std::uint64_t{0});
        } else {
          for (const auto& m : exchange.messages) r.prompt_tokens += estimate_tokens(m.text);
          r.completion_tokens = estimate_tokens(r.text);
        }
        r.provider_id = id();
        return r;
      } catch (const nlohmann::json::exception& ex) {
        throw TransportError(std::string("malformed completion response: ") + ex.what());
      }
    }
    if (attempt < config_.max_attempts) {
      sleep_(backoff);
      backoff *= 2;
    }
  }
  throw TransportError("giving up after " + std::to_string(config_.max_attempts) + " attempts: " + last_error);
}

// ---------------------------------------------------------------------------
// Gateway

UsageTotals& UsageTotals::operator+=(const UsageTotals& o) {
  calls += o.calls;
  prompt_tokens += o.prompt_tokens;
  completion_tokens += o.completion_tokens;
  return *this;
}

Gateway::Gateway(std::shared_ptr<ChatProvider> provider, RoutingConfig routing)
    : provider_(std::move(provider)), routing_(std::move(routing)) {
  if (!provider_) throw ConfigurationError("gateway: no provider configured");
  if (routing_.temperature < 0.0 || routing_.temperature > 2.0) {
    throw ConfigurationError("gateway: temperature must lie in [0, 2]");
  }
}

CompletionResult Gateway::complete(ChatExchange exchange, EventSink& sink) {
  if (exchange.messages.empty()) throw PreconditionError("chat exchange has no messages");
  if (exchange.model_id.empty()) {
    auto it = routing_.role_models.find(exchange.agent_role);
    exchange.model_id = it != routing_.role_models.end() ? it->second : routing_.default_model;
  }
  exchange.temperature = routing_.temperature;

  auto result = provider_->complete(exchange);

  calls_.fetch_add(1, std::memory_order_relaxed);
  prompt_tokens_.fetch_add(result.prompt_tokens, std::memory_order_relaxed);
  completion_tokens_.fetch_add(result.completion_tokens, std::memory_order_relaxed);

  sink.emit(EventKind::llm_exchange, {{"role", std::string(to_string(exchange.agent_role))},
                                      {"scope", exchange.scope},
                                      {"model", exchange.model_id},
                                      {"prompt_digest", exchange_digest(exchange)},
                                      {"messages", exchange.messages.size()},
                                      {"prompt_tokens", result.prompt_tokens},
                                      {"completion_tokens", result.completion_tokens},
                                      {"provider", result.provider_id},
                                      {"response", result.text}});
  return result;
}

UsageTotals Gateway::usage() const {
  return {calls_.load(), prompt_tokens_.load(), completion_tokens_.load()};
}

}  // namespace insitu
