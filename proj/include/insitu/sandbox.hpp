#pragma once

// Validation of synthesized tool artifacts and their one-shot execution in
// a scratch workspace over the JSON wire protocol.

#include "insitu/prompt_suite.hpp"
#include "insitu/tool_registry.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <future>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace insitu {

struct ToolMeta {
  std::string name;
  std::string description;
  std::vector<std::string> dependencies;
};

struct ToolArtifact {
  ToolMeta meta;
  std::string source;
  nlohmann::json input_schema;
  nlohmann::json output_schema;
  std::string digest;
};

enum class ValidationCategory {
  missing_meta,
  malformed_meta,
  name_mismatch,
  missing_model,
  missing_entrypoint,
  self_install,
  schema_mismatch,
};

std::string_view to_string(ValidationCategory c);

class ArtifactValidationError : public std::runtime_error {
 public:
  ArtifactValidationError(ValidationCategory category, const std::string& detail);
  ValidationCategory category() const noexcept { return category_; }

 private:
  ValidationCategory category_;
};

// A declared pydantic field: name, annotation text, and whether it has a default.
struct ModelField {
  std::string name;
  std::string annotation;
  bool has_default = false;
};

// Parses a Python dict/list/str/number/bool/None literal into JSON.
nlohmann::json parse_python_literal(std::string_view text);

// Fields declared at the top level of `class <model_name>(...)`; nullopt when
// the class is absent.
std::optional<std::vector<ModelField>> declared_fields(const std::string& source, const std::string& model_name);

// Schema implied by declared fields (types mapped from simple annotations).
nlohmann::json schema_from_fields(const std::vector<ModelField>& fields);

// Checks the tool contract. Schemas come from the request and are
// cross-checked against the declared model fields.
ToolArtifact validate_artifact(const std::string& source, const ToolRequest& request);

// For merged tools: the request implied by the source itself, named `name`
// (the declared meta name when empty).
ToolRequest request_from_source(const std::string& source, const std::string& name);

ToolArtifact artifact_from_record(const ToolRecord& r);

enum class InvocationStatus { ok, tool_error, protocol_error, timeout };

std::string_view to_string(InvocationStatus s);

struct InvocationResult {
  InvocationStatus status = InvocationStatus::protocol_error;
  nlohmann::json payload;  // output (ok) or {kind, message}
  std::chrono::milliseconds wall_time{0};
  std::string output_text;  // what the executor sees; bounded
  bool spawned = false;
  bool truncated = false;
  std::string stderr_tail;
};

struct InvocationLimits {
  std::chrono::milliseconds timeout{120000};
  std::size_t max_output_bytes = 64 * 1024;
};

inline constexpr std::string_view kTruncationMarker = "\n...[output truncated]";

// Cuts `text` to at most `max_bytes` on a UTF-8 boundary and appends the
// truncation marker when anything was removed.
std::string truncate_output(const std::string& text, std::size_t max_bytes, bool* truncated = nullptr);

class ProvisioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Environment {
  std::string key;  // "base" or sha256 of the sorted dependency set
  std::filesystem::path python;
};

enum class ProvisionMode {
  installed,  // use the base interpreter; every dependency must already be importable there
  index,      // resolve against a fixed package index; base interpreter
  pip,        // per dependency set virtualenv, populated with pip
};

struct ProvisionConfig {
  ProvisionMode mode = ProvisionMode::installed;
  std::filesystem::path python = "python3";
  std::set<std::string> index;              // for ProvisionMode::index
  std::filesystem::path cache_dir;          // for ProvisionMode::pip
  std::chrono::milliseconds install_timeout{600000};
};

std::string environment_key(const std::vector<std::string>& dependencies);
bool valid_dependency_name(std::string_view dep);

// Environments keyed by dependency set; concurrent requests for one set share
// a single provisioning run. Failures are not cached.
class Provisioner {
 public:
  explicit Provisioner(ProvisionConfig config);
  Environment provision(const std::vector<std::string>& dependencies);
  std::size_t provision_runs() const;

 private:
  Environment build(const std::string& key, const std::vector<std::string>& deps);

  ProvisionConfig config_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_future<Environment>> envs_;
  std::size_t runs_ = 0;
};

class ToolRunner {
 public:
  virtual ~ToolRunner() = default;
  virtual Environment provision(const ToolArtifact& artifact) = 0;
  virtual InvocationResult invoke(const ToolArtifact& artifact, const nlohmann::json& payload,
                                  const InvocationLimits& limits) = 0;
  virtual InvocationLimits default_limits() const = 0;
};

struct SandboxConfig {
  std::filesystem::path harness;  // harness entry script
  std::filesystem::path work_root = std::filesystem::temp_directory_path();
  InvocationLimits limits;
  std::size_t max_concurrent = 8;
  std::vector<std::string> env_allowlist;  // variable names passed through
  bool confine_writes = true;
  ProvisionConfig provision;
};

class Sandbox final : public ToolRunner {
 public:
  explicit Sandbox(SandboxConfig config);

  Environment provision(const ToolArtifact& artifact) override;
  InvocationResult invoke(const ToolArtifact& artifact, const nlohmann::json& payload,
                          const InvocationLimits& limits) override;
  InvocationLimits default_limits() const override { return config_.limits; }

  const SandboxConfig& config() const { return config_; }
  std::size_t spawned() const;

 private:
  SandboxConfig config_;
  Provisioner provisioner_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t running_ = 0;
  std::size_t spawned_ = 0;
};

}  // namespace insitu
