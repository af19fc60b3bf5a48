#pragma once

// Immutable, versioned snapshots of the global toolset with persistence for
// warm starts.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace insitu {

enum class ProvenanceKind { synthesized, merged, imported };

std::string_view to_string(ProvenanceKind kind);

struct Provenance {
  ProvenanceKind kind = ProvenanceKind::synthesized;
  std::uint64_t step = 0;
  std::string query_id;              // synthesized
  std::vector<std::string> members;  // merged
  std::string origin;                // imported

  bool operator==(const Provenance&) const = default;
};

struct ToolStats {
  std::uint64_t invocations = 0;
  std::uint64_t successes = 0;
  std::uint64_t tool_output_tokens = 0;

  ToolStats& operator+=(const ToolStats& o);
  bool operator==(const ToolStats&) const = default;
};

struct ToolRecord {
  std::string name;
  std::string description;
  nlohmann::json input_schema;
  nlohmann::json output_schema;
  std::vector<std::string> dependencies;
  std::string source;
  std::string digest;  // sha256 of source
  Provenance provenance;
  ToolStats stats;

  bool operator==(const ToolRecord&) const = default;
};

nlohmann::json to_json(const ToolRecord& r);
ToolRecord record_from_json(const nlohmann::json& j);

struct ListingEntry {
  std::string name;
  std::string description;
  nlohmann::json input_schema;
};

class ResolutionError : public std::runtime_error {
 public:
  explicit ResolutionError(std::string name)
      : std::runtime_error("unknown tool '" + name + "'"), name_(std::move(name)) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class UnionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Resolution {
  const ToolRecord* record = nullptr;
  bool aliased = false;
};

class RegistrySnapshot;
using SnapshotPtr = std::shared_ptr<const RegistrySnapshot>;

class RegistrySnapshot {
 public:
  RegistrySnapshot() = default;
  RegistrySnapshot(std::uint64_t step, std::map<std::string, ToolRecord> records,
                   std::map<std::string, std::string> aliases);

  static SnapshotPtr empty();

  std::uint64_t step() const { return step_; }
  const std::map<std::string, ToolRecord>& records() const { return records_; }
  const std::map<std::string, std::string>& aliases() const { return aliases_; }
  std::size_t size() const { return records_.size(); }
  bool contains(const std::string& name) const { return records_.count(name) != 0; }

  // Exact, case-sensitive; retired names resolve through the alias map.
  Resolution resolve(const std::string& name) const;

  // Lexicographic by name.
  std::vector<ListingEntry> listing() const;

  bool operator==(const RegistrySnapshot&) const = default;

 private:
  std::uint64_t step_ = 0;
  std::map<std::string, ToolRecord> records_;
  std::map<std::string, std::string> aliases_;
};

// Canonical text of a listing, used for prompt slots and digests.
nlohmann::json listing_json(const std::vector<ListingEntry>& listing);
std::string listing_text(const RegistrySnapshot& snapshot);
std::string listing_digest(const RegistrySnapshot& snapshot);

struct UnionUpdate {
  std::vector<ToolRecord> tools;
  std::map<std::string, std::string> aliases;  // retired name -> surviving name
  std::set<std::string> replaced;              // prev names superseded by a same-named new tool
  std::map<std::string, ToolStats> stats;      // usage deltas for surviving prev records
};

// T_t = P_t ∪ T_{t-1}. Names retired by aliases leave the snapshot.
SnapshotPtr commit_union(const RegistrySnapshot& prev, const UnionUpdate& update);
SnapshotPtr commit_union(const RegistrySnapshot& prev, std::vector<ToolRecord> tools,
                         std::map<std::string, std::string> aliases = {});

inline constexpr const char* kRegistryFormatVersion = "1.0";

// Directory layout: manifest.json plus tools/<name>.py. Written atomically.
void persist(const RegistrySnapshot& snapshot, const std::filesystem::path& dir);
SnapshotPtr load(const std::filesystem::path& dir);

}  // namespace insitu
