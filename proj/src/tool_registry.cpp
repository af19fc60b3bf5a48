#include "insitu/tool_registry.hpp"

#include "insitu/digest.hpp"

#include <fstream>
#include <random>
#include <sstream>

namespace insitu {

namespace fs = std::filesystem;

std::string_view to_string(ProvenanceKind kind) {
  switch (kind) {
    case ProvenanceKind::synthesized: return "synthesized";
    case ProvenanceKind::merged: return "merged";
    case ProvenanceKind::imported: return "imported";
  }
  return "unknown";
}

ToolStats& ToolStats::operator+=(const ToolStats& o) {
  invocations += o.invocations;
  successes += o.successes;
  tool_output_tokens += o.tool_output_tokens;
  return *this;
}

nlohmann::json to_json(const ToolRecord& r) {
  nlohmann::json prov = {{"kind", to_string(r.provenance.kind)}, {"step", r.provenance.step}};
  switch (r.provenance.kind) {
    case ProvenanceKind::synthesized: prov["query_id"] = r.provenance.query_id; break;
    case ProvenanceKind::merged: prov["members"] = r.provenance.members; break;
    case ProvenanceKind::imported: prov["origin"] = r.provenance.origin; break;
  }
  return {{"name", r.name},
          {"description", r.description},
          {"input_schema", r.input_schema},
          {"output_schema", r.output_schema},
          {"dependencies", r.dependencies},
          {"digest", r.digest},
          {"provenance", prov},
          {"stats",
           {{"invocations", r.stats.invocations},
            {"successes", r.stats.successes},
            {"tool_output_tokens", r.stats.tool_output_tokens}}}};
}

ToolRecord record_from_json(const nlohmann::json& j) {
  ToolRecord r;
  r.name = j.at("name").get<std::string>();
  r.description = j.at("description").get<std::string>();
  r.input_schema = j.at("input_schema");
  r.output_schema = j.at("output_schema");
  r.dependencies = j.at("dependencies").get<std::vector<std::string>>();
  r.digest = j.at("digest").get<std::string>();
  const auto& p = j.at("provenance");
  auto kind = p.at("kind").get<std::string>();
  r.provenance.step = p.at("step").get<std::uint64_t>();
  if (kind == "synthesized") {
    r.provenance.kind = ProvenanceKind::synthesized;
    r.provenance.query_id = p.at("query_id").get<std::string>();
  } else if (kind == "merged") {
    r.provenance.kind = ProvenanceKind::merged;
    r.provenance.members = p.at("members").get<std::vector<std::string>>();
  } else if (kind == "imported") {
    r.provenance.kind = ProvenanceKind::imported;
    r.provenance.origin = p.at("origin").get<std::string>();
  } else {
    throw LoadError("unknown provenance kind '" + kind + "'");
  }
  const auto& s = j.at("stats");
  r.stats.invocations = s.at("invocations").get<std::uint64_t>();
  r.stats.successes = s.at("successes").get<std::uint64_t>();
  r.stats.tool_output_tokens = s.at("tool_output_tokens").get<std::uint64_t>();
  return r;
}

RegistrySnapshot::RegistrySnapshot(std::uint64_t step, std::map<std::string, ToolRecord> records,
                                   std::map<std::string, std::string> aliases)
    : step_(step), records_(std::move(records)), aliases_(std::move(aliases)) {}

SnapshotPtr RegistrySnapshot::empty() {
  static const SnapshotPtr e = std::make_shared<const RegistrySnapshot>();
  return e;
}

Resolution RegistrySnapshot::resolve(const std::string& name) const {
  if (auto it = records_.find(name); it != records_.end()) return {&it->second, false};
  if (auto a = aliases_.find(name); a != aliases_.end()) {
    if (auto it = records_.find(a->second); it != records_.end()) return {&it->second, true};
  }
  throw ResolutionError(name);
}

std::vector<ListingEntry> RegistrySnapshot::listing() const {
  std::vector<ListingEntry> out;
  out.reserve(records_.size());
  for (const auto& [name, r] : records_) out.push_back({name, r.description, r.input_schema});
  return out;
}

nlohmann::json listing_json(const std::vector<ListingEntry>& listing) {
  auto arr = nlohmann::json::array();
  for (const auto& e : listing) {
    arr.push_back({{"name", e.name}, {"description", e.description}, {"input_schema", e.input_schema}});
  }
  return arr;
}

std::string listing_text(const RegistrySnapshot& snapshot) { return listing_json(snapshot.listing()).dump(); }

std::string listing_digest(const RegistrySnapshot& snapshot) { return sha256_hex(listing_text(snapshot)); }

namespace {

void check_record(const ToolRecord& r) {
  if (r.name.empty()) throw UnionError("tool record without a name");
  if (r.stats.successes > r.stats.invocations) throw UnionError("tool '" + r.name + "' has successes > invocations");
  if (sha256_hex(r.source) != r.digest) throw UnionError("tool '" + r.name + "' digest does not match its source");
}

}  // namespace

SnapshotPtr commit_union(const RegistrySnapshot& prev, const UnionUpdate& update) {
  auto records = prev.records();
  for (const auto& [old_name, _] : update.aliases) records.erase(old_name);
  for (const auto& name : update.replaced) {
    if (!records.erase(name)) throw UnionError("replaced tool '" + name + "' is not in the snapshot");
  }

  for (const auto& [name, delta] : update.stats) {
    auto it = records.find(name);
    if (it == records.end()) throw UnionError("usage delta for retired or unknown tool '" + name + "'");
    it->second.stats += delta;
    if (it->second.stats.successes > it->second.stats.invocations) {
      throw UnionError("tool '" + name + "' has successes > invocations");
    }
  }

  std::set<std::string> fresh;
  for (const auto& t : update.tools) {
    check_record(t);
    if (!fresh.insert(t.name).second) throw UnionError("duplicate new tool '" + t.name + "'");
    if (records.count(t.name)) throw UnionError("name collision with existing tool '" + t.name + "'");
  }
  for (const auto& t : update.tools) records.emplace(t.name, t);

  auto aliases = prev.aliases();
  for (const auto& [k, v] : update.aliases) aliases[k] = v;
  std::map<std::string, std::string> compressed;
  for (const auto& [k, v] : aliases) {
    if (records.count(k)) continue;  // name is live again
    std::string target = v;
    std::set<std::string> seen{k};
    while (!records.count(target)) {
      auto next = aliases.find(target);
      if (next == aliases.end() || !seen.insert(target).second) {
        throw UnionError("alias '" + k + "' does not resolve to a live tool");
      }
      target = next->second;
    }
    compressed.emplace(k, target);
  }
  return std::make_shared<const RegistrySnapshot>(prev.step() + 1, std::move(records), std::move(compressed));
}

SnapshotPtr commit_union(const RegistrySnapshot& prev, std::vector<ToolRecord> tools,
                         std::map<std::string, std::string> aliases) {
  UnionUpdate u;
  u.tools = std::move(tools);
  u.aliases = std::move(aliases);
  return commit_union(prev, u);
}

namespace {

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string random_suffix() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  std::ostringstream ss;
  ss << std::hex << rng();
  return ss.str();
}

}  // namespace

void persist(const RegistrySnapshot& snapshot, const fs::path& dir) {
  const fs::path target = fs::absolute(dir).lexically_normal();
  const fs::path parent = target.parent_path();
  fs::create_directories(parent);
  const fs::path tmp = parent / (target.filename().string() + ".tmp-" + random_suffix());
  fs::create_directories(tmp / "tools");

  nlohmann::json records = nlohmann::json::array();
  for (const auto& [name, r] : snapshot.records()) {
    auto j = to_json(r);
    j["source_file"] = "tools/" + name + ".py";
    records.push_back(std::move(j));
    write_file(tmp / "tools" / (name + ".py"), r.source);
  }
  nlohmann::json manifest = {{"format_version", kRegistryFormatVersion},
                             {"step", snapshot.step()},
                             {"records", records},
                             {"aliases", snapshot.aliases()}};
  write_file(tmp / "manifest.json", manifest.dump(2) + "\n");

  const fs::path old = parent / (target.filename().string() + ".old-" + random_suffix());
  bool had_old = fs::exists(target);
  if (had_old) fs::rename(target, old);
  fs::rename(tmp, target);
  if (had_old) fs::remove_all(old);
}

SnapshotPtr load(const fs::path& dir) {
  const auto text = read_file(dir / "manifest.json");
  auto manifest = nlohmann::json::parse(text, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw LoadError("manifest " + (dir / "manifest.json").string() + " is not valid JSON (truncated?)");
  }
  try {
    auto version = manifest.at("format_version").get<std::string>();
    if (version.substr(0, version.find('.')) != "1") {
      throw LoadError("unsupported registry format version " + version);
    }
    std::map<std::string, ToolRecord> records;
    for (const auto& j : manifest.at("records")) {
      auto r = record_from_json(j);
      r.source = read_file(dir / j.at("source_file").get<std::string>());
      auto actual = sha256_hex(r.source);
      if (actual != r.digest) {
        throw LoadError("digest mismatch for tool '" + r.name + "': manifest " + r.digest + ", file " + actual);
      }
      if (!records.emplace(r.name, std::move(r)).second) throw LoadError("duplicate record in manifest");
    }
    auto aliases = manifest.at("aliases").get<std::map<std::string, std::string>>();
    for (const auto& [k, v] : aliases) {
      if (!records.count(v)) throw LoadError("alias '" + k + "' points at missing tool '" + v + "'");
    }
    return std::make_shared<const RegistrySnapshot>(manifest.at("step").get<std::uint64_t>(), std::move(records),
                                                    std::move(aliases));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed registry manifest: ") + e.what());
  }
}

}  // namespace insitu
