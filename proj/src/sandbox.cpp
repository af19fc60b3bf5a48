#include "insitu/sandbox.hpp"

#include "insitu/digest.hpp"
#include "insitu/json_schema.hpp"
#include "insitu/process.hpp"

#include <stdlib.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <regex>

extern char** environ;

namespace insitu {

namespace fs = std::filesystem;

std::string_view to_string(ValidationCategory c) {
  switch (c) {
    case ValidationCategory::missing_meta: return "missing meta";
    case ValidationCategory::malformed_meta: return "malformed meta";
    case ValidationCategory::name_mismatch: return "name mismatch";
    case ValidationCategory::missing_model: return "missing model";
    case ValidationCategory::missing_entrypoint: return "missing entrypoint";
    case ValidationCategory::self_install: return "self-install forbidden";
    case ValidationCategory::schema_mismatch: return "schema mismatch";
  }
  return "invalid";
}

ArtifactValidationError::ArtifactValidationError(ValidationCategory category, const std::string& detail)
    : std::runtime_error(std::string(to_string(category)) + ": " + detail), category_(category) {}

std::string_view to_string(InvocationStatus s) {
  switch (s) {
    case InvocationStatus::ok: return "ok";
    case InvocationStatus::tool_error: return "tool_error";
    case InvocationStatus::protocol_error: return "protocol_error";
    case InvocationStatus::timeout: return "timeout";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Python literal parsing

namespace {

class LiteralParser {
 public:
  explicit LiteralParser(std::string_view text) : s_(text) {}

  nlohmann::json value() {
    skip();
    if (pos_ >= s_.size()) fail("unexpected end of literal");
    char c = s_[pos_];
    if (c == '{') return dict();
    if (c == '[') return sequence(']');
    if (c == '(') {
      // Either a tuple or a parenthesized (possibly concatenated) string.
      std::size_t save = pos_;
      ++pos_;
      skip();
      if (pos_ < s_.size() && is_string_start()) {
        auto str = strings();
        skip();
        if (pos_ < s_.size() && s_[pos_] == ')') {
          ++pos_;
          return str;
        }
      }
      pos_ = save;
      return sequence(')');
    }
    if (is_string_start()) return strings();
    if (c == '-' || c == '+' || std::isdigit(static_cast<unsigned char>(c))) return number();
    auto word = identifier();
    if (word == "True") return true;
    if (word == "False") return false;
    if (word == "None") return nullptr;
    fail("unsupported expression '" + word + "'");
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw std::invalid_argument(what + " at offset " + std::to_string(pos_));
  }

  void skip() {
    while (pos_ < s_.size()) {
      char c = s_[pos_];
      if (std::isspace(static_cast<unsigned char>(c)) || c == '\\') {
        ++pos_;
      } else if (c == '#') {
        while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  bool is_string_start() const {
    std::size_t p = pos_;
    while (p < s_.size() && p < pos_ + 2 && std::strchr("rRbBuU", s_[p]) && s_[p] != '\0') ++p;
    return p < s_.size() && (s_[p] == '"' || s_[p] == '\'');
  }

  std::string identifier() {
    std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) ++pos_;
    if (start == pos_) fail("unexpected character");
    return std::string(s_.substr(start, pos_ - start));
  }

  nlohmann::json strings() {
    std::string out;
    while (true) {
      skip();
      if (pos_ >= s_.size() || !is_string_start()) break;
      out += string_literal();
    }
    return out;
  }

  std::string string_literal() {
    bool raw = false;
    while (s_[pos_] != '"' && s_[pos_] != '\'') {
      if (s_[pos_] == 'r' || s_[pos_] == 'R') raw = true;
      ++pos_;
    }
    const char q = s_[pos_];
    const bool triple = s_.substr(pos_, 3) == std::string(3, q);
    pos_ += triple ? 3 : 1;
    std::string out;
    while (true) {
      if (pos_ >= s_.size()) fail("unterminated string");
      char c = s_[pos_];
      if (triple ? s_.substr(pos_, 3) == std::string(3, q) : c == q) {
        pos_ += triple ? 3 : 1;
        return out;
      }
      if (!triple && c == '\n') fail("newline in string");
      if (c == '\\' && !raw && pos_ + 1 < s_.size()) {
        char e = s_[pos_ + 1];
        pos_ += 2;
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case '\\': out += '\\'; break;
          case '\'': out += '\''; break;
          case '"': out += '"'; break;
          case '\n': break;
          default: out += '\\'; out += e; break;
        }
        continue;
      }
      out += c;
      ++pos_;
    }
  }

  nlohmann::json number() {
    std::size_t start = pos_;
    if (s_[pos_] == '-' || s_[pos_] == '+') ++pos_;
    bool is_float = false;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.' ||
                                s_[pos_] == '_' || ((s_[pos_] == '-' || s_[pos_] == '+') && (s_[pos_ - 1] == 'e' || s_[pos_ - 1] == 'E')))) {
      if (s_[pos_] == '.' || s_[pos_] == 'e' || s_[pos_] == 'E') is_float = true;
      ++pos_;
    }
    std::string text;
    for (char c : s_.substr(start, pos_ - start)) {
      if (c != '_') text += c;
    }
    try {
      if (is_float) return std::stod(text);
      return std::stoll(text, nullptr, 0);
    } catch (const std::exception&) {
      fail("bad number '" + text + "'");
    }
  }

  nlohmann::json sequence(char close) {
    ++pos_;
    auto arr = nlohmann::json::array();
    while (true) {
      skip();
      if (pos_ >= s_.size()) fail("unterminated sequence");
      if (s_[pos_] == close) {
        ++pos_;
        return arr;
      }
      arr.push_back(value());
      skip();
      if (pos_ < s_.size() && s_[pos_] == ',') {
        ++pos_;
      } else if (pos_ >= s_.size() || s_[pos_] != close) {
        fail("expected ',' in sequence");
      }
    }
  }

  nlohmann::json dict() {
    ++pos_;
    auto obj = nlohmann::json::object();
    while (true) {
      skip();
      if (pos_ >= s_.size()) fail("unterminated dict");
      if (s_[pos_] == '}') {
        ++pos_;
        return obj;
      }
      auto key = value();
      if (!key.is_string()) fail("non-string dict key");
      skip();
      if (pos_ >= s_.size() || s_[pos_] != ':') fail("expected ':' in dict");
      ++pos_;
      obj[key.get<std::string>()] = value();
      skip();
      if (pos_ < s_.size() && s_[pos_] == ',') {
        ++pos_;
      } else if (pos_ >= s_.size() || s_[pos_] != '}') {
        fail("expected ',' in dict");
      }
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    lines.push_back(text.substr(start, nl == std::string::npos ? std::string::npos : nl - start));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  return lines;
}

std::size_t indent_of(const std::string& line) {
  std::size_t n = 0;
  while (n < line.size() && (line[n] == ' ' || line[n] == '\t')) ++n;
  return n;
}

int bracket_delta(std::string_view s) {
  int d = 0;
  char quote = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (quote) {
      if (c == '\\') ++i;
      else if (c == quote) quote = 0;
      continue;
    }
    if (c == '#') break;
    if (c == '"' || c == '\'') quote = c;
    else if (c == '(' || c == '[' || c == '{') ++d;
    else if (c == ')' || c == ']' || c == '}') --d;
  }
  return d;
}

// Position of the first '=' outside brackets and strings, or npos.
std::size_t top_level_assign(std::string_view s) {
  int d = 0;
  char quote = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (quote) {
      if (c == '\\') ++i;
      else if (c == quote) quote = 0;
      continue;
    }
    if (c == '"' || c == '\'') quote = c;
    else if (c == '(' || c == '[' || c == '{') ++d;
    else if (c == ')' || c == ']' || c == '}') --d;
    else if (c == '=' && d == 0 && (i + 1 >= s.size() || s[i + 1] != '=')) return i;
  }
  return std::string_view::npos;
}

bool field_call_has_default(const std::string& value) {
  auto v = trim(value);
  if (v.rfind("Field(", 0) != 0) return true;
  auto args = trim(std::string_view(v).substr(6));
  if (args.rfind("...", 0) == 0) return false;
  if (args.find("default_factory") != std::string::npos) return true;
  static const std::regex default_kw(R"((^|[,(\s])default\s*=\s*(\.\.\.)?)");
  std::smatch m;
  if (std::regex_search(args, m, default_kw)) return !m[2].matched;
  // A leading positional argument is the default.
  static const std::regex positional(R"(^[^=,)]+(,|\)))");
  if (!args.empty() && args[0] != ')' && std::regex_search(args, positional)) {
    auto first = args.substr(0, args.find_first_of(",)"));
    if (first.find('=') == std::string::npos) return true;
  }
  return false;
}

}  // namespace

nlohmann::json parse_python_literal(std::string_view text) { return LiteralParser(text).value(); }

std::optional<std::vector<ModelField>> declared_fields(const std::string& source, const std::string& model_name) {
  const std::regex header("^class\\s+" + model_name + "\\s*[(:]");
  auto lines = lines_of(source);
  std::size_t i = 0;
  for (; i < lines.size(); ++i) {
    if (std::regex_search(lines[i], header)) break;
  }
  if (i == lines.size()) return std::nullopt;

  // Skip to the end of a possibly multi-line class header.
  int depth = bracket_delta(lines[i]);
  while (depth > 0 && ++i < lines.size()) depth += bracket_delta(lines[i]);
  ++i;

  static const std::regex field(R"(^([A-Za-z_]\w*)\s*:\s*(.*)$)");
  std::vector<ModelField> fields;
  std::size_t body_indent = 0;
  bool in_docstring = false;
  for (; i < lines.size(); ++i) {
    const auto& line = lines[i];
    auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto ind = indent_of(line);
    if (body_indent == 0) {
      if (ind == 0) break;
      body_indent = ind;
    }
    if (ind < body_indent) break;
    if (in_docstring) {
      if (t.find("\"\"\"") != std::string::npos || t.find("'''") != std::string::npos) in_docstring = false;
      continue;
    }
    if (ind != body_indent) continue;
    if ((t.rfind("\"\"\"", 0) == 0 || t.rfind("'''", 0) == 0)) {
      auto q = t.substr(0, 3);
      if (t.size() < 6 || t.find(q, 3) == std::string::npos) in_docstring = true;
      continue;
    }
    std::smatch m;
    std::string stmt = t;
    int d = bracket_delta(stmt);
    std::size_t j = i;
    while (d > 0 && ++j < lines.size()) {
      stmt += " " + trim(lines[j]);
      d += bracket_delta(lines[j]);
    }
    if (!std::regex_match(stmt, m, field)) {
      i = j;
      continue;
    }
    i = j;
    std::string rest = m[2];
    ModelField f;
    f.name = m[1];
    if (f.name == "model_config") continue;
    auto eq = top_level_assign(rest);
    if (eq == std::string::npos) {
      f.annotation = trim(rest);
    } else {
      f.annotation = trim(std::string_view(rest).substr(0, eq));
      f.has_default = field_call_has_default(rest.substr(eq + 1));
    }
    if (f.annotation.rfind("ClassVar", 0) == 0) continue;
    fields.push_back(std::move(f));
  }
  return fields;
}

namespace {

nlohmann::json type_of_annotation(std::string a) {
  a = trim(a);
  bool nullable = false;
  auto strip_wrapper = [&](const std::string& prefix) {
    if (a.rfind(prefix + "[", 0) == 0 && a.back() == ']') {
      a = trim(a.substr(prefix.size() + 1, a.size() - prefix.size() - 2));
      return true;
    }
    return false;
  };
  if (strip_wrapper("Optional") || strip_wrapper("typing.Optional")) nullable = true;
  if (strip_wrapper("Annotated")) a = trim(a.substr(0, a.find(',')));
  if (auto bar = a.find('|'); bar != std::string::npos) {
    auto left = trim(a.substr(0, bar)), right = trim(a.substr(bar + 1));
    if (right == "None") {
      a = left;
      nullable = true;
    } else if (left == "None") {
      a = right;
      nullable = true;
    } else {
      return nlohmann::json::object();
    }
  }
  auto base = a.substr(0, a.find('['));
  static const std::map<std::string, std::string> types = {
      {"str", "string"},     {"int", "integer"},   {"float", "number"},  {"bool", "boolean"},
      {"list", "array"},     {"List", "array"},    {"Sequence", "array"}, {"tuple", "array"},
      {"Tuple", "array"},    {"dict", "object"},   {"Dict", "object"},    {"Mapping", "object"},
  };
  auto it = types.find(base);
  if (it == types.end()) return nlohmann::json::object();
  nlohmann::json t = it->second;
  if (nullable) t = nlohmann::json::array({it->second, "null"});
  return {{"type", t}};
}

void cross_check(const nlohmann::json& schema, const std::vector<ModelField>& fields, const char* model) {
  std::set<std::string> declared;
  for (const auto& f : fields) declared.insert(f.name);
  std::set<std::string> requested;
  for (const auto& [name, _] : schema.at("properties").items()) {
    requested.insert(name);
    if (!declared.count(name)) {
      throw ArtifactValidationError(ValidationCategory::schema_mismatch,
                                    std::string(model) + " does not declare field '" + name + "'");
    }
  }
  for (const auto& f : fields) {
    if (!f.has_default && !requested.count(f.name)) {
      throw ArtifactValidationError(ValidationCategory::schema_mismatch, std::string(model) + " requires field '" +
                                                                             f.name + "' absent from the schema");
    }
  }
}


ToolMeta read_meta(const std::string& source) {
  static const std::regex meta_assign(R"((^|\n)__TOOL_META__\s*(:[^=\n]*)?=\s*)");
  std::smatch m;
  if (!std::regex_search(source, m, meta_assign)) {
    throw ArtifactValidationError(ValidationCategory::missing_meta, "source does not define __TOOL_META__");
  }
  nlohmann::json meta;
  try {
    meta = parse_python_literal(std::string_view(source).substr(m.position(0) + m.length(0)));
  } catch (const std::exception& e) {
    throw ArtifactValidationError(ValidationCategory::malformed_meta, e.what());
  }
  if (!meta.is_object()) throw ArtifactValidationError(ValidationCategory::malformed_meta, "__TOOL_META__ is not a dict");
  ToolMeta out;
  for (const char* key : {"name", "description"}) {
    auto it = meta.find(key);
    if (it == meta.end() || !it->is_string()) {
      throw ArtifactValidationError(ValidationCategory::malformed_meta,
                                    std::string("__TOOL_META__ lacks string '") + key + "'");
    }
  }
  out.name = meta["name"].get<std::string>();
  out.description = meta["description"].get<std::string>();
  if (auto it = meta.find("dependencies"); it != meta.end()) {
    if (!it->is_array()) throw ArtifactValidationError(ValidationCategory::malformed_meta, "dependencies is not a list");
    for (const auto& d : *it) {
      if (!d.is_string()) throw ArtifactValidationError(ValidationCategory::malformed_meta, "dependency is not a string");
      out.dependencies.push_back(d.get<std::string>());
    }
  }
  return out;
}

void check_structure(const std::string& source, std::vector<ModelField>& input_fields,
                     std::vector<ModelField>& output_fields) {
  auto in = declared_fields(source, "InputModel");
  if (!in) throw ArtifactValidationError(ValidationCategory::missing_model, "class InputModel not declared");
  auto out = declared_fields(source, "OutputModel");
  if (!out) throw ArtifactValidationError(ValidationCategory::missing_model, "class OutputModel not declared");
  static const std::regex entry(R"((^|\n)(async\s+)?def\s+run\s*\()");
  if (!std::regex_search(source, entry)) {
    throw ArtifactValidationError(ValidationCategory::missing_entrypoint, "no top-level def run(...)");
  }
  static const std::vector<std::regex> installers = {
      std::regex(R"(\bpip3?\s+install\b)", std::regex::icase),
      std::regex(R"(['"]-m['"]\s*,\s*['"]pip['"])"),
      std::regex(R"(\bpip\s*\.\s*main\s*\()"),
      std::regex(R"(\bpip\._internal\b)"),
      std::regex(R"(\bensurepip\b)"),
      std::regex(R"(\beasy_install\b)"),
      std::regex(R"(\b(conda|mamba)\s+install\b)"),
      std::regex(R"(\buv\s+(pip\s+)?(install|add)\b)"),
      std::regex(R"(['"]install['"][^\n]*['"]pip['"]|['"]pip['"][^\n]*['"]install['"])"),
  };
  for (const auto& re : installers) {
    std::smatch m;
    if (std::regex_search(source, m, re)) {
      throw ArtifactValidationError(ValidationCategory::self_install,
                                    "dependency installation inside the script ('" + m.str(0) + "')");
    }
  }
  input_fields = std::move(*in);
  output_fields = std::move(*out);
}

}  // namespace

nlohmann::json schema_from_fields(const std::vector<ModelField>& fields) {
  nlohmann::json props = nlohmann::json::object();
  auto required = nlohmann::json::array();
  for (const auto& f : fields) {
    props[f.name] = type_of_annotation(f.annotation);
    if (!f.has_default) required.push_back(f.name);
  }
  return {{"type", "object"}, {"properties", props}, {"required", required}};
}

ToolArtifact validate_artifact(const std::string& source, const ToolRequest& request) {
  ToolArtifact a;
  a.meta = read_meta(source);
  if (a.meta.name != request.name) {
    throw ArtifactValidationError(ValidationCategory::name_mismatch,
                                  "__TOOL_META__ name '" + a.meta.name + "' differs from requested '" + request.name + "'");
  }
  for (const auto& d : a.meta.dependencies) {
    if (!valid_dependency_name(d)) {
      throw ArtifactValidationError(ValidationCategory::malformed_meta, "invalid dependency name '" + d + "'");
    }
  }
  std::vector<ModelField> in, out;
  check_structure(source, in, out);
  if (!is_object_schema(request.input_schema) || !is_object_schema(request.output_schema)) {
    throw ArtifactValidationError(ValidationCategory::schema_mismatch, "request schemas are not object schemas");
  }
  cross_check(request.input_schema, in, "InputModel");
  cross_check(request.output_schema, out, "OutputModel");
  a.source = source;
  a.input_schema = request.input_schema;
  a.output_schema = request.output_schema;
  a.digest = sha256_hex(source);
  return a;
}

ToolRequest request_from_source(const std::string& source, const std::string& name) {
  auto meta = read_meta(source);
  std::vector<ModelField> in, out;
  check_structure(source, in, out);
  ToolRequest r;
  r.name = name.empty() ? meta.name : name;
  r.description = meta.description;
  r.input_schema = schema_from_fields(in);
  r.output_schema = schema_from_fields(out);
  return r;
}

ToolArtifact artifact_from_record(const ToolRecord& r) {
  ToolArtifact a;
  a.meta = {r.name, r.description, r.dependencies};
  a.source = r.source;
  a.input_schema = r.input_schema;
  a.output_schema = r.output_schema;
  a.digest = r.digest;
  return a;
}

std::string truncate_output(const std::string& text, std::size_t max_bytes, bool* truncated) {
  if (truncated) *truncated = false;
  if (text.size() <= max_bytes) return text;
  std::size_t cut = max_bytes;
  // Step back over UTF-8 continuation bytes so no code point is split.
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  if (truncated) *truncated = true;
  return text.substr(0, cut) + std::string(kTruncationMarker);
}

// ---------------------------------------------------------------------------
// Provisioning

bool valid_dependency_name(std::string_view dep) {
  static const std::regex re(R"(^[A-Za-z0-9]([A-Za-z0-9._-]*[A-Za-z0-9])?(\[[A-Za-z0-9_,.-]+\])?\s*((==|>=|<=|~=|!=|<|>)\s*[A-Za-z0-9.*+!_-]+\s*,?\s*)*$)");
  return std::regex_match(dep.begin(), dep.end(), re);
}

namespace {

std::string dependency_base_name(const std::string& dep) {
  auto end = dep.find_first_of("[<>=!~ ");
  std::string name = dep.substr(0, end);
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) {
    return c == '_' || c == '.' ? '-' : static_cast<char>(std::tolower(c));
  });
  return name;
}

std::vector<std::string> sorted_unique(std::vector<std::string> deps) {
  for (auto& d : deps) d = trim(d);
  std::sort(deps.begin(), deps.end());
  deps.erase(std::unique(deps.begin(), deps.end()), deps.end());
  return deps;
}

std::vector<std::string> base_env() {
  const char* path = std::getenv("PATH");
  return {std::string("PATH=") + (path ? path : "/usr/local/bin:/usr/bin:/bin"), "LANG=C.UTF-8",
          "PYTHONIOENCODING=utf-8", "PYTHONDONTWRITEBYTECODE=1"};
}

}  // namespace

std::string environment_key(const std::vector<std::string>& dependencies) {
  auto deps = sorted_unique(dependencies);
  if (deps.empty()) return "base";
  std::string joined;
  for (const auto& d : deps) joined += d + "\n";
  return sha256_hex(joined);
}

Provisioner::Provisioner(ProvisionConfig config) : config_(std::move(config)) {}

std::size_t Provisioner::provision_runs() const {
  std::lock_guard lock(mu_);
  return runs_;
}

Environment Provisioner::provision(const std::vector<std::string>& dependencies) {
  auto deps = sorted_unique(dependencies);
  for (const auto& d : deps) {
    if (!valid_dependency_name(d)) throw ProvisioningError("invalid dependency name '" + d + "'");
  }
  const auto key = environment_key(deps);
  if (key == "base") return {key, config_.python};

  std::shared_future<Environment> fut;
  std::promise<Environment> promise;
  bool owner = false;
  {
    std::lock_guard lock(mu_);
    auto it = envs_.find(key);
    if (it != envs_.end()) {
      fut = it->second;
    } else {
      fut = promise.get_future().share();
      envs_.emplace(key, fut);
      ++runs_;
      owner = true;
    }
  }
  if (owner) {
    try {
      promise.set_value(build(key, deps));
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(mu_);
      envs_.erase(key);
    }
  }
  return fut.get();
}

Environment Provisioner::build(const std::string& key, const std::vector<std::string>& deps) {
  switch (config_.mode) {
    case ProvisionMode::index: {
      for (const auto& d : deps) {
        if (!config_.index.count(dependency_base_name(d))) {
          throw ProvisioningError("dependency '" + d + "' not found in package index");
        }
      }
      return {key, config_.python};
    }
    case ProvisionMode::installed: {
      static const char* probe =
          "import sys, importlib.metadata as md, importlib.util as iu\n"
          "missing = []\n"
          "for d in sys.argv[1:]:\n"
          "    try:\n"
          "        md.version(d)\n"
          "        continue\n"
          "    except Exception:\n"
          "        pass\n"
          "    try:\n"
          "        if iu.find_spec(d.replace('-', '_')) is not None:\n"
          "            continue\n"
          "    except Exception:\n"
          "        pass\n"
          "    missing.append(d)\n"
          "print('\\n'.join(missing))\n"
          "sys.exit(1 if missing else 0)\n";
      ProcessSpec spec;
      spec.argv = {config_.python.string(), "-c", probe};
      for (const auto& d : deps) spec.argv.push_back(d.substr(0, d.find_first_of("[<>=!~ ")));
      spec.env = base_env();
      spec.cwd = fs::temp_directory_path();
      spec.timeout = std::chrono::seconds(60);
      auto out = run_process(spec);
      if (out.exit_code != 0) {
        throw ProvisioningError("unresolvable dependencies: " + trim(out.stdout_data + out.stderr_tail));
      }
      return {key, config_.python};
    }
    case ProvisionMode::pip: {
      if (config_.cache_dir.empty()) throw ProvisioningError("pip provisioning needs a cache directory");
      const fs::path dir = fs::absolute(config_.cache_dir) / ("env-" + key.substr(0, 16));
      const fs::path python = dir / "bin" / "python";
      if (fs::exists(dir / ".ready")) return {key, python};
      fs::remove_all(dir);
      fs::create_directories(dir.parent_path());
      auto run = [&](std::vector<std::string> argv, const std::string& what) {
        ProcessSpec spec;
        spec.argv = std::move(argv);
        spec.env = base_env();
        spec.cwd = dir.parent_path();
        spec.timeout = config_.install_timeout;
        auto out = run_process(spec);
        if (out.exit_code != 0) {
          fs::remove_all(dir);
          throw ProvisioningError(what + " failed: " + trim(out.stderr_tail));
        }
      };
      run({config_.python.string(), "-m", "venv", "--system-site-packages", dir.string()}, "venv creation");
      std::vector<std::string> argv = {python.string(), "-m", "pip", "install", "--disable-pip-version-check", "-q"};
      argv.insert(argv.end(), deps.begin(), deps.end());
      run(std::move(argv), "pip install");
      std::ofstream(dir / ".ready") << key << "\n";
      return {key, python};
    }
  }
  throw ProvisioningError("unknown provisioning mode");
}

// ---------------------------------------------------------------------------
// Invocation

Sandbox::Sandbox(SandboxConfig config) : config_(std::move(config)), provisioner_(config_.provision) {
  if (!config_.harness.empty()) config_.harness = fs::absolute(config_.harness);
  config_.work_root = fs::absolute(config_.work_root);
  if (config_.max_concurrent == 0) config_.max_concurrent = 1;
}

std::size_t Sandbox::spawned() const {
  std::lock_guard lock(mu_);
  return spawned_;
}

Environment Sandbox::provision(const ToolArtifact& artifact) { return provisioner_.provision(artifact.meta.dependencies); }

namespace {

InvocationResult error_result(InvocationStatus status, const std::string& kind, const std::string& message,
                              std::size_t max_bytes) {
  InvocationResult r;
  r.status = status;
  r.payload = {{"kind", kind}, {"message", message}};
  r.output_text = truncate_output(r.payload.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), max_bytes,
                                  &r.truncated);
  return r;
}

std::string describe_exit(const ProcessOutcome& o) {
  std::string what = o.exit_code ? "harness exited with status " + std::to_string(*o.exit_code)
                                 : "harness killed by signal " + std::to_string(o.term_signal);
  if (!o.stderr_tail.empty()) {
    auto tail = o.stderr_tail.size() > 2000 ? o.stderr_tail.substr(o.stderr_tail.size() - 2000) : o.stderr_tail;
    what += ": " + trim(tail);
  }
  return what;
}

}  // namespace

InvocationResult Sandbox::invoke(const ToolArtifact& artifact, const nlohmann::json& payload,
                                 const InvocationLimits& limits) {
  const auto max_bytes = limits.max_output_bytes;
  if (auto violation = schema_violation(payload, artifact.input_schema)) {
    return error_result(InvocationStatus::tool_error, "InputValidationError", *violation, max_bytes);
  }
  Environment env;
  try {
    env = provision(artifact);
  } catch (const std::exception& e) {
    return error_result(InvocationStatus::tool_error, "ProvisioningError", e.what(), max_bytes);
  }
  if (config_.harness.empty()) {
    return error_result(InvocationStatus::protocol_error, "HarnessMissing", "no harness configured", max_bytes);
  }

  {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return running_ < config_.max_concurrent; });
    ++running_;
    ++spawned_;
  }
  struct Release {
    Sandbox* s;
    ~Release() {
      {
        std::lock_guard lock(s->mu_);
        --s->running_;
      }
      s->cv_.notify_one();
    }
  } release{this};

  fs::create_directories(config_.work_root);
  std::string tmpl = (config_.work_root / "insitu-scratch-XXXXXX").string();
  if (!::mkdtemp(tmpl.data())) {
    return error_result(InvocationStatus::protocol_error, "ScratchError", "cannot create scratch workspace", max_bytes);
  }
  const fs::path scratch = tmpl;
  struct Cleanup {
    fs::path p;
    ~Cleanup() {
      std::error_code ec;
      fs::remove_all(p, ec);
    }
  } cleanup{scratch};

  {
    std::ofstream(scratch / "tool.py", std::ios::binary) << artifact.source;
  }

  ProcessSpec spec;
  spec.argv = {env.python.string(), config_.harness.string(), (scratch / "tool.py").string()};
  spec.env = base_env();
  spec.env.push_back("HOME=" + scratch.string());
  spec.env.push_back("TMPDIR=" + scratch.string());
  spec.env.push_back("PYTHONUNBUFFERED=1");
  for (const auto& name : config_.env_allowlist) {
    if (const char* v = std::getenv(name.c_str())) spec.env.push_back(name + "=" + v);
  }
  spec.cwd = scratch;
  spec.stdin_data = nlohmann::json{{"input", payload}}.dump() + "\n";
  spec.timeout = limits.timeout;
  if (config_.confine_writes) spec.writable_dirs = {scratch};

  ProcessOutcome out;
  try {
    out = run_process(spec);
  } catch (const std::exception& e) {
    return error_result(InvocationStatus::protocol_error, "SpawnError", e.what(), max_bytes);
  }

  InvocationResult r;
  auto finish = [&](InvocationResult res) {
    res.wall_time = out.wall_time;
    res.spawned = true;
    res.stderr_tail = out.stderr_tail;
    return res;
  };
  if (out.timed_out) {
    return finish(error_result(InvocationStatus::timeout, "Timeout",
                               "tool exceeded " + std::to_string(limits.timeout.count()) + " ms and was terminated",
                               max_bytes));
  }
  if (out.exit_code != 0) {
    return finish(error_result(InvocationStatus::protocol_error, "ProtocolError", describe_exit(out), max_bytes));
  }
  if (out.stdout_overflow) {
    return finish(error_result(InvocationStatus::protocol_error, "ProtocolError", "harness output exceeds hard limit",
                               max_bytes));
  }
  auto doc = nlohmann::json::parse(out.stdout_data, nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("status") || !doc["status"].is_string()) {
    return finish(error_result(InvocationStatus::protocol_error, "ProtocolError",
                               "harness output is not a protocol document", max_bytes));
  }
  const auto status = doc["status"].get<std::string>();
  if (status == "ok" && doc.contains("output")) {
    if (auto violation = schema_violation(doc["output"], artifact.output_schema)) {
      return finish(error_result(InvocationStatus::protocol_error, "OutputSchemaViolation", *violation, max_bytes));
    }
    r.status = InvocationStatus::ok;
    r.payload = doc["output"];
    r.output_text = truncate_output(r.payload.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace),
                                    max_bytes, &r.truncated);
    return finish(std::move(r));
  }
  if (status == "error" && doc.contains("kind") && doc["kind"].is_string() && doc.contains("message") &&
      doc["message"].is_string()) {
    return finish(error_result(InvocationStatus::tool_error, doc["kind"].get<std::string>(),
                               doc["message"].get<std::string>(), max_bytes));
  }
  return finish(error_result(InvocationStatus::protocol_error, "ProtocolError", "malformed protocol document",
                             max_bytes));
}

}  // namespace insitu
