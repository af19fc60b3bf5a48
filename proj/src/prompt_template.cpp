#include "insitu/prompt_suite.hpp"

#include <cctype>
#include <optional>

namespace insitu {

struct PromptTemplate::Node {
  enum class Kind { text, var, cond, loop } kind = Kind::text;
  std::string text;
  std::vector<std::string> path;
  std::string loop_var;
  std::vector<Node> children;
  std::vector<Node> else_children;
};

namespace {

using Node = PromptTemplate::Node;

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

bool is_identifier(std::string_view s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
  }
  return true;
}

std::vector<std::string> parse_path(const std::string& expr) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    auto dot = expr.find('.', start);
    auto part = expr.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!is_identifier(part)) throw TemplateError("invalid template expression '" + expr + "'");
    parts.push_back(part);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return parts;
}

struct Token {
  enum class Kind { text, var, tag } kind;
  std::string content;
};

std::vector<Token> tokenize(const std::string& body) {
  std::vector<Token> tokens;
  std::size_t pos = 0;
  std::string pending;
  while (pos < body.size()) {
    auto var = body.find("{{", pos);
    auto tag = body.find("{%", pos);
    auto next = std::min(var, tag);
    if (next == std::string::npos) {
      pending += body.substr(pos);
      break;
    }
    pending += body.substr(pos, next - pos);
    const bool is_tag = next == tag;
    auto close = body.find(is_tag ? "%}" : "}}", next + 2);
    if (close == std::string::npos) throw TemplateError("unterminated template marker");
    std::string inner = trim(std::string_view(body).substr(next + 2, close - next - 2));
    pos = close + 2;

    if (is_tag) {
      // A tag alone on its line disappears with the line.
      auto line_start = pending.rfind('\n');
      std::string_view before = std::string_view(pending).substr(line_start == std::string::npos ? 0 : line_start + 1);
      bool only_ws_before = trim(before).empty();
      std::size_t after = pos;
      while (after < body.size() && (body[after] == ' ' || body[after] == '\t')) ++after;
      bool ends_line = after == body.size() || body[after] == '\n';
      if (only_ws_before && ends_line) {
        pending.resize(pending.size() - before.size());
        pos = after < body.size() ? after + 1 : after;
      }
    }
    if (!pending.empty()) tokens.push_back({Token::Kind::text, std::move(pending)});
    pending.clear();
    tokens.push_back({is_tag ? Token::Kind::tag : Token::Kind::var, std::move(inner)});
  }
  if (!pending.empty()) tokens.push_back({Token::Kind::text, std::move(pending)});
  return tokens;
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

// Parses tokens[pos..] until one of `terminators` (returned) or end.
std::string parse_nodes(const std::vector<Token>& tokens, std::size_t& pos, std::vector<Node>& out,
                        std::initializer_list<std::string_view> terminators) {
  while (pos < tokens.size()) {
    const auto& t = tokens[pos++];
    if (t.kind == Token::Kind::text) {
      Node n;
      n.text = t.content;
      out.push_back(std::move(n));
      continue;
    }
    if (t.kind == Token::Kind::var) {
      Node n;
      n.kind = Node::Kind::var;
      n.path = parse_path(t.content);
      out.push_back(std::move(n));
      continue;
    }
    auto words = split_words(t.content);
    if (words.empty()) throw TemplateError("empty block tag");
    const auto& head = words[0];
    for (auto term : terminators) {
      if (head == term) {
        if (words.size() != 1) throw TemplateError("unexpected arguments to " + head);
        return head;
      }
    }
    if (head == "if") {
      if (words.size() != 2) throw TemplateError("malformed if tag: " + t.content);
      Node n;
      n.kind = Node::Kind::cond;
      n.path = parse_path(words[1]);
      auto end = parse_nodes(tokens, pos, n.children, {"else", "endif"});
      if (end == "else") end = parse_nodes(tokens, pos, n.else_children, {"endif"});
      if (end != "endif") throw TemplateError("if without endif");
      out.push_back(std::move(n));
    } else if (head == "for") {
      if (words.size() != 4 || words[2] != "in" || !is_identifier(words[1])) {
        throw TemplateError("malformed for tag: " + t.content);
      }
      Node n;
      n.kind = Node::Kind::loop;
      n.loop_var = words[1];
      n.path = parse_path(words[3]);
      if (parse_nodes(tokens, pos, n.children, {"endfor"}) != "endfor") throw TemplateError("for without endfor");
      out.push_back(std::move(n));
    } else {
      throw TemplateError("unsupported block tag: " + head);
    }
  }
  return {};
}

void collect_slots(const std::vector<Node>& nodes, std::set<std::string>& guarded, std::set<std::string>& loop_vars,
                   std::set<std::string>& required, std::set<std::string>& referenced) {
  for (const auto& n : nodes) {
    switch (n.kind) {
      case Node::Kind::text: break;
      case Node::Kind::var:
      case Node::Kind::loop: {
        const auto& root = n.path.front();
        if (!loop_vars.count(root)) {
          referenced.insert(root);
          if (!guarded.count(root)) required.insert(root);
        }
        if (n.kind == Node::Kind::loop) {
          bool fresh = loop_vars.insert(n.loop_var).second;
          collect_slots(n.children, guarded, loop_vars, required, referenced);
          if (fresh) loop_vars.erase(n.loop_var);
        }
        break;
      }
      case Node::Kind::cond: {
        const auto& root = n.path.front();
        if (!loop_vars.count(root)) referenced.insert(root);
        bool fresh = guarded.insert(root).second;
        collect_slots(n.children, guarded, loop_vars, required, referenced);
        if (fresh) guarded.erase(root);
        collect_slots(n.else_children, guarded, loop_vars, required, referenced);
        break;
      }
    }
  }
}

using Scope = std::vector<std::pair<std::string, const nlohmann::json*>>;

std::string dotted(const std::vector<std::string>& path) {
  std::string s;
  for (const auto& p : path) s += (s.empty() ? "" : ".") + p;
  return s;
}

const nlohmann::json* lookup(const std::vector<std::string>& path, const nlohmann::json& slots, const Scope& scope) {
  const nlohmann::json* cur = nullptr;
  for (auto it = scope.rbegin(); it != scope.rend(); ++it) {
    if (it->first == path.front()) {
      cur = it->second;
      break;
    }
  }
  if (!cur) {
    if (!slots.is_object()) return nullptr;
    auto it = slots.find(path.front());
    if (it == slots.end()) return nullptr;
    cur = &*it;
  }
  for (std::size_t i = 1; i < path.size(); ++i) {
    if (!cur->is_object()) return nullptr;
    auto it = cur->find(path[i]);
    if (it == cur->end()) return nullptr;
    cur = &*it;
  }
  return cur;
}

bool truthy(const nlohmann::json* v) {
  if (!v || v->is_null()) return false;
  if (v->is_boolean()) return v->get<bool>();
  if (v->is_string()) return !v->get_ref<const std::string&>().empty();
  if (v->is_array() || v->is_object()) return !v->empty();
  if (v->is_number()) return v->get<double>() != 0.0;
  return true;
}

void render_nodes(const std::vector<Node>& nodes, const nlohmann::json& slots, Scope& scope, std::string& out) {
  for (const auto& n : nodes) {
    switch (n.kind) {
      case Node::Kind::text: out += n.text; break;
      case Node::Kind::var: {
        const auto* v = lookup(n.path, slots, scope);
        if (!v) throw RenderError(dotted(n.path));
        if (v->is_string()) {
          out += v->get_ref<const std::string&>();
        } else if (!v->is_null()) {
          out += v->dump();
        }
        break;
      }
      case Node::Kind::cond:
        render_nodes(truthy(lookup(n.path, slots, scope)) ? n.children : n.else_children, slots, scope, out);
        break;
      case Node::Kind::loop: {
        const auto* v = lookup(n.path, slots, scope);
        if (!v) throw RenderError(dotted(n.path));
        if (v->is_null()) break;
        if (!v->is_array()) throw TemplateError("loop over non-list slot " + dotted(n.path));
        for (const auto& item : *v) {
          scope.emplace_back(n.loop_var, &item);
          render_nodes(n.children, slots, scope, out);
          scope.pop_back();
        }
        break;
      }
    }
  }
}

}  // namespace

PromptTemplate PromptTemplate::compile(std::string body) {
  PromptTemplate t;
  auto tokens = tokenize(body);
  auto nodes = std::make_shared<std::vector<Node>>();
  std::size_t pos = 0;
  auto stray = parse_nodes(tokens, pos, *nodes, {"else", "endif", "endfor"});
  if (!stray.empty()) throw TemplateError("unbalanced block tag: " + stray);

  std::set<std::string> guarded, loop_vars, referenced;
  collect_slots(*nodes, guarded, loop_vars, t.required_, referenced);
  for (const auto& r : referenced) {
    if (!t.required_.count(r)) t.optional_.insert(r);
  }
  t.body_ = std::move(body);
  t.nodes_ = std::move(nodes);
  return t;
}

std::string PromptTemplate::render(const nlohmann::json& slots) const {
  for (const auto& r : required_) {
    if (!slots.is_object() || !slots.contains(r)) throw RenderError(r);
  }
  std::string out;
  out.reserve(body_.size() + 256);
  Scope scope;
  render_nodes(*nodes_, slots, scope, out);
  return out;
}

}  // namespace insitu
