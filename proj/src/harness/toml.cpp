#include <cctype>
#include <string>

#include "fgc/config.hpp"
#include "fgc/error.hpp"

namespace fgc::harness {

namespace {

using nlohmann::json;

class TomlParser {
 public:
  TomlParser(const std::string& text, std::string source) : s_(text), source_(std::move(source)) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (true) {
      skip_blank_lines();
      if (at_end()) break;
      if (peek() == '[') {
        table = header(root);
      } else {
        key_value(*table);
      }
      end_of_line();
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(source_ + ":" + std::to_string(line_) + ": " + what);
  }

  bool at_end() const { return pos_ >= s_.size(); }
  char peek() const { return at_end() ? '\0' : s_[pos_]; }
  char take() {
    char c = s_[pos_++];
    if (c == '\n') ++line_;
    return c;
  }

  void skip_spaces() {
    while (!at_end() && (peek() == ' ' || peek() == '\t')) take();
  }
  void skip_comment() {
    if (peek() == '#') {
      while (!at_end() && peek() != '\n') take();
    }
  }
  void skip_blank_lines() {
    while (!at_end()) {
      skip_spaces();
      skip_comment();
      if (peek() == '\n' || peek() == '\r') {
        take();
      } else {
        break;
      }
    }
  }
  // Inside arrays newlines and comments are insignificant.
  void skip_ws_newlines() {
    while (!at_end()) {
      skip_spaces();
      skip_comment();
      if (peek() == '\n' || peek() == '\r') {
        take();
      } else {
        break;
      }
    }
  }
  void end_of_line() {
    skip_spaces();
    skip_comment();
    if (at_end()) return;
    if (peek() == '\r') take();
    if (peek() != '\n') fail(std::string("unexpected '") + peek() + "' after value");
    take();
  }

  std::string bare_or_quoted_key() {
    skip_spaces();
    if (peek() == '"') return basic_string();
    std::string key;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' ||
                         peek() == '-')) {
      key += take();
    }
    if (key.empty()) fail("expected a key");
    return key;
  }

  std::vector<std::string> dotted_key() {
    std::vector<std::string> parts{bare_or_quoted_key()};
    skip_spaces();
    while (peek() == '.') {
      take();
      parts.push_back(bare_or_quoted_key());
      skip_spaces();
    }
    return parts;
  }

  json* descend(json& root, const std::vector<std::string>& path, std::size_t count) {
    json* node = &root;
    for (std::size_t i = 0; i < count; ++i) {
      json& next = (*node)[path[i]];
      if (next.is_null()) next = json::object();
      if (next.is_array()) {
        if (next.empty() || !next.back().is_object()) fail("key '" + path[i] + "' is not a table");
        node = &next.back();
      } else if (next.is_object()) {
        node = &next;
      } else {
        fail("key '" + path[i] + "' is not a table");
      }
    }
    return node;
  }

  json* header(json& root) {
    take();
    const bool array = peek() == '[';
    if (array) take();
    auto path = dotted_key();
    if (peek() != ']') fail("expected ']' closing the table header");
    take();
    if (array) {
      if (peek() != ']') fail("expected ']]' closing the array-of-tables header");
      take();
    }
    json* parent = descend(root, path, path.size() - 1);
    json& slot = (*parent)[path.back()];
    if (array) {
      if (slot.is_null()) slot = json::array();
      if (!slot.is_array()) fail("'" + path.back() + "' is already defined as a non-array");
      slot.push_back(json::object());
      return &slot.back();
    }
    if (slot.is_null()) slot = json::object();
    if (!slot.is_object()) fail("'" + path.back() + "' is already defined as a non-table");
    return &slot;
  }

  void key_value(json& table) {
    auto path = dotted_key();
    skip_spaces();
    if (peek() != '=') fail("expected '=' after key '" + path.back() + "'");
    take();
    skip_spaces();
    json* target = descend(table, path, path.size() - 1);
    if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
    (*target)[path.back()] = value();
  }

  std::string basic_string() {
    take();  // opening quote
    std::string out;
    while (true) {
      if (at_end() || peek() == '\n') fail("unterminated string");
      char c = take();
      if (c == '"') break;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (at_end()) fail("unterminated escape");
      char e = take();
      switch (e) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        default: fail(std::string("unsupported escape \\") + e);
      }
    }
    return out;
  }

  std::string literal_string() {
    take();
    std::string out;
    while (true) {
      if (at_end() || peek() == '\n') fail("unterminated string");
      char c = take();
      if (c == '\'') break;
      out += c;
    }
    return out;
  }

  json number_or_word() {
    std::string tok;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' ||
                         peek() == '-' || peek() == '.' || peek() == '_')) {
      char c = take();
      if (c != '_') tok += c;
    }
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok.empty()) fail("expected a value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" ||
                          tok == "nan";
    try {
      std::size_t used = 0;
      if (is_float) {
        double v = std::stod(tok, &used);
        if (used == tok.size()) return v;
      } else if (tok[0] == '-') {
        long long v = std::stoll(tok, &used);
        if (used == tok.size()) return v;
      } else {
        unsigned long long v = std::stoull(tok[0] == '+' ? tok.substr(1) : tok, &used);
        if (used == tok.size() - (tok[0] == '+' ? 1 : 0)) return v;
      }
    } catch (const std::exception&) {
    }
    fail("invalid value '" + tok + "'");
  }

  json array() {
    take();
    json out = json::array();
    while (true) {
      skip_ws_newlines();
      if (peek() == ']') {
        take();
        return out;
      }
      out.push_back(value());
      skip_ws_newlines();
      if (peek() == ',') {
        take();
      } else if (peek() != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  json inline_table() {
    take();
    json out = json::object();
    skip_spaces();
    if (peek() == '}') {
      take();
      return out;
    }
    while (true) {
      key_value(out);
      skip_spaces();
      char c = at_end() ? '\0' : take();
      if (c == '}') return out;
      if (c != ',') fail("expected ',' or '}' in inline table");
    }
  }

  json value() {
    switch (peek()) {
      case '"': return basic_string();
      case '\'': return literal_string();
      case '[': return array();
      case '{': return inline_table();
      default: return number_or_word();
    }
  }

  const std::string& s_;
  std::string source_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

}  // namespace

nlohmann::json parse_toml(const std::string& text, const std::string& source) {
  return TomlParser(text, source).parse();
}

}  // namespace fgc::harness
