#include "quadformer/keyvalue.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "quadformer/tensor.hpp"

namespace qf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(where + ": empty key");
    if (!out.emplace(key, value).second) throw ParseError(where + ": duplicate key '" + key + "'");
  }
  return out;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path);
}

const std::string* KeyReader::take(const std::string& key) {
  const auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  last_value_ = it->second;
  values_.erase(it);
  return &last_value_;
}

void KeyReader::get(const std::string& key, std::string& out) {
  if (const auto* v = take(key)) out = *v;
}

void KeyReader::get(const std::string& key, double& out) {
  const auto* v = take(key);
  if (!v) return;
  double parsed = 0.0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), parsed);
  if (ec != std::errc{} || ptr != v->data() + v->size()) {
    throw ParseError(origin_ + ": key '" + key + "' expects a number, got '" + *v + "'");
  }
  out = parsed;
}

void KeyReader::get(const std::string& key, bool& out) {
  const auto* v = take(key);
  if (!v) return;
  if (*v == "true" || *v == "1" || *v == "on") {
    out = true;
  } else if (*v == "false" || *v == "0" || *v == "off") {
    out = false;
  } else {
    throw ParseError(origin_ + ": key '" + key + "' expects true/false, got '" + *v + "'");
  }
}

void KeyReader::get(const std::string& key, std::size_t& out) {
  const auto* v = take(key);
  if (!v) return;
  std::size_t parsed = 0;
  const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), parsed);
  if (ec != std::errc{} || ptr != v->data() + v->size()) {
    throw ParseError(origin_ + ": key '" + key + "' expects a non-negative integer, got '" + *v + "'");
  }
  out = parsed;
}

void KeyReader::finish() const {
  if (values_.empty()) return;
  std::string keys;
  for (const auto& [k, v] : values_) keys += (keys.empty() ? "" : ", ") + k;
  throw ParseError(origin_ + ": unknown key(s): " + keys);
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace qf
