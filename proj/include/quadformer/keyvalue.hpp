#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>

namespace qf {

/// Ordered `key = value` entries; '#' starts a comment, blank lines skipped.
using KeyValues = std::map<std::string, std::string>;

/// Throws ParseError naming `origin` and the line on malformed or duplicate entries.
KeyValues parse_key_values(const std::string& text, const std::string& origin);
KeyValues read_key_values(const std::string& path);

/// Typed accessors that remove the key once read, so leftovers are unknown keys.
class KeyReader {
 public:
  KeyReader(KeyValues values, std::string origin) : values_(std::move(values)), origin_(std::move(origin)) {}

  void get(const std::string& key, std::string& out);
  void get(const std::string& key, double& out);
  void get(const std::string& key, bool& out);
  void get(const std::string& key, std::size_t& out);

  /// Throws ParseError listing keys that were never read.
  void finish() const;

 private:
  const std::string* take(const std::string& key);
  KeyValues values_;
  std::string origin_;
  std::string last_value_;
};

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace qf
