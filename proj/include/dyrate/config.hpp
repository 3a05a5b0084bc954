#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace dyrate {

// Text config of `key = value` lines. Blank lines and lines starting with
// '#' are ignored; keys may be dotted (`model.n_layers`).
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::string& source = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  // Typed getters throw ConfigError naming the key when the value does not
  // parse; missing keys return the fallback.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Entries under `prefix.`, with the prefix removed.
  KeyValueConfig section(const std::string& prefix) const;
  // Throws ConfigError for any key outside `known`.
  void require_known(const std::vector<std::string>& known) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  std::string format() const;

 private:
  std::map<std::string, std::string> values_;
  std::string source_ = "<string>";
};

}  // namespace dyrate
