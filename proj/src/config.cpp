#include "dyrate/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "dyrate/error.hpp"

namespace dyrate {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& key, const std::string& source) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(source + ": key '" + key + "' has invalid value '" + text + "'");
  }
  return value;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& source) {
  KeyValueConfig cfg;
  cfg.source_ = source;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    }
    if (cfg.values_.contains(key)) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    cfg.values_[key] = std::string(trim(line.substr(eq + 1)));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str(), path.string());
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : parse_number<double>(it->second, key, source_);
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : parse_number<std::size_t>(it->second, key, source_);
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : parse_number<std::uint64_t>(it->second, key, source_);
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError(source_ + ": key '" + key + "' expects true or false, got '" +
                    it->second + "'");
}

KeyValueConfig KeyValueConfig::section(const std::string& prefix) const {
  KeyValueConfig out;
  out.source_ = source_;
  const std::string p = prefix + ".";
  for (const auto& [k, v] : values_) {
    if (k.starts_with(p)) out.values_[k.substr(p.size())] = v;
  }
  return out;
}

void KeyValueConfig::require_known(const std::vector<std::string>& known) const {
  for (const auto& [k, v] : values_) {
    bool ok = false;
    for (const auto& name : known) ok = ok || name == k;
    if (!ok) throw ConfigError(source_ + ": unknown key '" + k + "'");
  }
}

std::string KeyValueConfig::format() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace dyrate
