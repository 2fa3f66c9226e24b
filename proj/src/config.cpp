#include "ilalab/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "ilalab/binary_io.hpp"
#include "ilalab/errors.hpp"

namespace ilalab {

std::string trim(std::string_view text) {
  auto b = text.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) pos = text.size();
    auto item = trim(text.substr(start, pos - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = pos + 1;
  }
  return out;
}

namespace {

double parse_plain(std::string_view text) {
  const std::string s = trim(text);
  if (s.empty()) throw ConfigError("empty number");
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

}  // namespace

double parse_number(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) return parse_plain(text);
  const double den = parse_plain(text.substr(slash + 1));
  if (den == 0.0) throw ConfigError("zero denominator in '" + std::string(text) + "'");
  return parse_plain(text.substr(0, slash)) / den;
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& source) {
  KeyValueConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    auto key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    cfg.entries_[key] = trim(std::string_view(body).substr(eq + 1));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { entries_[key] = value; }
bool KeyValueConfig::has(const std::string& key) const { return entries_.count(key) != 0; }
void KeyValueConfig::erase(const std::string& key) { entries_.erase(key); }

void KeyValueConfig::merge(const KeyValueConfig& other) {
  for (const auto& [k, v] : other.entries_) entries_[k] = v;
}

const std::string& KeyValueConfig::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

std::string KeyValueConfig::get_or(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  try {
    return parse_number(it->second);
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

std::int64_t KeyValueConfig::get_int(const std::string& key, std::int64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::int64_t v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': not an integer: '" + s + "'");
  }
  return v;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::uint64_t v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': not an unsigned integer: '" + s + "'");
  }
  return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "': not a boolean: '" + it->second + "'");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return {};
  return split_list(it->second);
}

std::vector<double> KeyValueConfig::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : get_list(key)) {
    try {
      out.push_back(parse_number(item));
    } catch (const ConfigError& e) {
      throw ConfigError("key '" + key + "': " + e.what());
    }
  }
  return out;
}

void KeyValueConfig::require_known(const std::vector<std::string>& allowed_prefixes) const {
  for (const auto& [k, v] : entries_) {
    const bool ok = std::any_of(allowed_prefixes.begin(), allowed_prefixes.end(),
                                [&](const std::string& p) { return k.rfind(p, 0) == 0; });
    if (!ok) throw ConfigError("unknown config key '" + k + "'");
  }
}

std::string KeyValueConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t KeyValueConfig::hash() const { return fnv1a64(canonical()); }

}  // namespace ilalab
