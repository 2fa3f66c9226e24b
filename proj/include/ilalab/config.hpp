#pragma once

// Flat key-value configuration: one `namespace.key = value` per line, `#`
// starts a comment. Numbers may be written as fractions (`8/255`).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ilalab {

double parse_number(std::string_view text);
std::vector<std::string> split_list(std::string_view text, char sep = ',');
std::string trim(std::string_view text);

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::string& source = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  void erase(const std::string& key);
  // Entries of `other` override ours.
  void merge(const KeyValueConfig& other);

  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  // Keys must start with one of the allowed prefixes (e.g. "attack.").
  void require_known(const std::vector<std::string>& allowed_prefixes) const;

  // Sorted `key = value` lines; stable input for hashing.
  std::string canonical() const;
  std::uint64_t hash() const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace ilalab
