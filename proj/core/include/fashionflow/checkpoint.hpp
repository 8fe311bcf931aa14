#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fashionflow/tensor.hpp"

namespace ff {

// Named tensor container. Layout (little-endian): "VTCK", u32 version = 1,
// u32 config length + "key=value\n" text, u32 entry count, then per entry
// u32 name length + name, u64 blob length + one VTEN blob.
struct Checkpoint {
  std::map<std::string, std::string> config;
  std::vector<std::pair<std::string, Tensor>> entries;

  void put(const std::string& name, Tensor t);
  const Tensor* find(const std::string& name) const;
  const Tensor& get(const std::string& name) const;  // FormatError when absent
  bool has(const std::string& name) const { return find(name) != nullptr; }

  std::string encode() const;
  static Checkpoint decode(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

// "key=value" lines; blank lines and '#' comments are skipped.
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin);
std::string format_key_values(const std::map<std::string, std::string>& kv);

}  // namespace ff
