#include "fashionflow/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include "fashionflow/data.hpp"
#include "fashionflow/errors.hpp"

namespace ff {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put_int(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get_int(const std::string& bytes, std::size_t& pos, const char* what) {
  if (pos + sizeof(T) > bytes.size()) {
    throw FormatError("VTCK: truncated " + std::string(what) + " at byte offset " + std::to_string(pos));
  }
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

std::string get_bytes(const std::string& bytes, std::size_t& pos, std::size_t n, const char* what) {
  if (pos + n > bytes.size()) {
    throw FormatError("VTCK: truncated " + std::string(what) + " at byte offset " + std::to_string(pos));
  }
  std::string s = bytes.substr(pos, n);
  pos += n;
  return s;
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::string format_key_values(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

void Checkpoint::put(const std::string& name, Tensor t) {
  for (auto& [n, v] : entries) {
    if (n == name) {
      v = std::move(t);
      return;
    }
  }
  entries.emplace_back(name, std::move(t));
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, v] : entries) {
    if (n == name) return &v;
  }
  return nullptr;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw FormatError("VTCK: checkpoint has no entry '" + name + "'");
  return *t;
}

std::string Checkpoint::encode() const {
  std::string out = "VTCK";
  put_int<std::uint32_t>(out, kCheckpointVersion);
  const std::string text = format_key_values(config);
  put_int<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  put_int<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_int<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const std::string blob = encode_tensor(t);
    put_int<std::uint64_t>(out, blob.size());
    out += blob;
  }
  return out;
}

Checkpoint Checkpoint::decode(const std::string& bytes) {
  std::size_t pos = 0;
  if (get_bytes(bytes, pos, 4, "magic") != "VTCK") throw FormatError("not a VTCK checkpoint: bad magic at byte offset 0");
  const auto version = get_int<std::uint32_t>(bytes, pos, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("VTCK: unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  Checkpoint ck;
  const auto text_len = get_int<std::uint32_t>(bytes, pos, "config length");
  ck.config = parse_key_values(get_bytes(bytes, pos, text_len, "config"), "checkpoint config");
  const auto count = get_int<std::uint32_t>(bytes, pos, "entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get_int<std::uint32_t>(bytes, pos, "entry name length");
    std::string name = get_bytes(bytes, pos, name_len, "entry name");
    const auto blob_len = get_int<std::uint64_t>(bytes, pos, "entry length");
    const std::size_t blob_at = pos;
    const std::string blob = get_bytes(bytes, pos, blob_len, "entry payload");
    ck.entries.emplace_back(std::move(name), decode_tensor(blob, blob_at));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ff
