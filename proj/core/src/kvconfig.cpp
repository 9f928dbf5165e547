#include "iclprobe/kvconfig.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "iclprobe/errors.hpp"

namespace iclprobe {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
bool parse_number(std::string_view s, N& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && !s.empty();
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text) {
  KeyValueConfig cfg;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("expected key = value, got \"" + std::string(line) + "\"", line_no);
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("empty key", line_no);
    if (value.empty()) throw ConfigError("key \"" + key + "\" has no value", line_no);
    if (cfg.values_.count(key)) throw ConfigError("duplicate key \"" + key + "\"", line_no);
    cfg.values_[key] = value;
    cfg.lines_[key] = line_no;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void KeyValueConfig::set(const std::string& key, std::string value) {
  values_[key] = std::move(value);
  lines_.erase(key);
}

int KeyValueConfig::line_of(const std::string& key) const {
  const auto it = lines_.find(key);
  return it == lines_.end() ? 0 : it->second;
}

void KeyValueConfig::bad_value(const std::string& key, const std::string& expected) const {
  throw ConfigError("key \"" + key + "\" expects " + expected + ", got \"" + values_.at(key) + "\"", line_of(key));
}

const std::string& KeyValueConfig::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing required key \"" + key + "\"");
  used_.insert(key);
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key) const { return raw(key); }

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? raw(key) : fallback;
}

long long KeyValueConfig::get_int(const std::string& key) const {
  long long v = 0;
  if (!parse_number(raw(key), v)) bad_value(key, "an integer");
  return v;
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) return fallback;
  std::uint64_t v = 0;
  if (!parse_number(raw(key), v)) bad_value(key, "an unsigned integer");
  return v;
}

double KeyValueConfig::get_double(const std::string& key) const {
  double v = 0;
  if (!parse_number(raw(key), v)) bad_value(key, "a number");
  return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& v = raw(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, "a boolean");
}

std::vector<long long> KeyValueConfig::get_int_list(const std::string& key) const {
  const std::string& v = raw(key);
  std::vector<long long> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    const auto comma = v.find(',', pos);
    const std::string_view item =
        std::string_view(v).substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    long long x = 0;
    if (!parse_number(item, x)) bad_value(key, "a comma-separated integer list");
    out.push_back(x);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<long long> KeyValueConfig::get_int_list(const std::string& key, std::vector<long long> fallback) const {
  return has(key) ? get_int_list(key) : fallback;
}

std::vector<std::string> KeyValueConfig::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) {
    if (!used_.count(k)) out.push_back(k);
  }
  return out;
}

void KeyValueConfig::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : values_) {
    if (!allowed.count(k)) throw ConfigError("unknown key \"" + k + "\"", line_of(k));
  }
}

}  // namespace iclprobe
