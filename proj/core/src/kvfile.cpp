#include "hsicomp/kvfile.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hsicomp/error.hpp"

namespace hsicomp {

std::string trim(std::string_view text) {
  size_t a = text.find_first_not_of(" \t\r\n");
  if (a == std::string_view::npos) return {};
  size_t b = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(a, b - a + 1));
}

std::vector<std::string> split_ws(std::string_view text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
    size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

int64_t parse_int(std::string_view text, std::string_view what) {
  int64_t v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size())
    throw ParseError("bad integer for " + std::string(what) + ": '" +
                     std::string(text) + "'");
  return v;
}

double parse_double(std::string_view text, std::string_view what) {
  std::string buf(text);
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(buf.c_str(), &end);
  if (errno != 0 || end != buf.c_str() + buf.size() || buf.empty())
    throw ParseError("bad number for " + std::string(what) + ": '" + buf + "'");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

KvFile KvFile::parse(std::istream& in, const std::string& origin) {
  KvFile kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(origin + ":" + std::to_string(lineno) +
                       ": expected 'key = value'");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty())
      throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (kv.values_.count(key))
      throw ParseError(origin + ":" + std::to_string(lineno) +
                       ": duplicate key '" + key + "'");
    kv.order_.push_back(key);
    kv.values_[key] = value;
  }
  return kv;
}

KvFile KvFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse(in, path);
}

void KvFile::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << to_string();
  if (!out) throw IoError("write failed for " + path);
}

std::string KvFile::to_string() const {
  std::ostringstream out;
  for (const auto& k : order_) out << k << " = " << values_.at(k) << "\n";
  return out.str();
}

bool KvFile::has(std::string_view key) const {
  return values_.count(std::string(key)) != 0;
}

const std::string& KvFile::get(std::string_view key) const {
  auto it = values_.find(std::string(key));
  if (it == values_.end())
    throw ConfigError("missing key '" + std::string(key) + "'");
  return it->second;
}

std::string KvFile::get_or(std::string_view key,
                           const std::string& fallback) const {
  auto it = values_.find(std::string(key));
  return it == values_.end() ? fallback : it->second;
}

int64_t KvFile::get_int(std::string_view key) const {
  return parse_int(get(key), key);
}

double KvFile::get_double(std::string_view key) const {
  return parse_double(get(key), key);
}

std::vector<double> KvFile::get_doubles(std::string_view key) const {
  std::vector<double> out;
  for (const auto& tok : split_ws(get(key))) out.push_back(parse_double(tok, key));
  return out;
}

std::vector<int64_t> KvFile::get_ints(std::string_view key) const {
  std::vector<int64_t> out;
  for (const auto& tok : split_ws(get(key))) out.push_back(parse_int(tok, key));
  return out;
}

void KvFile::set(std::string_view key, std::string_view value) {
  std::string k(key);
  if (!values_.count(k)) order_.push_back(k);
  values_[k] = std::string(value);
}

void KvFile::set_int(std::string_view key, int64_t v) {
  set(key, std::to_string(v));
}

void KvFile::set_double(std::string_view key, double v) {
  set(key, format_double(v));
}

void KvFile::set_doubles(std::string_view key, const std::vector<double>& v) {
  std::ostringstream s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s << ' ';
    s << format_double(v[i]);
  }
  set(key, s.str());
}

void KvFile::set_ints(std::string_view key, const std::vector<int64_t>& v) {
  std::ostringstream s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s << ' ';
    s << v[i];
  }
  set(key, s.str());
}

void KvFile::require_known(const std::vector<std::string>& allowed) const {
  std::string bad;
  for (const auto& k : order_) {
    bool ok = false;
    for (const auto& a : allowed)
      if (k == a) {
        ok = true;
        break;
      }
    if (!ok) bad += bad.empty() ? k : (", " + k);
  }
  if (!bad.empty()) throw ConfigError("unknown keys: " + bad);
}

}  // namespace hsicomp
