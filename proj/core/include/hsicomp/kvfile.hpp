#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hsicomp {

// Line-oriented `key = value` text files used for configs, reports, channel
// statistics, sensitivity curves and pruning schemes. `#` starts a comment,
// arrays are space-separated. Insertion order is preserved on write.
class KvFile {
 public:
  KvFile() = default;

  static KvFile parse(std::istream& in, const std::string& origin = "<stream>");
  static KvFile load(const std::string& path);
  void save(const std::string& path) const;
  std::string to_string() const;

  bool has(std::string_view key) const;
  const std::vector<std::string>& keys() const { return order_; }

  const std::string& get(std::string_view key) const;
  std::string get_or(std::string_view key, const std::string& fallback) const;
  int64_t get_int(std::string_view key) const;
  double get_double(std::string_view key) const;
  std::vector<double> get_doubles(std::string_view key) const;
  std::vector<int64_t> get_ints(std::string_view key) const;

  void set(std::string_view key, std::string_view value);
  void set_int(std::string_view key, int64_t v);
  void set_double(std::string_view key, double v);
  void set_doubles(std::string_view key, const std::vector<double>& v);
  void set_ints(std::string_view key, const std::vector<int64_t>& v);

  // Throws ConfigError naming every key not in `allowed`.
  void require_known(const std::vector<std::string>& allowed) const;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::string> values_;
};

int64_t parse_int(std::string_view text, std::string_view what);
double parse_double(std::string_view text, std::string_view what);
std::vector<std::string> split_ws(std::string_view text);
std::string trim(std::string_view text);

// Doubles formatted with enough digits to round-trip bit-exactly.
std::string format_double(double v);

}  // namespace hsicomp
