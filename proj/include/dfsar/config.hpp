#pragma once

#include <map>
#include <string>
#include <vector>

namespace dfsar {

/// Flat `key = value` settings. Every key has a registered default; unknown
/// keys are rejected so typos fail loudly. Lines starting with '#' are comments.
class Config {
 public:
  /// All registered keys at their default values.
  Config();
  static Config load(const std::string& path);
  static Config parse(const std::string& text, const std::string& origin = "<string>");

  void set(const std::string& key, const std::string& value);
  /// Applies "key=value" strings in order.
  void apply_overrides(const std::vector<std::string>& overrides);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  long long integer(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;
  /// True when the value is the literal "auto".
  bool is_auto(const std::string& key) const { return str(key) == "auto"; }

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Canonical `key = value` text, sorted by key.
  std::string dump() const;
  /// SHA-256 of `dump()`.
  std::string hash() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dfsar
