#include "dfsar/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "dfsar/archive.hpp"
#include "dfsar/error.hpp"

namespace dfsar {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d{
      {"seed", "0"},
      {"despeckle.window", "5"},
      {"canny.low", "0.1"},
      {"canny.high", "0.2"},
      {"canny.sigma", "1.4"},
      {"grayscale.weights", "0.299,0.587,0.114"},
      {"augment.enabled", "true"},
      {"augment.resize", "auto"},
      {"augment.crop", "auto"},
      {"augment.flip_probability", "0.5"},
      {"model.toy_mode", "false"},
      {"model.input_size", "auto"},
      {"model.levels", "auto"},
      {"model.width_divisor", "auto"},
      {"model.dropout", "0.5"},
      {"model.bigff_cross", "true"},
      {"cfa.patch", "3"},
      {"cfa.memory_budget_mb", "1024"},
      {"disc.width_divisor", "auto"},
      {"disc.sn_warmup", "50"},
      {"train.learning_rate", "2e-4"},
      {"train.adam_beta1", "0.5"},
      {"train.adam_beta2", "0.999"},
      {"train.batch_size", "auto"},
      {"train.steps", "1000"},
      {"train.checkpoint_every", "100"},
      {"train.label_smoothing", "0"},
      {"loss.w_adv", "1"},
      {"loss.w_pix", "10"},
      {"loss.w_ffl", "1"},
      {"loss.w_perc", "1"},
      {"loss.w_style", "10"},
      {"loss.w_feat", "1"},
      {"loss.ffl_alpha", "1"},
      {"loss.perceptual_extractor", ""},
      {"siamese.input_size", "128"},
      {"siamese.margin", "1.0"},
      {"siamese.steps", "1000"},
      {"siamese.batch_size", "16"},
      {"siamese.learning_rate", "2e-4"},
      {"heatmap.alpha", "0.45"},
      {"consistency.strip_width", "16"},
      {"translate.tile", "auto"},
      {"translate.overlap", "0"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ValidationError("config key " + key + ": '" + v + "' is not a number");
  return out;
}

}  // namespace

Config::Config() : values_(defaults()) {}

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ValidationError(origin + ":" + std::to_string(number) + ": expected 'key = value'");
    try {
      c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ValidationError& e) {
      throw ValidationError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingAssetError("config", path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void Config::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key)) throw ValidationError("unknown config key '" + key + "'");
  values_[key] = value;
}

void Config::apply_overrides(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ValidationError("override '" + o + "' is not key=value");
    set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

const std::string& Config::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
  return it->second;
}

double Config::real(const std::string& key) const { return parse_real(key, str(key)); }

long long Config::integer(const std::string& key) const {
  const std::string& v = str(key);
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ValidationError("config key " + key + ": '" + v + "' is not an integer");
  return out;
}

bool Config::boolean(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key " + key + ": '" + v + "' is not a boolean");
}

std::vector<double> Config::reals(const std::string& key) const {
  std::vector<double> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_real(key, trim(item)));
  return out;
}

std::string Config::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::string Config::hash() const { return io::sha256_hex(dump()); }

}  // namespace dfsar
