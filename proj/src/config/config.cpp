#include "htsc/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "htsc/errors.hpp"
#include "htsc/rng.hpp"

namespace htsc {

namespace {

struct KeySpec {
  const char* key;
  const char* value;
  char type;              // i: non-negative integer, f: number, b: bool, s: string
  const char* choices;    // '|'-separated for restricted strings
};

// clang-format off
const KeySpec kKeys[] = {
  {"data.image_size", "32", 'i', nullptr},
  {"data.channels", "1", 'i', nullptr},
  {"data.max_entities", "3", 'i', nullptr},
  {"data.noise_std", "0.05", 'f', nullptr},
  {"data.background", "0.1", 'f', nullptr},
  {"data.vocab_size", "128", 'i', nullptr},
  {"data.n_max", "40", 'i', nullptr},
  {"data.train", "512", 'i', nullptr},
  {"data.val", "64", 'i', nullptr},
  {"data.test", "64", 'i', nullptr},
  {"data.confound_fraction", "0.25", 'f', nullptr},
  {"data.bias_a", "0", 'i', nullptr},
  {"data.bias_b", "1", 'i', nullptr},
  {"data.unique_scenes", "false", 'b', nullptr},
  {"eclo.Q", "12", 'i', nullptr},
  {"eclo.P", "16", 'i', nullptr},
  {"eclo.M", "7", 'i', nullptr},
  {"eclo.cls_form", "full", 's', "full|literal"},
  {"eclo.loc_form", "infonce", 's', "infonce|literal"},
  {"model.d", "64", 'i', nullptr},
  {"model.heads", "4", 'i', nullptr},
  {"model.ffn", "128", 'i', nullptr},
  {"model.enc_layers", "2", 'i', nullptr},
  {"model.dec_layers", "2", 'i', nullptr},
  {"model.patch", "4", 'i', nullptr},
  {"model.pool_queries", "4", 'i', nullptr},
  {"mim.rate", "0.85", 'f', nullptr},
  {"plm.no_vision_prob", "0.1", 'f', nullptr},
  {"vdm.k", "0", 'i', nullptr},
  {"vdm.accum", "sum", 's', "sum|product"},
  {"vdm.concat", "feature", 's', "feature|token"},
  {"high.vdm", "true", 'b', nullptr},
  {"high.ldm", "true", 'b', nullptr},
  {"train.low", "true", 'b', nullptr},
  {"train.mid", "true", 'b', nullptr},
  {"train.high", "true", 'b', nullptr},
  {"train.lambda", "0.25", 'f', nullptr},
  {"train.batch", "16", 'i', nullptr},
  {"train.seed", "1", 'i', nullptr},
  {"train.warmup_steps", "0", 'i', nullptr},
  {"train.finite_checks", "false", 'b', nullptr},
  {"stage1.lr", "5e-4", 'f', nullptr},
  {"stage1.wd", "1e-2", 'f', nullptr},
  {"stage1.epochs", "30", 'i', nullptr},
  {"stage2.lr", "1e-5", 'f', nullptr},
  {"stage2.wd", "5e-5", 'f', nullptr},
  {"stage2.epochs", "10", 'i', nullptr},
  {"stage2.freeze_shared", "false", 'b', nullptr},
  {"decode.mode", "greedy", 's', "greedy|beam"},
  {"decode.beam_size", "3", 'i', nullptr},
  {"eval.cider_d", "false", 'b', nullptr},
};
// clang-format on

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : kKeys)
    if (key == k.key) return &k;
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::istringstream is(s);
  is.imbue(std::locale::classic());
  is >> out;
  return !is.fail() && is.eof() && std::isfinite(out);
}

void validate(const KeySpec& spec, const std::string& value) {
  const std::string where = std::string("config: ") + spec.key + " = '" + value + "'";
  switch (spec.type) {
    case 'i': {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size())
        throw ConfigError(where + ": expected a non-negative integer");
      break;
    }
    case 'f': {
      double v = 0;
      if (!parse_double(value, v)) throw ConfigError(where + ": expected a number");
      break;
    }
    case 'b':
      if (value != "true" && value != "false") throw ConfigError(where + ": expected true or false");
      break;
    case 's':
      if (spec.choices) {
        const std::string choices = spec.choices;
        std::istringstream is(choices);
        std::string c;
        bool ok = false;
        while (std::getline(is, c, '|')) ok |= c == value;
        if (!ok) throw ConfigError(where + ": expected one of " + choices);
      }
      break;
  }
}

}  // namespace

Config::Config() {
  for (const auto& k : kKeys) values_[k.key] = k.value;
}

void Config::set(const std::string& key, const std::string& value) {
  const auto* spec = find_key(key);
  if (!spec) throw ConfigError("config: unknown key '" + key + "'");
  validate(*spec, value);
  values_[key] = value;
}

Config Config::parse(std::string_view text) {
  Config c;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + ": expected key = value");
    auto value = trim(std::string_view(t).substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    c.set(trim(std::string_view(t).substr(0, eq)), value);
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Config::apply(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("config: override '" + o + "' is not key=value");
    set(trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
  }
}

const std::string& Config::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

double Config::num(const std::string& key) const {
  double v = 0;
  parse_double(str(key), v);
  return v;
}

std::int64_t Config::integer(const std::string& key) const { return std::stoll(str(key)); }

std::size_t Config::count(const std::string& key) const { return static_cast<std::size_t>(std::stoull(str(key))); }

bool Config::flag(const std::string& key) const { return str(key) == "true"; }

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t Config::hash() const { return fnv1a(canonical()); }

std::string Config::hash_hex() const { return hex64(hash()); }

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

}  // namespace htsc
