#include "uformer/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "uformer/error.hpp"

namespace uformer {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key + ": '" + v + "' is not a valid number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

std::vector<std::int64_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::int64_t>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_list(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define INT_FIELD(KEY, MEMBER)                                                     \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },              \
        [](RunConfig& c, const std::string& v) {                                   \
          c.MEMBER = parse_number<decltype(c.MEMBER)>(KEY, v);                     \
        }                                                                          \
  }
#define DOUBLE_FIELD(KEY, MEMBER)                                                  \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return fmt_double(c.MEMBER); },                  \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_number<double>(KEY, v); } \
  }
#define BOOL_FIELD(KEY, MEMBER)                                                    \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }  \
  }
#define STRING_FIELD(KEY, MEMBER)                                                  \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return c.MEMBER; }, [](RunConfig& c, const std::string& v) { c.MEMBER = v; } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      INT_FIELD("model.c", model.base_channels),
      INT_FIELD("model.stages", model.stages),
      Field{"model.depths", [](const RunConfig& c) { return fmt_list(c.model.encoder_depths); },
            [](RunConfig& c, const std::string& v) { c.model.encoder_depths = parse_list("model.depths", v); }},
      INT_FIELD("model.bottleneck_depth", model.bottleneck_depth),
      INT_FIELD("model.window", model.window),
      INT_FIELD("model.head_dim", model.head_dim),
      INT_FIELD("model.ffn_expansion", model.ffn_expansion),
      BOOL_FIELD("model.modulator", model.use_modulator),
      BOOL_FIELD("model.shift", model.use_shift),
      BOOL_FIELD("model.modulator_before_shift", model.modulator_before_shift),
      INT_FIELD("model.shift_parity", model.shift_parity),
      Field{"model.skip", [](const RunConfig& c) { return to_string(c.model.skip_mode); },
            [](RunConfig& c, const std::string& v) { c.model.skip_mode = parse_skip_mode(v); }},
      INT_FIELD("model.in_channels", model.in_channels),
      DOUBLE_FIELD("model.leaky_slope", model.leaky_slope),

      DOUBLE_FIELD("train.epsilon", train.epsilon),
      DOUBLE_FIELD("train.beta1", train.beta1),
      DOUBLE_FIELD("train.beta2", train.beta2),
      DOUBLE_FIELD("train.adam_eps", train.adam_eps),
      DOUBLE_FIELD("train.weight_decay", train.weight_decay),
      DOUBLE_FIELD("train.lr_start", train.lr_start),
      DOUBLE_FIELD("train.lr_end", train.lr_end),
      INT_FIELD("train.steps", train.total_steps),
      INT_FIELD("train.batch", train.batch_size),
      INT_FIELD("train.patch", train.patch_size),
      INT_FIELD("train.seed", train.seed),
      BOOL_FIELD("train.augment", train.augment),
      DOUBLE_FIELD("train.grad_clip", train.grad_clip),
      INT_FIELD("train.train_images", train.train_images),
      INT_FIELD("train.val_images", train.val_images),
      INT_FIELD("train.log_every", train.log_every),
      INT_FIELD("train.checkpoint_every", train.checkpoint_every),
      Field{"train.degradation", [](const RunConfig& c) { return to_string(c.train.degradation.kind); },
            [](RunConfig& c, const std::string& v) { c.train.degradation.kind = parse_degradation(v); }},
      DOUBLE_FIELD("train.sigma", train.degradation.sigma),
      INT_FIELD("train.blur_kernel", train.degradation.blur_kernel),
      INT_FIELD("train.rain_count", train.degradation.rain_count),
      DOUBLE_FIELD("train.rain_length", train.degradation.rain_length),
      DOUBLE_FIELD("train.rain_angle", train.degradation.rain_angle),
      DOUBLE_FIELD("train.rain_intensity", train.degradation.rain_intensity),

      STRING_FIELD("paths.data", paths.data),
      STRING_FIELD("paths.checkpoint", paths.checkpoint),
      STRING_FIELD("paths.out", paths.out),

      BOOL_FIELD("run.deterministic", deterministic),
      BOOL_FIELD("run.f64", f64),
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace uformer
