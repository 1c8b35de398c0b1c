#include "clsr/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "clsr/errors.hpp"

namespace clsr {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    auto t = trim(cur);
    if (t.empty()) throw ConfigError("empty element in list '" + s + "'");
    out.push_back(t);
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <typename T>
T parse_int(const std::string& key, const std::string& s) {
  T v{};
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': not an integer: '" + s + "'");
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: '" + s + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool model_key = false;
};

#define CLSR_SIZE(KEY, MEMBER, MODEL)                                                                       \
  Field{KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                                  \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_int<std::size_t>(KEY, v); }, MODEL}
#define CLSR_DOUBLE(KEY, MEMBER, MODEL)                                                                     \
  Field{KEY, [](const RunConfig& c) { return fmt_double(c.MEMBER); },                                      \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_double(KEY, v); }, MODEL}
#define CLSR_BOOL(KEY, MEMBER, MODEL)                                                                       \
  Field{KEY, [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); },                  \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }, MODEL}
#define CLSR_STRING(KEY, MEMBER)                                                                            \
  Field{KEY, [](const RunConfig& c) { return c.MEMBER; },                                                  \
        [](RunConfig& c, const std::string& v) { c.MEMBER = v; }, false}
#define CLSR_INT64(KEY, MEMBER)                                                                             \
  Field{KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },                                  \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_int<std::int64_t>(KEY, v); }, false}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      CLSR_SIZE("dim", model.dim, true),
      CLSR_SIZE("proxy_k", model.proxy_k, true),
      CLSR_SIZE("proxy_threshold", model.proxy_threshold, true),
      CLSR_DOUBLE("beta", model.beta, true),
      CLSR_DOUBLE("lambda", model.lambda, true),
      CLSR_DOUBLE("margin", model.margin, true),
      Field{"contrastive", [](const RunConfig& c) { return std::string(model::to_string(c.model.contrastive)); },
            [](RunConfig& c, const std::string& v) { c.model.contrastive = model::parse_contrastive(v); }, true},
      Field{"rnn_cell", [](const RunConfig& c) { return std::string(model::to_string(c.model.rnn_cell)); },
            [](RunConfig& c, const std::string& v) { c.model.rnn_cell = model::parse_cell(v); }, true},
      Field{"attention", [](const RunConfig& c) { return std::string(model::to_string(c.model.attention)); },
            [](RunConfig& c, const std::string& v) { c.model.attention = model::parse_attention(v); }, true},
      CLSR_BOOL("evolution", model.evolution, true),
      CLSR_BOOL("fusion_gru", model.fusion_gru, true),
      CLSR_SIZE("max_seq_len", model.max_seq_len, true),
      Field{"mlp_hidden",
            [](const RunConfig& c) {
              std::vector<std::string> s;
              for (auto w : c.model.mlp_hidden) s.push_back(std::to_string(w));
              return join(s);
            },
            [](RunConfig& c, const std::string& v) {
              c.model.mlp_hidden.clear();
              for (const auto& w : split_list(v)) c.model.mlp_hidden.push_back(parse_int<std::size_t>("mlp_hidden", w));
            },
            true},
      CLSR_DOUBLE("lr", lr, false),
      CLSR_SIZE("batch_size", batch_size, false),
      CLSR_SIZE("epochs", epochs, false),
      CLSR_SIZE("patience", patience, false),
      CLSR_SIZE("max_steps", max_steps, false),
      CLSR_SIZE("train_negatives", train_negatives, false),
      CLSR_SIZE("eval_negatives", eval_negatives, false),
      CLSR_SIZE("val_max_examples", val_max_examples, false),
      CLSR_SIZE("ndcg_k", ndcg_k, false),
      CLSR_SIZE("threads", threads, false),
      CLSR_STRING("data_source", data_source),
      CLSR_STRING("data_path", data_path),
      CLSR_STRING("data_format", data_format),
      CLSR_STRING("driver_labels", driver_labels),
      Field{"behaviors", [](const RunConfig& c) { return join(c.behaviors); },
            [](RunConfig& c, const std::string& v) { c.behaviors = split_list(v); }, false},
      Field{"target_behaviors", [](const RunConfig& c) { return join(c.target_behaviors); },
            [](RunConfig& c, const std::string& v) { c.target_behaviors = split_list(v); }, false},
      CLSR_SIZE("core", core, false),
      CLSR_INT64("val_start", val_start),
      CLSR_INT64("test_start", test_start),
      CLSR_SIZE("synth.n_users", synth.n_users, false),
      CLSR_SIZE("synth.n_items", synth.n_items, false),
      CLSR_SIZE("synth.n_topics", synth.n_topics, false),
      CLSR_SIZE("synth.topics_per_user", synth.topics_per_user, false),
      CLSR_SIZE("synth.min_len", synth.min_len, false),
      CLSR_SIZE("synth.max_len", synth.max_len, false),
      CLSR_DOUBLE("synth.w_long", synth.w_long, false),
      CLSR_DOUBLE("synth.drift", synth.drift, false),
      CLSR_INT64("synth.horizon", synth.horizon),
      Field{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = parse_int<std::uint64_t>("seed", v); }, false},
      CLSR_STRING("output_dir", output_dir),
  };
  return f;
}

#undef CLSR_SIZE
#undef CLSR_DOUBLE
#undef CLSR_BOOL
#undef CLSR_STRING
#undef CLSR_INT64

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (train_negatives == 0 || eval_negatives == 0) throw ConfigError("negative counts must be >= 1");
  if (ndcg_k == 0) throw ConfigError("ndcg_k must be >= 1");
  if (threads == 0) throw ConfigError("threads must be >= 1");
  if (data_source != "synthetic" && data_source != "file")
    throw ConfigError("data_source must be synthetic or file, got '" + data_source + "'");
  if (data_source == "file" && data_path.empty()) throw ConfigError("data_source=file needs data_path");
  if (data_format != "auto" && data_format != "csv" && data_format != "tsv")
    throw ConfigError("data_format must be auto, csv or tsv");
  if (!(val_start < test_start)) throw ConfigError("val_start must be < test_start");
  if (data_source == "synthetic") synth.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

AdamConfig RunConfig::adam() const {
  AdamConfig a;
  a.lr = lr;
  return a;
}

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues out;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    auto key = trim(std::string_view(t).substr(0, eq));
    auto value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

void apply_key_values(RunConfig& cfg, const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    bool found = false;
    for (const auto& f : fields()) {
      if (f.key == k) {
        f.set(cfg, v);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key '" + k + "'");
  }
}

KeyValues to_key_values(const RunConfig& cfg) {
  KeyValues out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : to_key_values(cfg)) out += k + " = " + v + "\n";
  return out;
}

KeyValues model_key_values(const model::ClsrConfig& m) {
  RunConfig c;
  c.model = m;
  KeyValues out;
  for (const auto& f : fields())
    if (f.model_key) out.emplace_back(f.key, f.get(c));
  return out;
}

RunConfig load_config(const std::filesystem::path& file, const KeyValues& overrides) {
  RunConfig cfg;
  if (!file.empty()) apply_key_values(cfg, read_key_values(file));
  apply_key_values(cfg, overrides);
  cfg.validate();
  return cfg;
}

std::pair<std::string, std::string> parse_override(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + s + "' is not key=value");
  auto key = trim(std::string_view(s).substr(0, eq));
  if (key.empty()) throw ConfigError("override '" + s + "' has an empty key");
  return {key, trim(std::string_view(s).substr(eq + 1))};
}

std::filesystem::path resolve_output_dir(const RunConfig& cfg) {
  std::filesystem::path dir(cfg.output_dir);
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv("CLSR_OUTPUT_ROOT"); root != nullptr && *root != '\0')
    return std::filesystem::path(root) / dir;
  return dir;
}

}  // namespace clsr
