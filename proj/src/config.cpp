#include "mtlab/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "mtlab/error.hpp"

namespace mtlab {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value) {
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key));
}

template <class T>
T parse_int(std::string_view key, std::string_view v) {
  T out{};
  const auto s = trim(v);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, v);
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  const auto s = trim(v);
  try {
    std::size_t used = 0;
    const double d = std::stod(s, &used);
    if (used != s.size()) bad_value(key, v);
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v);
  }
}

bool parse_bool(std::string_view key, std::string_view v) {
  const auto s = trim(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  bad_value(key, v);
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MTLAB_INT_FIELD(name, member, type)                                                      \
  Field {                                                                                        \
    name, [](RunConfig& c, std::string_view v) { c.member = parse_int<type>(name, v); },         \
        [](const RunConfig& c) { return std::to_string(c.member); }                              \
  }
#define MTLAB_DOUBLE_FIELD(name, member)                                                         \
  Field {                                                                                        \
    name, [](RunConfig& c, std::string_view v) { c.member = parse_double(name, v); },            \
        [](const RunConfig& c) { return fmt(c.member); }                                         \
  }
#define MTLAB_BOOL_FIELD(name, member)                                                           \
  Field {                                                                                        \
    name, [](RunConfig& c, std::string_view v) { c.member = parse_bool(name, v); },              \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }              \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"dataset", [](RunConfig& c, std::string_view v) { c.dataset = trim(v); },
       [](const RunConfig& c) { return c.dataset; }},
      MTLAB_BOOL_FIELD("rotate", rotate),
      MTLAB_INT_FIELD("synthetic-train-classes", synthetic_train_classes, std::size_t),
      MTLAB_INT_FIELD("synthetic-val-classes", synthetic_val_classes, std::size_t),
      MTLAB_INT_FIELD("synthetic-test-classes", synthetic_test_classes, std::size_t),
      MTLAB_INT_FIELD("synthetic-per-class", synthetic_per_class, std::size_t),
      MTLAB_INT_FIELD("synthetic-dim", synthetic_dim, std::size_t),
      MTLAB_INT_FIELD("synthetic-informative", synthetic_informative, std::size_t),
      MTLAB_DOUBLE_FIELD("synthetic-margin", synthetic_margin),
      MTLAB_DOUBLE_FIELD("synthetic-background-noise", synthetic_background_noise),
      MTLAB_DOUBLE_FIELD("synthetic-smoothness", synthetic_smoothness),
      MTLAB_INT_FIELD("data-seed", data_seed, std::uint64_t),
      {"arch", [](RunConfig& c, std::string_view v) { c.arch = nn::parse_architecture(trim(v)); },
       [](const RunConfig& c) { return std::string(nn::to_string(c.arch)); }},
      MTLAB_INT_FIELD("width", width, int),
      MTLAB_BOOL_FIELD("batchnorm", batchnorm),
      MTLAB_BOOL_FIELD("constant-init", constant_init),
      {"hidden",
       [](RunConfig& c, std::string_view v) {
         c.hidden.clear();
         for (const auto& s : split_list(v)) c.hidden.push_back(parse_int<std::size_t>("hidden", s));
       },
       [](const RunConfig& c) {
         return join<std::size_t>(c.hidden, [](const std::size_t& x) { return std::to_string(x); });
       }},
      MTLAB_INT_FIELD("ways", ways, int),
      MTLAB_INT_FIELD("shots", shots, int),
      MTLAB_INT_FIELD("queries", queries, int),
      {"method", [](RunConfig& c, std::string_view v) { c.method = meta::parse_method(trim(v)); },
       [](const RunConfig& c) { return std::string(meta::to_string(c.method)); }},
      MTLAB_INT_FIELD("inner-steps", inner_steps, int),
      MTLAB_INT_FIELD("meta-batch", meta_batch, int),
      {"inner-lr",
       [](RunConfig& c, std::string_view v) {
         if (trim(v).empty()) c.inner_lr.reset();
         else c.inner_lr = parse_double("inner-lr", v);
       },
       [](const RunConfig& c) { return c.inner_lr ? fmt(*c.inner_lr) : std::string(); }},
      {"alphas",
       [](RunConfig& c, std::string_view v) {
         c.alphas.clear();
         for (const auto& s : split_list(v)) c.alphas.push_back(parse_double("alphas", s));
       },
       [](const RunConfig& c) { return join<double>(c.alphas, [](const double& x) { return fmt(x); }); }},
      {"outer-lr",
       [](RunConfig& c, std::string_view v) {
         if (trim(v).empty()) c.outer_lr.reset();
         else c.outer_lr = parse_double("outer-lr", v);
       },
       [](const RunConfig& c) { return c.outer_lr ? fmt(*c.outer_lr) : std::string(); }},
      MTLAB_DOUBLE_FIELD("param-lr", param_lr),
      MTLAB_INT_FIELD("iterations", iterations, std::int64_t),
      MTLAB_DOUBLE_FIELD("p-init", p_init),
      MTLAB_DOUBLE_FIELD("momentum", momentum),
      {"iterand-k",
       [](RunConfig& c, std::string_view v) {
         if (trim(v).empty()) c.iterand_k.reset();
         else c.iterand_k = parse_int<int>("iterand-k", v);
       },
       [](const RunConfig& c) { return c.iterand_k ? std::to_string(*c.iterand_k) : std::string(); }},
      MTLAB_BOOL_FIELD("second-order", second_order),
      {"layer-modes",
       [](RunConfig& c, std::string_view v) {
         c.layer_modes.clear();
         for (const auto& s : split_list(v)) c.layer_modes.push_back(nn::parse_meta_mode(s));
       },
       [](const RunConfig& c) {
         return join<nn::MetaMode>(c.layer_modes, [](const nn::MetaMode& m) { return std::string(nn::to_string(m)); });
       }},
      MTLAB_INT_FIELD("seed", seed, std::uint64_t),
      MTLAB_INT_FIELD("workers", workers, int),
      MTLAB_INT_FIELD("eval-steps", eval_steps, int),
      MTLAB_INT_FIELD("eval-episodes", eval_episodes, int),
      MTLAB_INT_FIELD("eval-seeds", eval_seeds, int),
      MTLAB_INT_FIELD("val-episodes", val_episodes, int),
      MTLAB_INT_FIELD("eval-interval", eval_interval, std::int64_t),
      MTLAB_INT_FIELD("log-interval", log_interval, std::int64_t),
      {"out-dir", [](RunConfig& c, std::string_view v) { c.out_dir = trim(v); },
       [](const RunConfig& c) { return c.out_dir.string(); }},
  };
  return table;
}

#undef MTLAB_INT_FIELD
#undef MTLAB_DOUBLE_FIELD
#undef MTLAB_BOOL_FIELD

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + std::string(key) + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

void RunConfig::validate() const {
  if (ways < 1 || shots < 1 || queries < 0) throw ConfigError("ways and shots must be positive");
  if (inner_steps < 1) throw ConfigError("inner-steps must be at least 1");
  if (meta_batch < 1) throw ConfigError("meta-batch must be at least 1");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (!(p_init >= 0.0 && p_init <= 1.0)) throw ConfigError("p-init must lie in [0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (iterand_k && *iterand_k < 1) throw ConfigError("iterand-k must be positive");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (eval_steps < 0 || eval_episodes < 1 || eval_seeds < 1 || val_episodes < 1) {
    throw ConfigError("evaluation counts must be positive");
  }
  if (eval_interval < 1 || log_interval < 1) throw ConfigError("intervals must be positive");
  if (width < 1) throw ConfigError("width must be positive");
  if (method == meta::Method::hybrid && layer_modes.empty()) {
    throw ConfigError("method hybrid needs layer-modes (one per linear layer)");
  }
  if (regression() != (dataset == "sinusoid")) {
    throw ConfigError("the sinusoid dataset goes with the sinusoid-mlp3 architecture and vice versa");
  }
}

nn::ModelConfig RunConfig::model() const {
  nn::ModelConfig m;
  m.arch = arch;
  m.width = width;
  m.ways = regression() ? 1 : ways;
  m.use_batchnorm = batchnorm && !regression();
  if (arch == nn::Architecture::custom) {
    m.input_dim = synthetic_dim;
    m.hidden = hidden;
  }
  return m;
}

meta::MetaConfig RunConfig::meta() const {
  meta::MetaConfig m;
  m.method = method;
  m.inner_steps = inner_steps;
  m.meta_batch = meta_batch;
  m.inner_lr = inner_lr.value_or(regression() ? 0.01 : 0.4);
  m.alphas = alphas;
  m.outer_lr = outer_lr.value_or(meta::is_maml_family(method) ? 0.001 : 10.0);
  m.param_lr = param_lr;
  m.iterations = static_cast<int>(iterations);
  m.p_init = p_init;
  m.momentum = momentum;
  m.iterand_k = iterand_k;
  if (method == meta::Method::metaticket_iterand && !m.iterand_k) m.iterand_k = 1000;
  m.second_order = second_order;
  m.layer_modes = layer_modes;
  return m;
}

void apply_config_text(RunConfig& config, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    config.set(trim(std::string_view(t).substr(0, eq)), std::string_view(t).substr(eq + 1));
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(config, ss.str());
}

RunConfig config_from_entries(const std::vector<std::pair<std::string, std::string>>& entries) {
  RunConfig c;
  for (const auto& [k, v] : entries) c.set(k, v);
  return c;
}

}  // namespace mtlab
