#include "jambatalk/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

namespace jambatalk {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t\r\n") - a + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto s = trim(v);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(fmt::format("{}: '{}' is not a non-negative integer", key, v));
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  try {
    std::size_t used = 0;
    const double out = std::stod(s, &used);
    if (used == s.size()) return out;
  } catch (const std::exception&) {
  }
  throw ConfigError(fmt::format("{}: '{}' is not a number", key, v));
}

bool to_bool(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, v));
}

std::vector<std::size_t> to_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(key, item));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string join(const std::vector<std::size_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

std::string num(double v) { return fmt::format("{}", v); }
std::string flag(bool b) { return b ? "true" : "false"; }

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_FIELD(KEY, MEMBER)                                                     \
  Field {                                                                           \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },               \
        [](RunConfig& c, const std::string& v) { c.MEMBER = to_size(KEY, v); }      \
  }
#define DOUBLE_FIELD(KEY, MEMBER)                                                   \
  Field {                                                                           \
    KEY, [](const RunConfig& c) { return num(c.MEMBER); },                          \
        [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(KEY, v); }    \
  }
#define BOOL_FIELD(KEY, MEMBER)                                                     \
  Field {                                                                           \
    KEY, [](const RunConfig& c) { return flag(c.MEMBER); },                         \
        [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(KEY, v); }      \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      {"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) { c.seed = to_size("run.seed", v); }},
      {"model.arrangement", [](const RunConfig& c) { return std::string(arrangement_label(c.model.decoder.arrangement)); },
       [](RunConfig& c, const std::string& v) { c.model.decoder.arrangement = parse_arrangement(trim(v)); }},
      SIZE_FIELD("model.d_model", model.decoder.d_model),
      SIZE_FIELD("model.layers_per_side", model.decoder.layers_per_side),
      SIZE_FIELD("model.ppe_period", model.decoder.ppe_period),
      BOOL_FIELD("model.use_ppe", model.decoder.use_ppe),
      SIZE_FIELD("model.n_subjects", model.decoder.n_subjects),
      SIZE_FIELD("model.vertex_count", model.decoder.vertex_count),
      SIZE_FIELD("model.max_frames", model.decoder.max_frames),
      DOUBLE_FIELD("model.fps", model.fps),
      SIZE_FIELD("mamba.state_dim", model.decoder.mamba.state_dim),
      SIZE_FIELD("mamba.expand", model.decoder.mamba.expand),
      SIZE_FIELD("mamba.conv_width", model.decoder.mamba.conv_width),
      DOUBLE_FIELD("mamba.dt_min", model.decoder.mamba.dt_min),
      DOUBLE_FIELD("mamba.dt_max", model.decoder.mamba.dt_max),
      {"mamba.scan_mode",
       [](const RunConfig& c) {
         return std::string(c.model.decoder.mamba.scan_mode == ScanMode::kChunked ? "chunked" : "sequential");
       },
       [](RunConfig& c, const std::string& v) {
         const auto s = trim(v);
         if (s == "sequential") {
           c.model.decoder.mamba.scan_mode = ScanMode::kSequential;
         } else if (s == "chunked") {
           c.model.decoder.mamba.scan_mode = ScanMode::kChunked;
         } else {
           throw ConfigError(fmt::format("mamba.scan_mode: '{}' (expected sequential or chunked)", v));
         }
       }},
      SIZE_FIELD("mamba.scan_chunk", model.decoder.mamba.scan_chunk),
      SIZE_FIELD("moe.n_experts", model.decoder.moe.n_experts),
      SIZE_FIELD("moe.top_k", model.decoder.moe.top_k),
      SIZE_FIELD("moe.d_ff", model.decoder.moe.d_ff),
      BOOL_FIELD("moe.renormalize", model.decoder.moe.renormalize),
      SIZE_FIELD("attention.heads", model.decoder.attention.n_query_heads),
      SIZE_FIELD("attention.kv_groups", model.decoder.attention.n_kv_groups),
      SIZE_FIELD("attention.d_ff", model.decoder.attention.d_ff),
      DOUBLE_FIELD("attention.rope_base", model.decoder.attention.rope_base),
      BOOL_FIELD("attention.use_rope", model.decoder.attention.use_rope),
      SIZE_FIELD("audio.feature_dim", model.audio.feature_dim),
      BOOL_FIELD("audio.freeze_tcn", model.audio.freeze_tcn),
      {"audio.conv_kernels",
       [](const RunConfig& c) {
         std::vector<std::size_t> k;
         for (const auto& s : c.model.audio.convs) k.push_back(s.kernel);
         return join(k);
       },
       [](RunConfig& c, const std::string& v) {
         const auto k = to_size_list("audio.conv_kernels", v);
         c.model.audio.convs.resize(k.size(), {1, 1});
         for (std::size_t i = 0; i < k.size(); ++i) c.model.audio.convs[i].kernel = k[i];
       }},
      {"audio.conv_strides",
       [](const RunConfig& c) {
         std::vector<std::size_t> k;
         for (const auto& s : c.model.audio.convs) k.push_back(s.stride);
         return join(k);
       },
       [](RunConfig& c, const std::string& v) {
         const auto k = to_size_list("audio.conv_strides", v);
         c.model.audio.convs.resize(k.size(), {1, 1});
         for (std::size_t i = 0; i < k.size(); ++i) c.model.audio.convs[i].stride = k[i];
       }},
      DOUBLE_FIELD("train.lr", train.adam.lr),
      DOUBLE_FIELD("train.beta1", train.adam.beta1),
      DOUBLE_FIELD("train.beta2", train.adam.beta2),
      DOUBLE_FIELD("train.eps", train.adam.eps),
      SIZE_FIELD("train.epochs", train.epochs),
      SIZE_FIELD("train.max_steps", train.max_steps),
      SIZE_FIELD("train.batch", train.batch),
      BOOL_FIELD("train.shuffle", train.shuffle),
      {"train.loss_csv", [](const RunConfig& c) { return c.train.loss_csv.string(); },
       [](RunConfig& c, const std::string& v) { c.train.loss_csv = trim(v); }},
      {"data.source", [](const RunConfig& c) { return c.data.source; },
       [](RunConfig& c, const std::string& v) { c.data.source = trim(v); }},
      BOOL_FIELD("data.vocaset", data.vocaset),
      SIZE_FIELD("data.subjects", data.synth.n_subjects),
      SIZE_FIELD("data.sentences", data.synth.n_sentences),
      SIZE_FIELD("data.frames", data.synth.frames),
      SIZE_FIELD("data.vertices", data.synth.vertices),
      SIZE_FIELD("data.latent_dim", data.synth.latent_dim),
      DOUBLE_FIELD("data.amplitude", data.synth.amplitude),
  };
  return all;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.key) return f;
  }
  throw ConfigError(fmt::format("unknown config key '{}'", key));
}

void apply_tree(RunConfig& cfg, const boost::property_tree::ptree& tree) {
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(fmt::format("config entry '{}' is outside any [section]", section));
    for (const auto& [key, value] : body) find_field(section + "." + key).set(cfg, value.data());
  }
}

}  // namespace

void RunConfig::sync() {
  model.sync();
  train.seed = seed;
  data.synth.seed = seed;
  data.synth.feature_dim = model.audio.feature_dim;
  data.synth.fps = model.fps;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

RunConfig default_run_config() {
  RunConfig c;
  c.model.decoder.d_model = 32;
  c.model.decoder.moe.d_ff = 64;
  c.model.decoder.attention.d_ff = 64;
  c.model.audio.feature_dim = 32;
  c.sync();
  return c;
}

void apply_ini(RunConfig& cfg, const std::filesystem::path& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(fmt::format("config {}: {}", path.string(), e.message()));
  }
  apply_tree(cfg, tree);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(fmt::format("override '{}' is not section.key=value", assignment));
  find_field(trim(assignment.substr(0, eq))).set(cfg, assignment.substr(eq + 1));
}

std::string to_ini(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    if (key.substr(0, dot) != section) {
      section = key.substr(0, dot);
      out += fmt::format("{}[{}]\n", out.empty() ? "" : "\n", section);
    }
    out += fmt::format("{} = {}\n", key.substr(dot + 1), f.get(cfg));
  }
  return out;
}

Dataset load_data(const RunConfig& cfg) {
  if (cfg.data.source == "synthetic") return synth_dataset(cfg.data.synth);
  if (cfg.data.vocaset) return load_vocaset_layout(cfg.data.source);
  return load_dataset_layout(cfg.data.source);
}

ModelConfig fit_model_to_data(ModelConfig model, const Dataset& data) {
  model.decoder.vertex_count = data.vertex_count();
  model.decoder.n_subjects = std::max<std::size_t>(1, data.subjects.size());
  for (const auto& r : data.records) {
    if (!r.waveform) {
      model.audio.feature_dim = r.features.dim();
      break;
    }
  }
  if (!data.records.empty()) model.fps = data.records.front().motion.fps;
  return model;
}

void save_model(const std::filesystem::path& path, const Model& model, std::uint64_t seed) {
  RunConfig rc;
  rc.seed = seed;
  rc.model = model.config();
  const std::string ini = to_ini(rc);
  ParamList entries;
  model.collect(entries);
  entries.push_back({"meta.config_ini", Tensor::from({ini.size()}, std::vector<double>(ini.begin(), ini.end()))});
  save_checkpoint(path, entries);
}

Model load_model(const std::filesystem::path& path) {
  const TensorMap map = load_checkpoint(path);
  const auto it = map.find("meta.config_ini");
  if (it == map.end()) throw LoadError(path.string() + ": checkpoint has no meta.config_ini entry");
  std::string ini;
  for (double c : it->second.data()) ini.push_back(static_cast<char>(c));
  RunConfig rc;
  boost::property_tree::ptree tree;
  std::istringstream in(ini);
  boost::property_tree::ini_parser::read_ini(in, tree);
  apply_tree(rc, tree);
  rc.sync();
  Model model(rc.model, rc.seed);
  ParamList params;
  model.collect(params);
  assign_params(params, map);
  return model;
}

}  // namespace jambatalk
