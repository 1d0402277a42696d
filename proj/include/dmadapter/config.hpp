#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmadapter/backbone.hpp"
#include "dmadapter/data.hpp"
#include "dmadapter/dm_adapter.hpp"
#include "dmadapter/objectives.hpp"

namespace dmadapter {

struct LossConfig {
  double alpha = 0.5;
  double tau = 0.02;
  double epsilon = 1e-8;
  SdmConfig sdm() const { return {tau, epsilon}; }
};

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
};

struct RunConfig {
  BackboneConfig backbone;
  MoeConfig moe;
  LossConfig loss;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 0;
  int precision = 64;

  // Generator settings with the pixel grid and vocabulary taken from the backbone.
  DataConfig data_config() const {
    DataConfig d = data;
    d.image_h = backbone.image_h;
    d.image_w = backbone.image_w;
    d.channels = backbone.channels;
    d.vocab_size = backbone.vocab_size;
    return d;
  }

  void validate() const {
    backbone.validate();
    moe.validate(backbone.d_model);
    loss.sdm().validate();
    if (!(loss.alpha >= 0.0)) throw ConfigError("loss: alpha must be >= 0");
    if (!(optim.lr > 0.0) || !(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0) ||
        !(optim.eps > 0.0))
      throw ConfigError("optim: lr > 0, beta1/beta2 in [0, 1) and eps > 0 required");
    if (optim.batch_size < 1) throw ConfigError("optim: batch_size must be >= 1");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    data_config().validate();
    if (data.attributes + 2 > backbone.text_len)
      throw ConfigError("data: captions of " + std::to_string(data.attributes) + " tokens exceed text_len - 2");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Field table shared by parsing and serialization, in file order.
struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    auto r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(r);
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

#define DMA_SIZE_FIELD(KEY, MEMBER)                                               \
  Field {                                                                         \
    KEY, [](const RunConfig& c) { return std::to_string(c.MEMBER); },             \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_size(KEY, v); } \
  }
#define DMA_REAL_FIELD(KEY, MEMBER)                                               \
  Field {                                                                         \
    KEY, [](const RunConfig& c) { return fmt_double(c.MEMBER); },                 \
        [](RunConfig& c, const std::string& v) { c.MEMBER = parse_real(KEY, v); } \
  }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      DMA_SIZE_FIELD("seed", seed),
      Field{"precision", [](const RunConfig& c) { return std::to_string(c.precision); },
            [](RunConfig& c, const std::string& v) { c.precision = static_cast<int>(parse_size("precision", v)); }},
      DMA_SIZE_FIELD("backbone.d_model", backbone.d_model),
      DMA_SIZE_FIELD("backbone.n_heads", backbone.n_heads),
      DMA_SIZE_FIELD("backbone.n_layers", backbone.n_layers),
      DMA_SIZE_FIELD("backbone.mlp_ratio", backbone.mlp_ratio),
      DMA_SIZE_FIELD("backbone.image_h", backbone.image_h),
      DMA_SIZE_FIELD("backbone.image_w", backbone.image_w),
      DMA_SIZE_FIELD("backbone.channels", backbone.channels),
      DMA_SIZE_FIELD("backbone.patch", backbone.patch),
      DMA_SIZE_FIELD("backbone.vocab_size", backbone.vocab_size),
      DMA_SIZE_FIELD("backbone.text_len", backbone.text_len),
      DMA_SIZE_FIELD("backbone.seed", backbone.seed),
      DMA_REAL_FIELD("backbone.init_std", backbone.init_std),
      DMA_REAL_FIELD("backbone.ln_eps", backbone.ln_eps),
      DMA_SIZE_FIELD("moe.n", moe.n),
      DMA_SIZE_FIELD("moe.top_k", moe.top_k),
      DMA_SIZE_FIELD("moe.reduction", moe.reduction),
      DMA_SIZE_FIELD("moe.prompts", moe.prompts),
      Field{"moe.router", [](const RunConfig& c) { return std::string(router_mode_name(c.moe.router)); },
            [](RunConfig& c, const std::string& v) { c.moe.router = parse_router_mode(v); }},
      Field{"moe.adapter_input",
            [](const RunConfig& c) { return std::string(c.moe.input == AdapterInput::residual ? "residual" : "normed"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "residual")
                c.moe.input = AdapterInput::residual;
              else if (v == "normed")
                c.moe.input = AdapterInput::normed;
              else
                throw ConfigError("config: moe.adapter_input expects residual or normed, got '" + v + "'");
            }},
      DMA_REAL_FIELD("moe.init_std", moe.init_std),
      DMA_REAL_FIELD("loss.alpha", loss.alpha),
      DMA_REAL_FIELD("loss.tau", loss.tau),
      DMA_REAL_FIELD("loss.epsilon", loss.epsilon),
      DMA_REAL_FIELD("optim.lr", optim.lr),
      DMA_REAL_FIELD("optim.beta1", optim.beta1),
      DMA_REAL_FIELD("optim.beta2", optim.beta2),
      DMA_REAL_FIELD("optim.eps", optim.eps),
      DMA_SIZE_FIELD("optim.epochs", optim.epochs),
      DMA_SIZE_FIELD("optim.batch_size", optim.batch_size),
      DMA_SIZE_FIELD("data.train_ids", data.train_ids),
      DMA_SIZE_FIELD("data.test_ids", data.test_ids),
      DMA_SIZE_FIELD("data.imgs_per_id", data.imgs_per_id),
      DMA_SIZE_FIELD("data.caps_per_img", data.caps_per_img),
      DMA_SIZE_FIELD("data.attributes", data.attributes),
      DMA_SIZE_FIELD("data.levels", data.levels),
      DMA_REAL_FIELD("data.noise", data.noise),
      DMA_REAL_FIELD("data.min_gap", data.min_gap),
      DMA_SIZE_FIELD("data.seed", data.seed),
  };
  return table;
}

#undef DMA_SIZE_FIELD
#undef DMA_REAL_FIELD

}  // namespace detail

// Sets one dotted key; unknown keys are a ConfigError.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : detail::fields())
    if (f.key == key) return f.get(cfg);
  throw ConfigError("config: unknown key '" + key + "'");
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::fields()) keys.push_back(f.key);
  return keys;
}

// Nested key-value text: `[section]` headers scope the `key = value` lines
// below them; full dotted keys work before any section; `#` starts a comment.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    set_config_value(base, key, value);
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config file not found: '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << name << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

// Keys whose values differ between two configs.
inline std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  for (const auto& f : detail::fields())
    if (f.get(a) != f.get(b)) out.push_back(f.key);
  return out;
}

}  // namespace dmadapter
