#pragma once

// Flat `key = value` configuration covering model, training, inference and
// synthesis settings. `#` starts a comment; unknown keys are errors.

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "patchsr/degrade.hpp"
#include "patchsr/pipeline.hpp"
#include "patchsr/train.hpp"

namespace patchsr {

struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<ConfigEntry> parse_key_values(std::istream& is, const std::string& source) {
  std::vector<ConfigEntry> out;
  std::string raw;
  for (int n = 1; std::getline(is, raw); ++n) {
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(n) + ": expected 'key = value'");
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n};
    if (e.key.empty()) throw ConfigError(source + ":" + std::to_string(n) + ": empty key");
    for (const auto& prev : out)
      if (prev.key == e.key)
        throw ConfigError(source + ":" + std::to_string(n) + ": duplicate key '" + e.key + "' (first on line " +
                          std::to_string(prev.line) + ")");
    out.push_back(std::move(e));
  }
  return out;
}

namespace config_detail {

template <class T>
T parse_number(const std::string& s, const std::string& key) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("config: invalid value '" + s + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config: invalid boolean '" + s + "' for " + key);
}

/// Shortest text that parses back to the same double.
inline std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace config_detail

/// Everything the CLI needs in one place. Model defaults are the desk-scale toy.
struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;
  InferenceConfig infer;
  DegradeConfig degrade;
  I2iConfig i2i;
  CropPolicy crop;
  std::uint64_t seed = 0;

  struct Field {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };

  /// Keys in documentation order.
  std::vector<Field> fields() {
    using namespace config_detail;
    std::vector<Field> f;
    auto i32 = [&f](const char* k, int& r) {
      f.push_back({k, [&r, k](const std::string& s) { r = parse_number<int>(s, k); }, [&r] { return std::to_string(r); }});
    };
    auto u64 = [&f](const char* k, std::uint64_t& r) {
      f.push_back({k, [&r, k](const std::string& s) { r = parse_number<std::uint64_t>(s, k); },
                   [&r] { return std::to_string(r); }});
    };
    auto f64 = [&f](const char* k, double& r) {
      f.push_back({k, [&r, k](const std::string& s) { r = parse_number<double>(s, k); }, [&r] { return format(r); }});
    };
    auto str = [&f](const char* k, std::string& r) {
      f.push_back({k, [&r](const std::string& s) { r = s; }, [&r] { return r; }});
    };
    auto flag = [&f](const char* k, bool& r) {
      f.push_back({k, [&r, k](const std::string& s) { r = parse_bool(s, k); }, [&r] { return r ? "true" : "false"; }});
    };
    u64("seed", seed);
    i32("model.width", model.backbone.width);
    i32("model.mm_blocks", model.backbone.n_mm_blocks);
    i32("model.single_blocks", model.backbone.n_single_blocks);
    i32("model.heads", model.backbone.n_heads);
    i32("model.patch", model.backbone.patch);
    i32("model.mlp_ratio", model.backbone.mlp_ratio);
    flag("model.pos_embed", model.backbone.pos_embed);
    i32("model.codec_factor", model.codec_factor);
    i32("model.txt_tokens", model.txt_tokens);
    u64("model.prompt_seed", model.prompt_seed);
    flag("control.zero_init", model.control.zero_init);
    i32("lora.rank", model.lora.rank);
    f64("lora.alpha", model.lora.alpha);
    f64("train.lambda", train.lambda);
    f64("train.lambda1", train.lambda1);
    f64("train.lambda2", train.lambda2);
    f64("train.lr", train.lr);
    f64("train.disc_lr", train.disc_lr);
    f64("train.beta1", train.beta1);
    f64("train.beta2", train.beta2);
    f64("train.adam_eps", train.adam_eps);
    f64("train.weight_decay", train.weight_decay);
    i32("train.batch_size", train.batch_size);
    i32("train.warmup_steps", train.warmup_steps);
    i32("train.total_steps", train.total_steps);
    i32("train.checkpoint_every", train.checkpoint_every);
    f64("train.branch_prob", train.branch_prob);
    f64("train.pixel_t_threshold", train.pixel_t_threshold);
    f.push_back({"train.t_sampling", [this](const std::string& s) { train.t_sampling = parse_time_sampling(s); },
                 [this] { return to_string(train.t_sampling); }});
    f.push_back({"train.lr_schedule", [this](const std::string& s) { train.lr_schedule = parse_lr_schedule(s); },
                 [this] { return to_string(train.lr_schedule); }});
    f64("infer.t_start", infer.t_start);
    i32("infer.steps", infer.steps);
    i32("infer.upscale", infer.upscale);
    i32("infer.patch", infer.patch);
    i32("infer.overlap", infer.overlap);
    f.push_back({"infer.mask", [this](const std::string& s) { infer.mask = parse_mask_kind(s); },
                 [this] { return to_string(infer.mask); }});
    i32("infer.threads", infer.threads);
    f64("degrade.blur_min", degrade.blur_sigma.lo);
    f64("degrade.blur_max", degrade.blur_sigma.hi);
    i32("degrade.factor", degrade.factor);
    f64("degrade.noise_min", degrade.noise_sigma.lo);
    f64("degrade.noise_max", degrade.noise_sigma.hi);
    f64("degrade.compression_min", degrade.compression.lo);
    f64("degrade.compression_max", degrade.compression.hi);
    f64("i2i.strength", i2i.strength);
    i32("i2i.steps", i2i.steps);
    i32("i2i.downsample", i2i.downsample);
    str("i2i.prompt", i2i.prompt);
    str("i2i.negative_prompt", i2i.negative_prompt);
    i32("crop.size", crop.crop_size);
    f64("crop.resize_probability", crop.resize_probability);
    i32("crop.resize_short_side", crop.resize_short_side);
    return f;
  }

  /// Re-derives the dependent model fields and validates every section.
  void finalize() {
    model.backbone.latent_channels = 3 * model.codec_factor * model.codec_factor;
    model.control = ControlConfig::for_backbone(model.backbone, model.control.zero_init);
    model.validate();
    train.validate();
    infer.validate();
    degrade.validate();
    i2i.validate();
    crop.validate();
  }

  void apply(const std::vector<ConfigEntry>& entries, const std::string& source) {
    auto table = fields();
    for (const auto& e : entries) {
      auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == e.key; });
      if (it == table.end()) throw ConfigError(source + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "'");
      it->set(e.value);
    }
    finalize();
  }

  /// All keys with their current values; parsing the result reproduces this config.
  std::string to_text() {
    std::string out;
    for (const auto& f : fields()) out += f.key + " = " + f.get() + "\n";
    return out;
  }
};

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>") {
  std::istringstream is(text);
  RunConfig c;
  c.apply(parse_key_values(is, source), source);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path);
  RunConfig c;
  c.apply(parse_key_values(is, path), path);
  return c;
}

}  // namespace patchsr
