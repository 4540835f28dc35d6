#pragma once

#include <map>
#include <sstream>
#include <string>

#include "hsia/model.hpp"

namespace hsia {

// Flat `key = value` files, `#` starts a comment, dotted keys for nesting.
inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out[key] = val;
  }
  return out;
}

struct DataProfile {
  int bands = 25;
  int classes = 6;
  int height = 64;
  int width = 128;
  int crop_h = 32;
  int crop_w = 64;
  int train_scenes = 20;
  int val_scenes = 5;
  float noise_std = 0.02f;
  float ignore_fraction = 0.0f;
};

struct OptimProfile {
  int steps = 500;
  int batch = 2;
  double lr = 1e-4;
  // short ramp: at 500 desk steps a long warmup wastes most of the step
  // budget (the full profile overrides this with the documented 1500)
  int warmup = 10;
  double weight_decay = 0.01;
};

struct RunConfig {
  std::string profile = "desk";
  HsiAdapterConfig model;
  DataProfile data;
  OptimProfile optim;
  std::uint64_t seed = 0;

  static RunConfig desk() {
    RunConfig c;
    c.profile = "desk";
    c.model = HsiAdapterConfig::desk();
    return c;
  }

  static RunConfig full() {
    RunConfig c;
    c.profile = "full";
    c.model = HsiAdapterConfig::full();
    c.data.height = 224;
    c.data.width = 448;
    c.data.crop_h = 224;
    c.data.crop_w = 448;
    c.data.train_scenes = 100;
    c.data.val_scenes = 20;
    c.optim.steps = 10000;
    c.optim.warmup = 1500;
    return c;
  }

  static RunConfig from_profile(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "full") return full();
    throw ConfigError("unknown profile: " + name);
  }

  void apply(const std::map<std::string, std::string>& kv) {
    for (const auto& [key, val] : kv) {
      auto as_int = [&] {
        std::size_t used = 0;
        int v = std::stoi(val, &used);
        if (used != val.size()) throw ConfigError("key " + key + ": expected integer, got " + val);
        return v;
      };
      auto as_real = [&] {
        std::size_t used = 0;
        double v = std::stod(val, &used);
        if (used != val.size()) throw ConfigError("key " + key + ": expected number, got " + val);
        return v;
      };
      if (key == "profile") {
        *this = from_profile(val);
      } else if (key == "seed") {
        seed = static_cast<std::uint64_t>(std::stoull(val));
      } else if (key == "model.d_s") {
        model.spectral.d_s = as_int();
      } else if (key == "model.spectral_heads") {
        model.spectral.heads = as_int();
      } else if (key == "model.spectral_layers") {
        model.spectral.layers = as_int();
      } else if (key == "model.fpn_channels") {
        model.decoder.fpn_ch = model.decoder.aux_ch = as_int();
      } else if (key == "data.bands") {
        data.bands = as_int();
      } else if (key == "data.classes") {
        data.classes = as_int();
      } else if (key == "data.height") {
        data.height = as_int();
      } else if (key == "data.width") {
        data.width = as_int();
      } else if (key == "data.crop_h") {
        data.crop_h = as_int();
      } else if (key == "data.crop_w") {
        data.crop_w = as_int();
      } else if (key == "data.train_scenes") {
        data.train_scenes = as_int();
      } else if (key == "data.val_scenes") {
        data.val_scenes = as_int();
      } else if (key == "data.noise_std") {
        data.noise_std = static_cast<float>(as_real());
      } else if (key == "data.ignore_fraction") {
        data.ignore_fraction = static_cast<float>(as_real());
      } else if (key == "train.steps") {
        optim.steps = as_int();
      } else if (key == "train.batch") {
        optim.batch = as_int();
      } else if (key == "train.lr") {
        optim.lr = as_real();
      } else if (key == "train.warmup") {
        optim.warmup = as_int();
      } else if (key == "train.weight_decay") {
        optim.weight_decay = as_real();
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    }
    validate();
  }

  void validate() const {
    if (data.crop_h > data.height || data.crop_w > data.width)
      throw ConfigError("crop exceeds scene extents");
    if (optim.batch < 1 || optim.steps < 1) throw ConfigError("bad optimization settings");
    if (optim.warmup >= optim.steps) throw ConfigError("warmup must be below total steps");
    if (data.classes < 2) throw ConfigError("need at least 2 classes");
  }

  HsiAdapterConfig model_config() const {
    HsiAdapterConfig m = model;
    m.bands = data.bands;
    m.num_classes = data.classes;
    m.sync();
    return m;
  }
};

}  // namespace hsia
