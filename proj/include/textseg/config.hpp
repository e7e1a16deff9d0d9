#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "textseg/errors.hpp"

namespace textseg {

// Flat key=value run configuration. Every key has a documented default;
// unknown keys are rejected. File format: one `key = value` per line,
// '#' starts a comment. CLI --set overrides win over file values.
class RunConfig {
 public:
  struct KeyInfo {
    const char* key;
    const char* def;
    const char* doc;
  };

  // The single source of truth for keys, defaults and docs. Paper-scale
  // values go in the doc string; defaults are desk scale.
  static const std::vector<KeyInfo>& schema() {
    static const std::vector<KeyInfo> s = {
        {"data.dir", "data/synth", "dataset directory (manifest.json inside)"},
        {"data.cases", "100", "number of synthetic cases to generate"},
        {"data.size", "32", "cubic volume edge (paper scale: 128)"},
        {"data.ratio_train", "0.6", "train split ratio"},
        {"data.ratio_val", "0.15", "validation split ratio"},
        {"data.ratio_test", "0.25", "test split ratio"},
        {"data.seed", "0", "generator + split seed"},
        {"data.noise", "0.05", "additive noise level"},
        {"data.attenuation", "1.0",
         "flair-like channel lesion contrast attenuation in [0,1]; 1 means "
         "the labeled lesion is image-indistinguishable from decoys"},
        {"data.decoys", "2", "decoy blobs per case"},
        {"data.lesion_min", "1", "min lesions per case"},
        {"data.lesion_max", "1", "max lesions per case"},
        {"data.radius_min", "4", "min WT semi-axis (voxels)"},
        {"data.radius_max", "7", "max WT semi-axis (voxels)"},
        {"model.depth", "3", "encoder stride-2 stages (paper scale: 5)"},
        {"model.embed_dim", "32", "bottleneck embed dim D (paper scale: 768)"},
        {"model.channels", "",
         "comma-separated encoder channels per level; empty = derived"},
        {"model.text_embed_dim", "32", "embedding table width"},
        {"model.text_hidden_dim", "32", "text MLP hidden width"},
        {"model.frozen_text_embedding", "false",
         "freeze the embedding table (mirrors a frozen pretrained encoder)"},
        {"fusion.variant", "bidirectional",
         "image_only | dot_sum | t2i_once | bidirectional"},
        {"text.template", "full",
         "raw | location_only | feature_only | full"},
        {"train.lr", "0.001", "base learning rate (paper scale: 0.0001)"},
        {"train.epochs", "30", "training epochs (paper scale: 200)"},
        {"train.batch", "2", "batch size"},
        {"train.weight_decay", "0.0001", "AdamW decoupled weight decay"},
        {"train.warmup_frac", "0.25",
         "fraction of steps under linear lr warm-up (paper: 50/200 epochs)"},
        {"train.seed", "0", "training seed (init, shuffling)"},
        {"train.val_every", "1", "validate every k epochs"},
        {"eval.split", "test", "split to evaluate: train | val | test"},
        {"eval.checkpoint", "", "run directory containing the checkpoint"},
        {"out.dir", "",
         "output directory; empty derives <out.root>/<command>-<tag>"},
        {"out.root", "runs",
         "root for derived output directories (env TEXTSEG_OUT_ROOT "
         "overrides this default)"},
    };
    return s;
  }

  static RunConfig defaults() {
    RunConfig c;
    for (const auto& k : schema()) c.values_[k.key] = k.def;
    if (const char* env = std::getenv("TEXTSEG_OUT_ROOT")) {
      c.values_["out.root"] = env;
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end()) {
      throw ConfigError("unknown config key: " + key);
    }
    values_[key] = value;
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) +
                          " is not key = value: " + line);
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (values_.find(key) == values_.end()) {
        throw ConfigError("unknown config key at line " +
                          std::to_string(lineno) + ": " + key);
      }
      values_[key] = value;
    }
  }

  // "key=value" as given on the command line.
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--set expects key=value, got: " + assignment);
    }
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
  }

  const std::string& get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get_string(key);
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config " + key + " is not a number: " + v);
    }
  }

  std::int64_t get_int(const std::string& key) const {
    const std::string& v = get_string(key);
    try {
      std::size_t pos = 0;
      const long long i = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return i;
    } catch (const std::exception&) {
      throw ConfigError("config " + key + " is not an integer: " + v);
    }
  }

  std::size_t get_size(const std::string& key) const {
    const std::int64_t i = get_int(key);
    if (i < 0) throw ConfigError("config " + key + " must be >= 0");
    return static_cast<std::size_t>(i);
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config " + key + " is not a bool: " + v);
  }

  std::vector<std::size_t> get_size_list(const std::string& key) const {
    std::vector<std::size_t> out;
    const std::string& v = get_string(key);
    if (v.empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        out.push_back(static_cast<std::size_t>(std::stoull(item)));
      } catch (const std::exception&) {
        throw ConfigError("config " + key + " has a bad entry: " + item);
      }
    }
    return out;
  }

  // Sorted key = value lines; written to every run log so any run can be
  // reproduced from its output alone.
  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace textseg
