#pragma once

#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "farslip/checkpoint.hpp"
#include "farslip/trainer.hpp"

namespace farslip {

// Fully populated defaults; merging a file or overrides on top can never
// leave a field unset.
inline nlohmann::ordered_json default_run_config() {
  return {{"seed", 0},
          {"data", {{"samples", 64},
                    {"grid_rows", 2},
                    {"grid_cols", 2},
                    {"image_size", 32},
                    {"noise_sigma", 0.05},
                    {"shuffle_layout", true}}},
          {"vision", vision_config_to_json(VisionEncoderConfig{})},
          {"text", text_config_to_json(TextEncoderConfig{})},
          {"train", train_config_to_json(TrainConfig{})},
          {"eval", {{"coherence_pairs", 500},
                    {"coherence_images", 300},
                    {"instance_cap", 256},
                    {"coherence_mode", "per_image_mean"}}}};
}

inline void merge_config(nlohmann::ordered_json& base, const nlohmann::ordered_json& overlay) {
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_config(base[it.key()], *it);
    else
      base[it.key()] = *it;
  }
}

// Dotted path, e.g. "train.learning_rate". The value is parsed as JSON when
// possible, otherwise taken as a string.
inline void set_config_path(nlohmann::ordered_json& cfg, const std::string& path,
                            const std::string& value) {
  nlohmann::ordered_json* node = &cfg;
  size_t pos = 0;
  while (true) {
    size_t dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw std::invalid_argument("config override: empty key in '" + path + "'");
    if (dot == std::string::npos) {
      nlohmann::ordered_json parsed = nlohmann::ordered_json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? nlohmann::ordered_json(value) : parsed;
      return;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

// Environment overrides for CI: FARSLIP_TRAIN__LEARNING_RATE=1e-4 sets
// train.learning_rate (double underscore separates sections, keys are
// lowercased).
inline void apply_env_overrides(nlohmann::ordered_json& cfg, char** envp,
                                const std::string& prefix = "FARSLIP_") {
  if (!envp) return;
  for (char** e = envp; *e; ++e) {
    std::string entry(*e);
    if (entry.rfind(prefix, 0) != 0) continue;
    size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(prefix.size(), eq - prefix.size());
    std::string value = entry.substr(eq + 1);
    std::string path;
    for (size_t i = 0; i < key.size(); ++i) {
      if (key[i] == '_' && i + 1 < key.size() && key[i + 1] == '_') {
        path += '.';
        ++i;
      } else {
        path += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
      }
    }
    set_config_path(cfg, path, value);
  }
}

struct RunConfig {
  nlohmann::ordered_json resolved;

  uint64_t seed() const { return resolved.at("seed").get<uint64_t>(); }
  TrainConfig train() const { return train_config_from_json(resolved.at("train")); }
  VisionEncoderConfig vision() const { return vision_config_from_json(resolved.at("vision")); }
  TextEncoderConfig text() const { return text_config_from_json(resolved.at("text")); }

  SyntheticSceneSpec scene() const {
    const auto& d = resolved.at("data");
    SyntheticSceneSpec s;
    s.grid_rows = d.at("grid_rows").get<int>();
    s.grid_cols = d.at("grid_cols").get<int>();
    s.image_size = d.at("image_size").get<int>();
    s.noise_sigma = d.at("noise_sigma").get<double>();
    s.shuffle_layout = d.at("shuffle_layout").get<bool>();
    s.seed = seed();
    return s;
  }
};

// Precedence: CLI overrides > env > config file > defaults.
inline RunConfig resolve_run_config(const std::string& file_path,
                                    const std::vector<std::string>& cli_overrides,
                                    char** envp = nullptr) {
  RunConfig rc;
  rc.resolved = default_run_config();
  if (!file_path.empty()) {
    std::ifstream in(file_path);
    if (!in) throw std::runtime_error("config file not found: " + file_path);
    nlohmann::ordered_json file_cfg;
    in >> file_cfg;
    merge_config(rc.resolved, file_cfg);
  }
  apply_env_overrides(rc.resolved, envp);
  for (const auto& kv : cli_overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must be key=value: " + kv);
    set_config_path(rc.resolved, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return rc;
}

}  // namespace farslip
