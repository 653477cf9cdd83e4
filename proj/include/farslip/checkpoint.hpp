#pragma once

#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "farslip/encoders.hpp"
#include "farslip/tensor.hpp"

namespace farslip {

// Checkpoint archive: one JSON document with a schema version, a config
// block, and named float arrays. Small models only, so plain JSON rather
// than a binary container.
inline constexpr int kCheckpointSchema = 1;

inline nlohmann::ordered_json matrix_to_json(const Matrix& m) {
  nlohmann::ordered_json data = nlohmann::ordered_json::array();
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline Matrix matrix_from_json(const nlohmann::ordered_json& j) {
  Matrix m(j.at("rows").get<int>(), j.at("cols").get<int>());
  const auto& data = j.at("data");
  require(static_cast<Eigen::Index>(data.size()) == m.size(), "matrix_from_json: size mismatch");
  Eigen::Index k = 0;
  for (int i = 0; i < m.rows(); ++i)
    for (int jx = 0; jx < m.cols(); ++jx) m(i, jx) = data.at(k++).get<double>();
  return m;
}

inline nlohmann::ordered_json params_to_json(const ParamMap& params) {
  nlohmann::ordered_json arrays;
  for (const auto& [name, m] : params) arrays[name] = matrix_to_json(m);
  return arrays;
}

inline ParamMap params_from_json(const nlohmann::ordered_json& arrays) {
  ParamMap params;
  for (auto it = arrays.begin(); it != arrays.end(); ++it) params[it.key()] = matrix_from_json(it.value());
  return params;
}

inline nlohmann::ordered_json vision_config_to_json(const VisionEncoderConfig& c) {
  return {{"patch_size", c.patch_size}, {"image_size", c.image_size}, {"depth", c.depth},
          {"width", c.width},           {"heads", c.heads},           {"channels", c.channels},
          {"seed", c.seed}};
}

inline VisionEncoderConfig vision_config_from_json(const nlohmann::ordered_json& j) {
  VisionEncoderConfig c;
  c.patch_size = j.at("patch_size").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.depth = j.at("depth").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.channels = j.at("channels").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

inline nlohmann::ordered_json text_config_to_json(const TextEncoderConfig& c) {
  return {{"vocab", c.vocab}, {"max_len", c.max_len}, {"depth", c.depth},
          {"width", c.width}, {"heads", c.heads},     {"seed", c.seed}};
}

inline TextEncoderConfig text_config_from_json(const nlohmann::ordered_json& j) {
  TextEncoderConfig c;
  c.vocab = j.at("vocab").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.depth = j.at("depth").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

inline nlohmann::ordered_json bundle_to_json(const TeacherStudentBundle& bundle) {
  nlohmann::ordered_json j;
  j["schema"] = kCheckpointSchema;
  j["config"] = {{"vision", vision_config_to_json(bundle.student.config())},
                 {"text", text_config_to_json(bundle.text.config())},
                 {"strategy", to_string(bundle.strategy)},
                 {"ema_momentum", bundle.ema_momentum},
                 {"text_frozen", bundle.text_frozen}};
  j["arrays"] = {{"student", params_to_json(bundle.student.params())},
                 {"text", params_to_json(bundle.text.params())},
                 {"log_temp", matrix_to_json(bundle.log_temp)}};
  if (bundle.strategy != TeacherStrategy::online)
    j["arrays"]["teacher"] = params_to_json(bundle.teacher_storage.params());
  return j;
}

inline TeacherStudentBundle bundle_from_json(const nlohmann::ordered_json& j) {
  int schema = j.at("schema").get<int>();
  require(schema == kCheckpointSchema, "checkpoint: unsupported schema " + std::to_string(schema));
  const auto& cfg = j.at("config");
  TeacherStudentBundle bundle(vision_config_from_json(cfg.at("vision")), text_config_from_json(cfg.at("text")),
                              teacher_strategy_from_string(cfg.at("strategy").get<std::string>()),
                              cfg.at("ema_momentum").get<double>());
  bundle.text_frozen = cfg.at("text_frozen").get<bool>();
  const auto& arrays = j.at("arrays");
  bundle.student.params() = params_from_json(arrays.at("student"));
  bundle.text.params() = params_from_json(arrays.at("text"));
  bundle.log_temp = matrix_from_json(arrays.at("log_temp"));
  if (bundle.strategy != TeacherStrategy::online)
    bundle.teacher_storage.params() = params_from_json(arrays.at("teacher"));
  return bundle;
}

inline void save_checkpoint(const TeacherStudentBundle& bundle, const std::string& path,
                            const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json j = bundle_to_json(bundle);
  if (!extra.is_null() && !extra.empty()) j["extra"] = extra;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << j.dump();
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline TeacherStudentBundle load_checkpoint(const std::string& path, nlohmann::ordered_json* extra = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(in);
  if (extra) *extra = j.value("extra", nlohmann::ordered_json{});
  return bundle_from_json(j);
}

// Weight-import hook: applies a flat external name -> array archive to a
// parameter map through a name mapping (external name -> internal name).
// Unmapped internal parameters keep their current values; mapped arrays
// must match shapes.
inline int import_named_arrays(ParamMap& params, const nlohmann::ordered_json& archive,
                               const std::map<std::string, std::string>& name_map) {
  int imported = 0;
  for (const auto& [external, internal] : name_map) {
    if (!archive.contains(external)) continue;
    Matrix m = matrix_from_json(archive.at(external));
    auto it = params.find(internal);
    require(it != params.end(), "import_named_arrays: unknown internal parameter " + internal);
    require(it->second.rows() == m.rows() && it->second.cols() == m.cols(),
            "import_named_arrays: shape mismatch for " + internal);
    it->second = std::move(m);
    ++imported;
  }
  return imported;
}

}  // namespace farslip
