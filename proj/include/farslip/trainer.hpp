#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "farslip/checkpoint.hpp"
#include "farslip/datamodel.hpp"
#include "farslip/encoders.hpp"
#include "farslip/losses.hpp"
#include "farslip/regionfeat.hpp"

namespace farslip {

struct TrainConfig {
  TrainStage stage = TrainStage::s1;
  double learning_rate = 1e-3;
  int epochs = 1;
  double weight_decay = 0.01;
  int warmup_steps = 10;
  int batch_size = 4;
  uint64_t seed = 0;
  TeacherStrategy teacher_strategy = TeacherStrategy::ema;
  double ema_momentum = 0.99;
  bool text_frozen = false;
  CropMethod crop_method = CropMethod::random;
  int crops_per_image = 4;
  double crop_scale_min = 0.2;
  double crop_scale_max = 0.8;
  LossWeights weights;
  RegionMode region_mode = RegionMode::cls_of_crop;
  int region_batch_size = 8;
  bool regions_in_batch_only = true;  // sample region pairs from the current image batch
  bool grad_clip = true;
  double grad_clip_norm = 1.0;
  std::string category_template = kDefaultCategoryTemplate;

  void validate() const {
    require(learning_rate > 0, "TrainConfig: learning_rate must be positive");
    require(batch_size >= 2, "TrainConfig: batch_size must be >= 2");
    require(epochs >= 1, "TrainConfig: epochs must be >= 1");
    weights.validate();
  }
};

// Paper presets keep the published settings by name; the toy preset is
// what random-init desk runs actually use.
inline TrainConfig train_preset(const std::string& name) {
  TrainConfig c;
  if (name == "paper-s1") {
    c.stage = TrainStage::s1;
    c.learning_rate = 1e-6;
    c.epochs = 1;
    c.weight_decay = 1.0;
    c.warmup_steps = 1000;
    c.batch_size = 40;
  } else if (name == "paper-s2") {
    c.stage = TrainStage::s2;
    c.learning_rate = 4e-9;
    c.epochs = 10;
    c.weight_decay = 1.0;
    c.warmup_steps = 250;
    c.batch_size = 40;
  } else if (name == "toy-s1") {
    c.stage = TrainStage::s1;
    c.learning_rate = 1e-3;
    c.epochs = 8;
    c.weight_decay = 0.01;
    c.warmup_steps = 10;
    c.batch_size = 4;
  } else if (name == "toy-s2") {
    c.stage = TrainStage::s2;
    c.learning_rate = 1e-3;
    c.epochs = 8;
    c.weight_decay = 0.01;
    c.warmup_steps = 10;
    c.batch_size = 4;
  } else {
    throw std::invalid_argument("unknown preset: " + name);
  }
  return c;
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  return {{"stage", to_string(c.stage)},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"teacher_strategy", to_string(c.teacher_strategy)},
          {"ema_momentum", c.ema_momentum},
          {"text_frozen", c.text_frozen},
          {"crop_method", to_string(c.crop_method)},
          {"crops_per_image", c.crops_per_image},
          {"crop_scale_range", {c.crop_scale_min, c.crop_scale_max}},
          {"loss_weights", {{"glo", c.weights.w_glo}, {"loc", c.weights.w_loc}, {"dis", c.weights.w_dis}}},
          {"region_mode", to_string(c.region_mode)},
          {"region_batch_size", c.region_batch_size},
          {"regions_in_batch_only", c.regions_in_batch_only},
          {"grad_clip", c.grad_clip},
          {"grad_clip_norm", c.grad_clip_norm},
          {"category_template", c.category_template}};
}

inline TrainConfig train_config_from_json(const nlohmann::ordered_json& j) {
  TrainConfig c;
  c.stage = stage_from_string(j.at("stage").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.teacher_strategy = teacher_strategy_from_string(j.at("teacher_strategy").get<std::string>());
  c.ema_momentum = j.at("ema_momentum").get<double>();
  c.text_frozen = j.at("text_frozen").get<bool>();
  c.crop_method = crop_method_from_string(j.at("crop_method").get<std::string>());
  c.crops_per_image = j.at("crops_per_image").get<int>();
  c.crop_scale_min = j.at("crop_scale_range").at(0).get<double>();
  c.crop_scale_max = j.at("crop_scale_range").at(1).get<double>();
  c.weights.w_glo = j.at("loss_weights").at("glo").get<double>();
  c.weights.w_loc = j.at("loss_weights").at("loc").get<double>();
  c.weights.w_dis = j.at("loss_weights").at("dis").get<double>();
  c.region_mode = region_mode_from_string(j.at("region_mode").get<std::string>());
  c.region_batch_size = j.at("region_batch_size").get<int>();
  c.regions_in_batch_only = j.at("regions_in_batch_only").get<bool>();
  c.grad_clip = j.at("grad_clip").get<bool>();
  c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  c.category_template = j.at("category_template").get<std::string>();
  return c;
}

inline std::string config_hash(const TrainConfig& c) {
  std::string s = train_config_to_json(c).dump();
  uint64_t h = 1469598103934665603ull;
  for (char ch : s) {
    h ^= static_cast<uint8_t>(ch);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// --- schedule -----------------------------------------------------------

// Linear warmup 0 -> lr over warmup_steps, then cosine decay to 0 at
// total_steps.
inline double lr_at(int64_t step, const TrainConfig& config, int64_t total_steps) {
  require(step >= 0, "lr_at: negative step");
  require(total_steps >= config.warmup_steps, "lr_at: total_steps < warmup_steps");
  if (config.warmup_steps > 0 && step < config.warmup_steps)
    return config.learning_rate * static_cast<double>(step) / config.warmup_steps;
  if (step >= total_steps) return 0.0;
  if (total_steps == config.warmup_steps) return config.learning_rate;
  double progress = static_cast<double>(step - config.warmup_steps) /
                    static_cast<double>(total_steps - config.warmup_steps);
  return config.learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// --- optimizer ----------------------------------------------------------

// Decoupled-weight-decay adaptive moments.
struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;

  void step(std::map<std::string, Matrix*>& params, const std::map<std::string, Matrix>& grads, double lr,
            double weight_decay) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Matrix& g = git->second;
      Matrix& mm = m.try_emplace(name, Matrix::Zero(p->rows(), p->cols())).first->second;
      Matrix& vv = v.try_emplace(name, Matrix::Zero(p->rows(), p->cols())).first->second;
      mm = beta1 * mm + (1.0 - beta1) * g;
      vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
      Matrix mhat = mm / bc1;
      Matrix vhat = vv / bc2;
      *p -= lr * weight_decay * (*p);  // decoupled decay
      *p -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j{{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"t", t}};
    nlohmann::ordered_json jm, jv;
    for (const auto& [k, mat] : m) jm[k] = matrix_to_json(mat);
    for (const auto& [k, mat] : v) jv[k] = matrix_to_json(mat);
    j["m"] = std::move(jm);
    j["v"] = std::move(jv);
    return j;
  }

  static AdamWState from_json(const nlohmann::ordered_json& j) {
    AdamWState s;
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.eps = j.at("eps").get<double>();
    s.t = j.at("t").get<int64_t>();
    for (auto it = j.at("m").begin(); it != j.at("m").end(); ++it) s.m[it.key()] = matrix_from_json(it.value());
    for (auto it = j.at("v").begin(); it != j.at("v").end(); ++it) s.v[it.key()] = matrix_from_json(it.value());
    return s;
  }
};

// --- train state ----------------------------------------------------------

// Stream discipline: every random draw comes from a stream derived purely
// from (seed, epoch or step), so a resumed run replays the uninterrupted
// one without tracking stream positions.
struct TrainState {
  int64_t step = 0;
  uint64_t seed = 0;
  AdamWState adam;

  static TrainState fresh(uint64_t seed) {
    TrainState s;
    s.seed = seed;
    return s;
  }

  Rng epoch_stream(int epoch) const { return Rng(seed).split("data").split("epoch" + std::to_string(epoch)); }
  Rng crop_stream(int64_t at_step) const { return Rng(seed).split("crop").split("step" + std::to_string(at_step)); }
  Rng region_stream(int64_t at_step) const {
    return Rng(seed).split("region").split("step" + std::to_string(at_step));
  }

  nlohmann::ordered_json to_json() const {
    return {{"step", step}, {"seed", seed}, {"adam", adam.to_json()}};
  }

  static TrainState from_json(const nlohmann::ordered_json& j) {
    TrainState s;
    s.step = j.at("step").get<int64_t>();
    s.seed = j.at("seed").get<uint64_t>();
    s.adam = AdamWState::from_json(j.at("adam"));
    return s;
  }
};

struct StepReport {
  double total = 0;
  std::map<std::string, double> components;
  double lr = 0;
};

namespace detail {

inline std::map<std::string, Matrix*> trainable_params(TeacherStudentBundle& bundle, Matrix& log_temp) {
  std::map<std::string, Matrix*> out;
  for (auto& [name, m] : bundle.student.params()) out["student." + name] = &m;
  if (!bundle.text_frozen)
    for (auto& [name, m] : bundle.text.params()) out["text." + name] = &m;
  out["temp.log_temp"] = &log_temp;
  return out;
}

inline void clip_grads(std::map<std::string, Matrix>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0) return;
  double scale = max_norm / norm;
  for (auto& [name, g] : grads) g *= scale;
}

}  // namespace detail

// One optimizer step on all unfrozen parameters. s1 batches pair the
// image batch with per-image crop plans; s2 pairs it with a region batch.
inline StepReport train_step(TeacherStudentBundle& bundle, const GlobalBatch& batch,
                             const std::vector<CropPlan>& crop_plans, const RegionBatch& regions,
                             const TrainConfig& config, TrainState& state, int64_t total_steps) {
  config.validate();
  const int n = batch.size();
  require(n >= 2, "train_step: batch size must be >= 2");
  require(static_cast<int>(batch.captions.size()) == n, "train_step: image/caption mismatch");

  ad::Tape tape;
  VarMap student_vars = register_params(tape, bundle.student.params(), true);
  VarMap text_vars = register_params(tape, bundle.text.params(), !bundle.text_frozen);
  ad::Var log_temp_var = tape.leaf(bundle.log_temp, true);
  ad::Var tau = bundle.temperature_var(tape, log_temp_var);

  // image tower
  std::vector<EncodedImageVar> encoded;
  std::vector<ad::Var> cls_rows;
  for (const Image& img : batch.images) {
    encoded.push_back(bundle.student.forward(tape, student_vars, img));
    cls_rows.push_back(encoded.back().cls);
  }
  ad::Var v_cls = ad::vcat(cls_rows);

  // text tower
  std::vector<ad::Var> text_rows;
  for (const std::string& cap : batch.captions) text_rows.push_back(bundle.text.forward(tape, text_vars, cap));
  ad::Var t_cls = ad::vcat(text_rows);

  LossComponents components;
  components.glo = loss_glo(v_cls, t_cls, tau);

  if (config.stage == TrainStage::s1) {
    require(static_cast<int>(crop_plans.size()) == n, "train_step: one crop plan per image required in s1");
    std::vector<ad::Var> roi_rows, local_rows;
    const int sz = bundle.student.config().image_size;
    for (int i = 0; i < n; ++i) {
      const EncodedImageVar& enc = encoded[i];
      for (const BBox& box : crop_plans[i].boxes) {
        roi_rows.push_back(roi_embedding_var(tape, enc.patches, enc.h, enc.w, box));
        Image crop = crop_image(batch.images[i], box, sz, sz);
        if (bundle.strategy == TeacherStrategy::online) {
          // online teacher shares weights and gradients with the student
          EncodedImageVar crop_enc = bundle.student.forward(tape, student_vars, crop);
          local_rows.push_back(ad::mean_rows(crop_enc.patches));
        } else {
          EncodedImage crop_enc = bundle.teacher().encode(crop);
          local_rows.push_back(tape.constant(crop_enc.patches.features.colwise().mean()));
        }
      }
    }
    if (!roi_rows.empty()) components.dis = loss_dis(ad::vcat(roi_rows), ad::vcat(local_rows));
  } else {
    require(regions.size() >= 2, "train_step: stage s2 needs a region batch of size >= 2");
    std::vector<ad::Var> region_rows;
    const int sz = bundle.student.config().image_size;
    for (const RegionEntry& entry : regions.entries) {
      require(entry.image_index >= 0 && entry.image_index < n, "train_step: region entry outside batch");
      switch (config.region_mode) {
        case RegionMode::cls_of_crop: {
          Image crop = crop_image(batch.images[entry.image_index], entry.bbox, sz, sz);
          region_rows.push_back(bundle.student.forward(tape, student_vars, crop).cls);
          break;
        }
        case RegionMode::pooled_patches_of_crop: {
          Image crop = crop_image(batch.images[entry.image_index], entry.bbox, sz, sz);
          region_rows.push_back(ad::mean_rows(bundle.student.forward(tape, student_vars, crop).patches));
          break;
        }
        case RegionMode::roi_embedding: {
          const EncodedImageVar& enc = encoded[entry.image_index];
          region_rows.push_back(roi_embedding_var(tape, enc.patches, enc.h, enc.w, entry.bbox));
          break;
        }
      }
    }
    std::vector<ad::Var> cat_rows;
    for (const std::string& text : regions.category_texts) cat_rows.push_back(bundle.text.forward(tape, text_vars, text));
    std::vector<std::string> cats;
    for (const auto& e : regions.entries) cats.push_back(e.category);
    components.loc = loss_loc(ad::vcat(region_rows), ad::vcat(cat_rows), positive_sets(cats), tau);
  }

  LossReport loss_report;
  ad::Var total = total_loss(tape, components, config.weights, config.stage, &loss_report);
  if (!std::isfinite(total.scalar())) {
    std::string ids;
    for (int i = 0; i < n; ++i) ids += (i ? "," : "") + std::to_string(i);
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(state.step) +
                             " (batch indices " + ids + ")");
  }

  tape.backward(total);
  std::map<std::string, Matrix> grads;
  for (const auto& [name, var] : student_vars) {
    const Matrix& g = tape.grad(var);
    if (g.size() != 0) grads["student." + name] = g;
  }
  if (!bundle.text_frozen)
    for (const auto& [name, var] : text_vars) {
      const Matrix& g = tape.grad(var);
      if (g.size() != 0) grads["text." + name] = g;
    }
  if (tape.grad(log_temp_var).size() != 0) grads["temp.log_temp"] = tape.grad(log_temp_var);

  if (config.grad_clip) detail::clip_grads(grads, config.grad_clip_norm);

  const double lr = lr_at(state.step, config, total_steps);
  auto params = detail::trainable_params(bundle, bundle.log_temp);
  state.adam.step(params, grads, lr, config.weight_decay);
  update_teacher(bundle);
  ++state.step;

  StepReport report;
  report.total = loss_report.total;
  report.components = loss_report.components;
  report.lr = lr;
  return report;
}

// --- full stage loop -----------------------------------------------------------

struct StageResult {
  std::string checkpoint_path;
  std::vector<nlohmann::ordered_json> epoch_log;
  double first_loss_glo = 0;
  double last_loss_glo = 0;
};

namespace detail {

inline GlobalBatch collect_batch(const std::vector<SyntheticSample>& dataset, const std::vector<int>& idx,
                                 bool long_captions) {
  GlobalBatch b;
  for (int i : idx) {
    b.images.push_back(dataset[i].record.image);
    b.captions.push_back(long_captions ? dataset[i].record.caption_long : dataset[i].record.caption_short);
  }
  return b;
}

}  // namespace detail

// Runs the configured stage over an in-memory dataset; writes the final
// checkpoint (tagged with the config hash) and a JSON-lines metrics log
// into run_dir.
inline StageResult run_stage(const TrainConfig& config, TeacherStudentBundle& bundle,
                             const std::vector<SyntheticSample>& dataset, const std::string& run_dir,
                             TrainState* resume_state = nullptr, bool long_captions = false) {
  config.validate();
  require(!dataset.empty(), "run_stage: empty dataset");
  std::filesystem::create_directories(run_dir);

  TrainState state = resume_state ? *resume_state : TrainState::fresh(config.seed);
  const int n = static_cast<int>(dataset.size());
  const int batches_per_epoch = n / config.batch_size + ((n % config.batch_size) >= 2 ? 1 : 0);
  const int64_t total_steps = static_cast<int64_t>(batches_per_epoch) * config.epochs;

  StageResult result;
  bool first_recorded = false;

  const int64_t start_step = state.step;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng order_rng = state.epoch_stream(epoch);
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[order_rng.uniform_index(static_cast<uint64_t>(i) + 1)]);

    double sum_total = 0, sum_glo = 0, sum_loc = 0, sum_dis = 0;
    int steps_this_epoch = 0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      int lo = b * config.batch_size;
      int hi = std::min(n, lo + config.batch_size);
      if (hi - lo < 2) continue;
      std::vector<int> idx(order.begin() + lo, order.begin() + hi);

      int64_t global_batch = static_cast<int64_t>(epoch) * batches_per_epoch + b;
      if (global_batch < start_step) continue;  // consumed before the resume snapshot
      GlobalBatch batch = detail::collect_batch(dataset, idx, long_captions);

      std::vector<CropPlan> plans;
      RegionBatch regions;
      if (config.stage == TrainStage::s1) {
        Rng crop_rng = state.crop_stream(global_batch);
        for (size_t i = 0; i < idx.size(); ++i)
          plans.push_back(plan_crops(config.crop_method, config.crops_per_image, crop_rng,
                                     config.crop_scale_min, config.crop_scale_max));
      } else {
        Rng region_rng = state.region_stream(global_batch);
        std::vector<ImageRecord> batch_records;
        for (size_t i = 0; i < idx.size(); ++i) {
          ImageRecord r = dataset[idx[i]].record;
          batch_records.push_back(std::move(r));
        }
        regions = build_region_batch(batch_records, config.region_batch_size, region_rng,
                                     config.category_template);
      }

      StepReport report = train_step(bundle, batch, plans, regions, config, state, total_steps);
      sum_total += report.total;
      if (report.components.count("glo")) {
        sum_glo += report.components.at("glo");
        if (!first_recorded) {
          result.first_loss_glo = report.components.at("glo");
          first_recorded = true;
        }
        result.last_loss_glo = report.components.at("glo");
      }
      if (report.components.count("loc")) sum_loc += report.components.at("loc");
      if (report.components.count("dis")) sum_dis += report.components.at("dis");
      ++steps_this_epoch;
    }

    if (steps_this_epoch > 0) {
      nlohmann::ordered_json entry{{"epoch", epoch},
                                   {"step", state.step},
                                   {"loss_total", sum_total / steps_this_epoch},
                                   {"loss_glo", sum_glo / steps_this_epoch}};
      if (config.stage == TrainStage::s2) entry["loss_loc"] = sum_loc / steps_this_epoch;
      if (config.stage == TrainStage::s1) entry["loss_dis"] = sum_dis / steps_this_epoch;
      result.epoch_log.push_back(std::move(entry));
    }
  }

  // persist: checkpoint with config hash, metrics log, echoed config
  result.checkpoint_path = run_dir + "/checkpoint.json";
  nlohmann::ordered_json extra{{"config_hash", config_hash(config)},
                               {"train_config", train_config_to_json(config)},
                               {"state", state.to_json()}};
  save_checkpoint(bundle, result.checkpoint_path, extra);
  {
    std::ofstream log(run_dir + "/metrics_log.jsonl");
    for (const auto& entry : result.epoch_log) log << entry.dump() << "\n";
  }
  {
    std::ofstream cfg(run_dir + "/config.json");
    cfg << train_config_to_json(config).dump(2) << "\n";
  }
  if (resume_state) *resume_state = state;
  return result;
}

}  // namespace farslip
