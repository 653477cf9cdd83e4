#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "farslip/config.hpp"
#include "farslip/datasetbuilder.hpp"
#include "farslip/evalsuite.hpp"
#include "farslip/pngio.hpp"
#include "farslip/trainer.hpp"

namespace fs = std::filesystem;
using namespace farslip;
using namespace farslip::pngio;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// Loads manifest records plus their images, and masks when a sibling
// masks/<image_id>.png exists. Paths resolve relative to the manifest.
std::vector<SyntheticSample> load_samples(const std::string& manifest_path) {
  LoadResult loaded = load_manifest(manifest_path);
  for (const auto& rej : loaded.rejections)
    std::cerr << "warning: rejected " << rej.image_id << " (line " << rej.line << "): " << rej.reason
              << "\n";
  fs::path base = fs::path(manifest_path).parent_path();
  std::vector<SyntheticSample> samples;
  for (auto& rec : loaded.records) {
    SyntheticSample s;
    s.record = std::move(rec);
    if (!s.record.image_path.empty()) {
      fs::path p = fs::path(s.record.image_path);
      if (p.is_relative()) p = base / p;
      s.record.image = load_image(p.string());
    }
    fs::path mask_path = base / "masks" / (s.record.image_id + ".png");
    if (fs::exists(mask_path)) s.mask = load_mask(mask_path.string());
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<std::string> class_names_or_palette(const std::string& classes_flag) {
  if (!classes_flag.empty()) return split_csv(classes_flag);
  std::vector<std::string> names;
  for (const auto& c : synthetic_palette()) names.push_back(c.name);
  return names;
}

std::vector<Vector> encode_class_prototypes(const TextEncoder& text,
                                            const std::vector<std::string>& names,
                                            const std::string& tmpl) {
  std::vector<Vector> out;
  for (const auto& n : names) out.push_back(text.encode(template_category(n, tmpl)).cls);
  return out;
}

int dominant_class(const Mask& mask) {
  std::map<int, int> counts;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) ++counts[mask.at(y, x)];
  int best = -1, best_count = -1;
  for (const auto& [cls, count] : counts)
    if (count > best_count) best = cls, best_count = count;
  return best;
}

TeacherStudentBundle load_checkpoint_or_die(const std::string& path,
                                            nlohmann::ordered_json* extra = nullptr) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  return load_checkpoint(path, extra);
}

int cmd_synth_data(const RunConfig& rc, const std::string& out_dir, int samples) {
  SyntheticSceneSpec spec = rc.scene();
  auto dataset = synthesize_dataset(spec, samples);
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks");
  std::vector<ImageRecord> records;
  for (auto& s : dataset) {
    std::string rel = "images/" + s.record.image_id + ".png";
    save_image((fs::path(out_dir) / rel).string(), s.record.image);
    save_mask((fs::path(out_dir) / "masks" / (s.record.image_id + ".png")).string(), s.mask);
    s.record.image_path = rel;
    records.push_back(s.record);
  }
  save_manifest(records, (fs::path(out_dir) / "manifest.jsonl").string());
  std::ofstream cfg(fs::path(out_dir) / "config.json");
  cfg << rc.resolved.dump(2) << "\n";
  std::cout << "wrote " << records.size() << " samples to " << out_dir << "\n";
  return 0;
}

int cmd_build_dataset(const RunConfig& rc, const std::string& annotations,
                      const std::string& manifest_in, const std::string& out_dir,
                      const std::string& captioner, const std::string& kind_flag, int qa_n) {
  LoadResult loaded;
  if (!annotations.empty()) {
    std::ifstream in(annotations);
    if (!in) throw std::runtime_error("annotations file not found: " + annotations);
    nlohmann::json j;
    in >> j;
    loaded = import_coco_detections(j);
  } else if (!manifest_in.empty()) {
    loaded = load_manifest(manifest_in);
  } else {
    throw std::runtime_error("build-dataset needs --annotations or --manifest");
  }
  for (const auto& rej : loaded.rejections)
    std::cerr << "warning: rejected " << rej.image_id << ": " << rej.reason << "\n";

  std::unique_ptr<CaptionerClient> client;
  if (captioner == "mock")
    client = std::make_unique<MockCaptioner>(rc.seed());
  else if (captioner == "fail")
    client = std::make_unique<FailingCaptioner>();
  else
    throw std::runtime_error("unknown captioner: " + captioner);

  std::vector<std::string> flagged;
  std::vector<ImageRecord> records = std::move(loaded.records);
  auto run_kind = [&](CaptionKind kind) {
    RecaptionResult r = recaption(std::move(records), *client, kind);
    records = std::move(r.records);
    flagged.insert(flagged.end(), r.flagged_ids.begin(), r.flagged_ids.end());
  };
  if (kind_flag == "short" || kind_flag == "both") run_kind(CaptionKind::short_caption);
  if (kind_flag == "long" || kind_flag == "both") run_kind(CaptionKind::long_caption);
  if (kind_flag != "short" && kind_flag != "long" && kind_flag != "both")
    throw std::runtime_error("--kind must be short, long, or both");

  fs::create_directories(out_dir);
  save_manifest(records, (fs::path(out_dir) / "manifest.jsonl").string());
  {
    nlohmann::ordered_json fj = {{"flagged_ids", flagged}};
    std::ofstream out(fs::path(out_dir) / "flagged.json");
    out << fj.dump(2) << "\n";
  }
  size_t n = std::min<size_t>(static_cast<size_t>(qa_n), records.size());
  Rng qa_rng = Rng(rc.seed()).split("qa");
  QaSample qa = qa_sample(records, qa_rng, n,
                          kind_flag == "short" ? CaptionKind::short_caption
                                               : CaptionKind::long_caption);
  std::ofstream csv(fs::path(out_dir) / "qa_review.csv");
  csv << qa.review_csv;
  std::cout << "wrote " << records.size() << " records (" << flagged.size() << " flagged, "
            << n << " in QA sheet) to " << out_dir << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc, const std::string& data, const std::string& out_dir,
              const std::string& init_from, const std::string& resume_from, bool long_captions) {
  TrainConfig tc = rc.train();
  tc.seed = rc.seed();
  auto dataset = load_samples(data);

  TeacherStudentBundle bundle;
  TrainState state = TrainState::fresh(tc.seed);
  bool have_state = false;
  if (!resume_from.empty()) {
    nlohmann::ordered_json extra;
    bundle = load_checkpoint_or_die(resume_from, &extra);
    if (extra.contains("state")) {
      state = TrainState::from_json(extra.at("state"));
      have_state = true;
    }
  } else if (!init_from.empty()) {
    bundle = load_checkpoint_or_die(init_from);
    bundle.strategy = tc.teacher_strategy;
    bundle.ema_momentum = tc.ema_momentum;
    bundle.text_frozen = tc.text_frozen;
  } else {
    if (tc.stage == TrainStage::s2)
      std::cerr << "warning: --stage s2 without --init-from; training from random init\n";
    VisionEncoderConfig vc = rc.vision();
    TextEncoderConfig xc = rc.text();
    vc.seed = tc.seed;
    xc.seed = tc.seed;
    bundle = TeacherStudentBundle(vc, xc, tc.teacher_strategy, tc.ema_momentum);
    bundle.text_frozen = tc.text_frozen;
  }

  StageResult result = run_stage(tc, bundle, dataset, out_dir, have_state ? &state : nullptr,
                                 long_captions);
  std::ofstream cfg(fs::path(out_dir) / "run_config.json");
  cfg << rc.resolved.dump(2) << "\n";
  std::cout << "checkpoint: " << result.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& checkpoint, const std::string& data,
             const std::string& metrics_flag, const std::string& classes_flag,
             const std::string& out_file) {
  TeacherStudentBundle bundle = load_checkpoint_or_die(checkpoint);
  auto dataset = load_samples(data);
  require(!dataset.empty(), "eval: empty dataset");
  std::vector<std::string> names = class_names_or_palette(classes_flag);
  const auto& ev = rc.resolved.at("eval");
  const int pairs = ev.at("coherence_pairs").get<int>();
  const int max_images = ev.at("coherence_images").get<int>();
  const int cap = ev.at("instance_cap").get<int>();

  std::vector<PatchGrid> dense;
  std::vector<Mask> masks;
  for (const auto& s : dataset) {
    if (static_cast<int>(dense.size()) >= max_images) break;
    if (s.mask.height == 0) continue;
    dense.push_back(bundle.student.dense_features(s.record.image));
    masks.push_back(s.mask);
  }

  MetricReport report;
  report.seed = rc.seed();
  report.sampling_config = {{"coherence_pairs", pairs},
                            {"images_used", dense.size()},
                            {"instance_cap", cap}};
  Rng eval_rng = Rng(rc.seed()).split("eval");

  for (const std::string& metric : split_csv(metrics_flag)) {
    if (metric == "dbi" || metric == "acc1") {
      require(!dense.empty(), "eval: no masks available for " + metric);
      Rng rng = eval_rng.split("instances_" + metric);
      auto set = mask_pool_instances(dense, masks, names, cap, rng);
      if (metric == "dbi") {
        report.dbi = dbi(set);
      } else {
        std::map<std::string, Vector> text;
        for (const auto& n : names)
          text[n] = bundle.text.encode(template_category(n, kDefaultCategoryTemplate)).cls;
        report.acc1 = region_text_acc1(set, text);
      }
    } else if (metric == "map") {
      require(!dense.empty(), "eval: no masks available for map");
      Rng rng = eval_rng.split("pairs");
      report.map_coherence = coherence_map(dense, masks, pairs, rng);
    } else if (metric == "miou") {
      require(!dense.empty(), "eval: no masks available for miou");
      auto protos = encode_class_prototypes(bundle.text, names, kDefaultCategoryTemplate);
      double total = 0;
      for (size_t i = 0; i < dense.size(); ++i)
        total += ovss_segment(dense[i], protos, masks[i]).miou;
      report.miou = total / static_cast<double>(dense.size());
    } else if (metric == "zsc") {
      require(!dense.empty(), "eval: no masks available for zsc labels");
      auto protos = encode_class_prototypes(bundle.text, names, kDefaultCategoryTemplate);
      std::vector<Vector> embs;
      std::vector<int> labels;
      size_t di = 0;
      for (const auto& s : dataset) {
        if (di >= dense.size()) break;
        if (s.mask.height == 0) continue;
        embs.push_back(bundle.student.encode(s.record.image).cls);
        labels.push_back(dominant_class(s.mask));
        ++di;
      }
      report.zsc_top1 = zsc_top1(embs, labels, protos);
    } else if (metric == "retrieval") {
      std::vector<Vector> imgs, texts;
      for (const auto& s : dataset) {
        imgs.push_back(bundle.student.encode(s.record.image).cls);
        texts.push_back(bundle.text.encode(s.record.caption_short).cls);
      }
      RecallReport r = retrieval_recall(imgs, texts, {1, 5, 10});
      report.recall_mean = r.mean;
    } else {
      throw std::runtime_error("unknown metric: " + metric);
    }
  }

  std::string out = report.to_json().dump(2) + "\n";
  if (!out_file.empty()) {
    std::ofstream f(out_file);
    f << out;
  }
  std::cout << out;
  return 0;
}

int cmd_segment(const RunConfig& rc, const std::string& checkpoint, const std::string& data,
                const std::string& classes_flag, const std::string& out_dir) {
  TeacherStudentBundle bundle = load_checkpoint_or_die(checkpoint);
  auto dataset = load_samples(data);
  require(!dataset.empty(), "segment: empty dataset");
  std::vector<std::string> names = class_names_or_palette(classes_flag);
  auto protos = encode_class_prototypes(bundle.text, names, kDefaultCategoryTemplate);
  fs::create_directories(out_dir);
  double total = 0;
  int with_gt = 0;
  for (const auto& s : dataset) {
    PatchGrid dense = bundle.student.dense_features(s.record.image);
    Mask gt = s.mask.height > 0 ? s.mask : Mask(s.record.image.height, s.record.image.width);
    SegmentationResult r = ovss_segment(dense, protos, gt);
    save_mask((fs::path(out_dir) / (s.record.image_id + "_pred.png")).string(), r.prediction);
    if (s.mask.height > 0) {
      total += r.miou;
      ++with_gt;
    }
  }
  nlohmann::ordered_json summary = {{"images", dataset.size()}, {"seed", rc.seed()}};
  if (with_gt > 0) summary["miou"] = total / with_gt;
  std::ofstream f(fs::path(out_dir) / "segment_summary.json");
  f << summary.dump(2) << "\n";
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_visualize(const std::string& checkpoint, const std::string& image_path, bool use_cls,
                  int anchor_x, int anchor_y, const std::string& out_path) {
  TeacherStudentBundle bundle = load_checkpoint_or_die(checkpoint);
  if (!fs::exists(image_path)) throw std::runtime_error("image not found: " + image_path);
  Image img = load_image(image_path);
  PatchGrid dense = bundle.student.dense_features(img);

  Vector anchor;
  if (use_cls) {
    anchor = bundle.student.encode(img).cls;
    require(anchor.size() == dense.features.cols(), "visualize: CLS/dense dimension mismatch");
  } else {
    require(anchor_x >= 0 && anchor_x < dense.w && anchor_y >= 0 && anchor_y < dense.h,
            "visualize: anchor outside the dense grid");
    anchor = dense.cell(anchor_y, anchor_x);
  }

  // Gray value = round((cos+1)/2 * 255) replicated over RGB; the anchor
  // cell is marked in red.
  std::vector<uint8_t> pixels(static_cast<size_t>(dense.h) * dense.w * 3);
  for (int y = 0; y < dense.h; ++y)
    for (int x = 0; x < dense.w; ++x) {
      double c = cosine(anchor, Vector(dense.cell(y, x)));
      auto v = static_cast<uint8_t>(std::lround((c + 1.0) / 2.0 * 255.0));
      size_t at = (static_cast<size_t>(y) * dense.w + x) * 3;
      pixels[at] = pixels[at + 1] = pixels[at + 2] = v;
    }
  if (!use_cls) {
    size_t at = (static_cast<size_t>(anchor_y) * dense.w + anchor_x) * 3;
    pixels[at] = 255;
    pixels[at + 1] = 0;
    pixels[at + 2] = 0;
  }
  write_png(out_path, pixels, dense.h, dense.w, 3);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

extern char** environ;

int main(int argc, char** argv) {
  char** envp = environ;
  CLI::App app{"desk-scale fine-grained vision-language training toolkit"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool seed_set = false;
  app.add_option("--config", config_file, "JSON config file")->capture_default_str();
  app.add_option("--set", overrides, "config override key=value (dotted path)");
  app.add_option("--seed", seed, "root random seed")->each([&](const std::string&) { seed_set = true; });

  auto resolve = [&]() {
    RunConfig rc = resolve_run_config(config_file, overrides, envp);
    if (seed_set) rc.resolved["seed"] = seed;
    return rc;
  };

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic labeled scene dataset");
  std::string synth_out = "data";
  int synth_n = 64;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--samples", synth_n, "number of images")->capture_default_str();
  int grid_rows = -1, grid_cols = -1, image_size = -1;
  double noise_sigma = -1;
  synth->add_option("--grid-rows", grid_rows, "scene grid rows");
  synth->add_option("--grid-cols", grid_cols, "scene grid cols");
  synth->add_option("--image-size", image_size, "image side length");
  synth->add_option("--noise-sigma", noise_sigma, "per-pixel gaussian noise");

  // build-dataset
  auto* build = app.add_subcommand("build-dataset", "ingest annotations and caption records");
  std::string build_ann, build_manifest, build_out = "dataset", build_captioner = "mock",
              build_kind = "both";
  int qa_n = 200;
  build->add_option("--annotations", build_ann, "COCO-style detection JSON");
  build->add_option("--manifest", build_manifest, "existing manifest JSONL");
  build->add_option("--out", build_out, "output directory")->required();
  build->add_option("--captioner", build_captioner, "captioner client: mock|fail")
      ->capture_default_str();
  build->add_option("--kind", build_kind, "caption kind: short|long|both")->capture_default_str();
  build->add_option("--qa-n", qa_n, "QA sample size")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  std::string train_data, train_out = "run", train_preset_name, train_stage, train_init,
              train_resume;
  bool train_long_captions = false;
  train->add_option("--data", train_data, "manifest JSONL")->required();
  train->add_option("--out", train_out, "run directory")->capture_default_str();
  train->add_option("--preset", train_preset_name, "paper-s1|paper-s2|toy-s1|toy-s2");
  train->add_option("--stage", train_stage, "s1|s2");
  train->add_option("--init-from", train_init, "initialize weights from checkpoint");
  train->add_option("--resume", train_resume, "resume an interrupted run from checkpoint");
  train->add_flag("--long-captions", train_long_captions, "train on long captions");

  // eval
  auto* eval = app.add_subcommand("eval", "compute metrics for a checkpoint");
  std::string eval_ckpt, eval_data, eval_metrics = "dbi,acc1,map", eval_classes, eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint JSON")->required();
  eval->add_option("--data", eval_data, "manifest JSONL")->required();
  eval->add_option("--metrics", eval_metrics, "comma list: dbi,acc1,map,miou,zsc,retrieval")
      ->capture_default_str();
  eval->add_option("--classes", eval_classes, "comma list of class names in id order");
  eval->add_option("--out", eval_out, "also write the report JSON here");

  // segment
  auto* seg = app.add_subcommand("segment", "open-vocabulary segmentation over a dataset");
  std::string seg_ckpt, seg_data, seg_classes, seg_out = "segmentation";
  seg->add_option("--checkpoint", seg_ckpt, "checkpoint JSON")->required();
  seg->add_option("--data", seg_data, "manifest JSONL")->required();
  seg->add_option("--classes", seg_classes, "comma list of class names in id order");
  seg->add_option("--out", seg_out, "output directory")->capture_default_str();

  // visualize
  auto* viz = app.add_subcommand("visualize", "cosine-similarity heatmap for an anchor");
  std::string viz_ckpt, viz_image, viz_out = "heatmap.png", viz_anchor;
  bool viz_cls = false;
  viz->add_option("--checkpoint", viz_ckpt, "checkpoint JSON")->required();
  viz->add_option("--image", viz_image, "input PNG")->required();
  viz->add_option("--anchor", viz_anchor, "anchor grid cell as x,y");
  viz->add_flag("--cls", viz_cls, "use the CLS embedding as the anchor");
  viz->add_option("--out", viz_out, "output PNG")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig rc = resolve();
    if (synth->parsed()) {
      if (grid_rows > 0) rc.resolved["data"]["grid_rows"] = grid_rows;
      if (grid_cols > 0) rc.resolved["data"]["grid_cols"] = grid_cols;
      if (image_size > 0) rc.resolved["data"]["image_size"] = image_size;
      if (noise_sigma >= 0) rc.resolved["data"]["noise_sigma"] = noise_sigma;
      return cmd_synth_data(rc, synth_out, synth_n);
    }
    if (build->parsed())
      return cmd_build_dataset(rc, build_ann, build_manifest, build_out, build_captioner,
                               build_kind, qa_n);
    if (train->parsed()) {
      if (!train_preset_name.empty())
        rc.resolved["train"] = train_config_to_json(train_preset(train_preset_name));
      for (const auto& kv : overrides) {  // CLI --set wins over --preset
        size_t eq = kv.find('=');
        set_config_path(rc.resolved, kv.substr(0, eq), kv.substr(eq + 1));
      }
      if (!train_stage.empty()) rc.resolved["train"]["stage"] = train_stage;
      return cmd_train(rc, train_data, train_out, train_init, train_resume, train_long_captions);
    }
    if (eval->parsed())
      return cmd_eval(rc, eval_ckpt, eval_data, eval_metrics, eval_classes, eval_out);
    if (seg->parsed()) return cmd_segment(rc, seg_ckpt, seg_data, seg_classes, seg_out);
    if (viz->parsed()) {
      int ax = -1, ay = -1;
      if (!viz_anchor.empty()) {
        if (std::sscanf(viz_anchor.c_str(), "%d,%d", &ax, &ay) != 2)
          throw std::runtime_error("--anchor must be x,y");
      }
      if (viz_cls == !viz_anchor.empty())
        throw std::runtime_error("visualize needs exactly one of --anchor x,y or --cls");
      return cmd_visualize(viz_ckpt, viz_image, viz_cls, ax, ay, viz_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
