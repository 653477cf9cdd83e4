#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "farslip/rng.hpp"
#include "farslip/tensor.hpp"

namespace farslip {

using json = nlohmann::ordered_json;

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const { return 0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0; }
  double area() const { return (x2 - x1) * (y2 - y1); }
};

struct ObjectAnnotation {
  BBox bbox;
  std::string category;
};

struct ImageRecord {
  std::string image_id;
  std::string image_path;
  std::string caption_short;
  std::string caption_long;
  std::vector<ObjectAnnotation> objects;
  Image image;  // may be empty when loaded lazily
};

struct GlobalBatch {
  std::vector<Image> images;
  std::vector<std::string> captions;

  int size() const { return static_cast<int>(images.size()); }
};

struct RegionEntry {
  int image_index = 0;  // into the source record list / batch
  BBox bbox;
  std::string category;
};

struct RegionBatch {
  std::vector<RegionEntry> entries;
  std::vector<std::string> category_texts;

  int size() const { return static_cast<int>(entries.size()); }
};

// --- manifest I/O (JSON-Lines) ----------------------------------------

struct ManifestRejection {
  int line = 0;
  std::string image_id;
  std::string reason;
};

struct LoadResult {
  std::vector<ImageRecord> records;
  std::vector<ManifestRejection> rejections;
};

namespace detail {

inline std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}

inline std::optional<std::string> validate_record(const ImageRecord& r) {
  if (r.image_id.empty()) return "empty image_id";
  for (const auto& obj : r.objects) {
    if (obj.category.empty()) return "empty category";
    if (!obj.bbox.valid()) {
      if (obj.bbox.x1 >= obj.bbox.x2 || obj.bbox.y1 >= obj.bbox.y2) return "degenerate bbox";
      return "bbox out of [0,1]";
    }
  }
  return std::nullopt;
}

}  // namespace detail

inline json record_to_json(const ImageRecord& r) {
  json objs = json::array();
  for (const auto& obj : r.objects) {
    // Coordinates go through a fixed 9-decimal rendering so the file is
    // byte-stable under re-serialization.
    objs.push_back({{"bbox",
                     {json::parse(detail::format_coord(obj.bbox.x1)), json::parse(detail::format_coord(obj.bbox.y1)),
                      json::parse(detail::format_coord(obj.bbox.x2)), json::parse(detail::format_coord(obj.bbox.y2))}},
                    {"category", obj.category}});
  }
  return json{{"image_id", r.image_id},
              {"image_path", r.image_path},
              {"caption_short", r.caption_short},
              {"caption_long", r.caption_long},
              {"objects", objs}};
}

inline ImageRecord record_from_json(const json& j) {
  ImageRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.image_path = j.at("image_path").get<std::string>();
  r.caption_short = j.at("caption_short").get<std::string>();
  r.caption_long = j.at("caption_long").get<std::string>();
  for (const auto& o : j.at("objects")) {
    ObjectAnnotation obj;
    const auto& b = o.at("bbox");
    obj.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
    obj.category = o.at("category").get<std::string>();
    r.objects.push_back(std::move(obj));
  }
  return r;
}

// Loads a JSON-Lines manifest. Records violating invariants are rejected
// with a reason; a syntactically broken line is a hard error carrying the
// line number.
inline LoadResult load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
  LoadResult result;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_manifest: malformed line " + std::to_string(lineno) + ": " + e.what());
    }
    ImageRecord r;
    try {
      r = record_from_json(j);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_manifest: malformed line " + std::to_string(lineno) + ": " + e.what());
    }
    if (auto reason = detail::validate_record(r)) {
      result.rejections.push_back({lineno, r.image_id, *reason});
      continue;
    }
    result.records.push_back(std::move(r));
  }
  return result;
}

inline void save_manifest(const std::vector<ImageRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_manifest: cannot open " + path);
  for (const auto& r : records) {
    if (auto reason = detail::validate_record(r))
      throw std::invalid_argument("save_manifest: invalid record " + r.image_id + ": " + *reason);
    out << record_to_json(r).dump() << "\n";
  }
  if (!out) throw std::runtime_error("save_manifest: write failed for " + path);
}

// --- category templating -----------------------------------------------

inline std::string template_category(const std::string& category, const std::string& tmpl) {
  size_t pos = tmpl.find("{}");
  if (pos == std::string::npos) throw std::invalid_argument("template_category: template lacks {} placeholder");
  if (tmpl.find("{}", pos + 2) != std::string::npos)
    throw std::invalid_argument("template_category: template has multiple placeholders");
  return tmpl.substr(0, pos) + category + tmpl.substr(pos + 2);
}

inline constexpr const char* kDefaultCategoryTemplate = "a satellite image of {}";

// --- synthetic scenes ----------------------------------------------------

struct SyntheticSceneSpec {
  int grid_rows = 2;
  int grid_cols = 2;
  int image_size = 32;
  double noise_sigma = 0.0;
  uint64_t seed = 0;
  bool shuffle_layout = true;  // permute class-to-cell assignment per image

  int num_classes() const { return grid_rows * grid_cols; }
};

struct SyntheticClass {
  std::string name;
  double r, g, b;
};

// Named land-cover prototypes; K above the palette size is an error.
inline const std::vector<SyntheticClass>& synthetic_palette() {
  static const std::vector<SyntheticClass> palette = {
      {"water", 0.10, 0.25, 0.85},    {"forest", 0.05, 0.55, 0.10}, {"urban", 0.60, 0.60, 0.62},
      {"farmland", 0.85, 0.75, 0.25}, {"desert", 0.90, 0.80, 0.55}, {"mountain", 0.45, 0.35, 0.25},
      {"grassland", 0.40, 0.80, 0.30}, {"beach", 0.95, 0.90, 0.70},
  };
  return palette;
}

struct SyntheticSample {
  ImageRecord record;
  Mask mask;  // class id per pixel, indices into the palette
};

inline std::vector<SyntheticSample> synthesize_dataset(const SyntheticSceneSpec& spec, int n) {
  require(spec.grid_rows >= 1 && spec.grid_cols >= 1, "synthesize_dataset: bad grid");
  require(spec.image_size >= spec.grid_rows && spec.image_size >= spec.grid_cols, "synthesize_dataset: image too small");
  const auto& palette = synthetic_palette();
  const int k = spec.num_classes();
  require(k <= static_cast<int>(palette.size()), "synthesize_dataset: K exceeds palette size");

  std::vector<SyntheticSample> samples;
  Rng root(spec.seed);
  for (int idx = 0; idx < n; ++idx) {
    Rng rng = root.split("sample" + std::to_string(idx));
    SyntheticSample s;
    s.record.image_id = "synth_" + std::to_string(idx);
    s.record.image = Image(spec.image_size, spec.image_size, 3);
    s.mask = Mask(spec.image_size, spec.image_size);

    std::vector<int> cell_class(k);
    for (int i = 0; i < k; ++i) cell_class[i] = i;
    if (spec.shuffle_layout) {
      for (int i = k - 1; i > 0; --i)
        std::swap(cell_class[i], cell_class[rng.uniform_index(static_cast<uint64_t>(i) + 1)]);
    }

    std::vector<std::string> present;
    for (int cy = 0; cy < spec.grid_rows; ++cy) {
      for (int cx = 0; cx < spec.grid_cols; ++cx) {
        int cls = cell_class[cy * spec.grid_cols + cx];
        const auto& proto = palette[cls];
        int y0 = cy * spec.image_size / spec.grid_rows;
        int y1 = (cy + 1) * spec.image_size / spec.grid_rows;
        int x0 = cx * spec.image_size / spec.grid_cols;
        int x1 = (cx + 1) * spec.image_size / spec.grid_cols;
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) {
            double base[3] = {proto.r, proto.g, proto.b};
            for (int c = 0; c < 3; ++c) {
              double v = base[c] + spec.noise_sigma * rng.normal();
              s.record.image.at(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
            s.mask.at(y, x) = cls;
          }
        }
        ObjectAnnotation obj;
        obj.bbox = {static_cast<double>(x0) / spec.image_size, static_cast<double>(y0) / spec.image_size,
                    static_cast<double>(x1) / spec.image_size, static_cast<double>(y1) / spec.image_size};
        obj.category = proto.name;
        s.record.objects.push_back(std::move(obj));
        present.push_back(proto.name);
      }
    }

    std::ostringstream cap;
    cap << "a satellite image showing ";
    for (size_t i = 0; i < present.size(); ++i) {
      if (i > 0) cap << (i + 1 == present.size() ? " and " : ", ");
      cap << present[i];
    }
    s.record.caption_short = cap.str();
    std::ostringstream capl;
    capl << "an aerial scene divided into " << k << " regions";
    for (size_t i = 0; i < present.size(); ++i) capl << "; region " << (i + 1) << " is " << present[i];
    s.record.caption_long = capl.str();
    samples.push_back(std::move(s));
  }
  return samples;
}

// --- region batch assembly ------------------------------------------------

// Samples M region-category entries uniformly over all objects, with
// replacement. Positive sets follow from category equality.
inline RegionBatch build_region_batch(const std::vector<ImageRecord>& records, int m, Rng& rng,
                                      const std::string& category_template = kDefaultCategoryTemplate) {
  std::vector<std::pair<int, const ObjectAnnotation*>> pool;
  for (size_t i = 0; i < records.size(); ++i)
    for (const auto& obj : records[i].objects) pool.emplace_back(static_cast<int>(i), &obj);
  require(!pool.empty(), "build_region_batch: no objects in any record");
  require(m >= 1, "build_region_batch: m must be >= 1");

  RegionBatch batch;
  for (int i = 0; i < m; ++i) {
    const auto& [img_idx, obj] = pool[rng.uniform_index(pool.size())];
    batch.entries.push_back({img_idx, obj->bbox, obj->category});
    batch.category_texts.push_back(template_category(obj->category, category_template));
  }
  return batch;
}

// P(i) = { j : category_j == category_i }; i is always its own positive.
inline std::vector<std::vector<int>> positive_sets(const std::vector<std::string>& categories) {
  const int m = static_cast<int>(categories.size());
  std::vector<std::vector<int>> p(m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (categories[i] == categories[j]) p[i].push_back(j);
  return p;
}

}  // namespace farslip
