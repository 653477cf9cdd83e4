#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "farslip/datamodel.hpp"
#include "farslip/rng.hpp"

namespace farslip {

enum class CaptionKind { short_caption, long_caption };

inline std::string to_string(CaptionKind k) {
  return k == CaptionKind::short_caption ? "short" : "long";
}

inline constexpr const char* kShortCaptionInstruction =
    "You are a remote sensing expert specialized in image interpretation and caption generation. "
    "You are provided with a remote sensing image and auxiliary data: a list of object bounding "
    "boxes in normalized (x1, y1, x2, y2) format (values between 0 and 1) and their corresponding "
    "category labels. Your task is to generate a concise and accurate caption that describes the "
    "image content, integrating both visual and object-level information. Follow these principles: "
    "(1) Generate a brief caption in two or three sentences that describes the image. "
    "(2) Focus on the types of objects present, their spatial distribution, and the relationships "
    "between them. "
    "(3) Do not include any metadata, annotations, or task instructions in the output — only "
    "output a natural-language caption.";

inline constexpr const char* kLongCaptionInstruction =
    "You are a remote sensing expert specialized in image interpretation and caption generation. "
    "You are provided with a remote sensing image and auxiliary data: a list of object bounding "
    "boxes in normalized (x1, y1, x2, y2) format (values between 0 and 1) and their corresponding "
    "category labels. Your task is to generate a detailed, accurate, and fluent caption that "
    "describes the image content, integrating both visual and object-level information. Follow "
    "these principles: "
    "(1) Detailed describe the image starting with a brief summary of the overall scene or "
    "environment. "
    "(2) If the number of objects is small, describe their attributes, approximate locations, and "
    "inter-object relationships. "
    "(3) If the number of objects is large, describe the object distribution, density, and "
    "spatial patterns. "
    "(4) Do not include any metadata, annotations, or task instructions in the output — only "
    "output a natural-language caption.";

struct CaptionPrompt {
  CaptionKind kind = CaptionKind::short_caption;
  std::string instruction;
  std::string object_infos;

  std::string full_text() const { return instruction + "\n\n" + object_infos; }
};

namespace detail {

inline std::string format_bbox3(const BBox& b) {
  char buf[80];
  std::snprintf(buf, sizeof(buf), "(%.3f, %.3f, %.3f, %.3f)", b.x1, b.y1, b.x2, b.y2);
  return buf;
}

}  // namespace detail

// Objects are serialized in annotation order; bbox values carry 3 decimals.
inline std::string serialize_object_infos(const std::vector<ObjectAnnotation>& objects) {
  if (objects.empty()) return "Object infos: none";
  std::ostringstream out;
  out << "Object infos: ";
  for (size_t i = 0; i < objects.size(); ++i) {
    if (i > 0) out << "; ";
    out << objects[i].category << ": " << detail::format_bbox3(objects[i].bbox);
  }
  return out.str();
}

// Inverse of serialize_object_infos for the parse-back check. Categories may
// contain any characters except the ": (" delimiter that starts a bbox.
inline std::vector<ObjectAnnotation> parse_object_infos(const std::string& text) {
  const std::string header = "Object infos: ";
  if (text.rfind(header, 0) != 0) throw std::invalid_argument("object infos: missing header");
  std::string body = text.substr(header.size());
  std::vector<ObjectAnnotation> out;
  if (body == "none") return out;
  size_t pos = 0;
  while (pos < body.size()) {
    size_t open = body.find(": (", pos);
    if (open == std::string::npos) throw std::invalid_argument("object infos: malformed entry");
    size_t close = body.find(')', open);
    if (close == std::string::npos) throw std::invalid_argument("object infos: unterminated bbox");
    ObjectAnnotation obj;
    obj.category = body.substr(pos, open - pos);
    std::string nums = body.substr(open + 3, close - (open + 3));
    for (char& c : nums)
      if (c == ',') c = ' ';
    std::istringstream in(nums);
    if (!(in >> obj.bbox.x1 >> obj.bbox.y1 >> obj.bbox.x2 >> obj.bbox.y2))
      throw std::invalid_argument("object infos: bad bbox numbers");
    out.push_back(std::move(obj));
    pos = close + 1;
    if (pos < body.size()) {
      if (body.compare(pos, 2, "; ") != 0)
        throw std::invalid_argument("object infos: bad separator");
      pos += 2;
    }
  }
  return out;
}

inline CaptionPrompt assemble_prompt(const ImageRecord& record, CaptionKind kind) {
  CaptionPrompt p;
  p.kind = kind;
  p.instruction =
      kind == CaptionKind::short_caption ? kShortCaptionInstruction : kLongCaptionInstruction;
  p.object_infos = serialize_object_infos(record.objects);
  return p;
}

// Client interface for the captioning model. generate throws on failure;
// recaption applies the retry budget.
class CaptionerClient {
 public:
  virtual ~CaptionerClient() = default;
  virtual std::string generate(const ImageRecord& record, const CaptionPrompt& prompt) = 0;
};

// Deterministic stand-in: echoes every category plus a seed-stable filler
// phrase, so containment and determinism are checkable without a real model.
class MockCaptioner : public CaptionerClient {
 public:
  explicit MockCaptioner(uint64_t seed = 0) : seed_(seed) {}

  std::string generate(const ImageRecord& record, const CaptionPrompt& prompt) override {
    static const char* fillers[] = {"captured from above", "under clear conditions",
                                    "in a wide aerial view", "with visible terrain detail"};
    Rng rng = Rng(seed_).split(record.image_id).split(to_string(prompt.kind));
    std::ostringstream out;
    out << (prompt.kind == CaptionKind::short_caption ? "A scene" : "A detailed scene");
    if (record.objects.empty()) {
      out << " with no annotated objects";
    } else {
      out << " showing";
      for (size_t i = 0; i < record.objects.size(); ++i) {
        if (i > 0) out << (i + 1 == record.objects.size() ? " and" : ",");
        out << " " << record.objects[i].category;
      }
    }
    out << ", " << fillers[rng.uniform_index(4)] << ".";
    return out.str();
  }

 private:
  uint64_t seed_;
};

class FailingCaptioner : public CaptionerClient {
 public:
  std::string generate(const ImageRecord&, const CaptionPrompt&) override {
    throw std::runtime_error("captioner unavailable");
  }
};

struct RecaptionResult {
  std::vector<ImageRecord> records;
  std::vector<std::string> flagged_ids;  // failed after retries; caption untouched
};

// max_attempts counts the first try plus retries. Records are keyed by
// image_id so the result does not depend on completion order.
inline RecaptionResult recaption(std::vector<ImageRecord> records, CaptionerClient& client,
                                 CaptionKind kind, int max_attempts = 3) {
  require(max_attempts >= 1, "recaption: max_attempts must be >= 1");
  RecaptionResult result;
  for (auto& rec : records) {
    CaptionPrompt prompt = assemble_prompt(rec, kind);
    bool ok = false;
    std::string caption;
    for (int attempt = 0; attempt < max_attempts && !ok; ++attempt) {
      try {
        caption = client.generate(rec, prompt);
        ok = true;
      } catch (const std::exception&) {
      }
    }
    if (ok) {
      if (kind == CaptionKind::short_caption)
        rec.caption_short = caption;
      else
        rec.caption_long = caption;
    } else {
      result.flagged_ids.push_back(rec.image_id);
    }
  }
  result.records = std::move(records);
  return result;
}

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace detail

struct QaSample {
  std::vector<ImageRecord> records;
  std::string review_csv;  // image_id,caption,verdict with verdict left blank
};

inline QaSample qa_sample(const std::vector<ImageRecord>& records, Rng& rng, size_t n = 200,
                          CaptionKind kind = CaptionKind::long_caption) {
  require(n <= records.size(), "qa_sample: n exceeds record count");
  std::vector<size_t> idx(records.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // partial Fisher-Yates: first n entries are a uniform sample without replacement
  for (size_t i = 0; i < n; ++i) {
    size_t j = i + static_cast<size_t>(rng.uniform_index(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  QaSample out;
  std::ostringstream csv;
  csv << "image_id,caption,verdict\n";
  for (size_t i = 0; i < n; ++i) {
    const ImageRecord& r = records[idx[i]];
    const std::string& cap = kind == CaptionKind::short_caption ? r.caption_short : r.caption_long;
    csv << detail::csv_escape(r.image_id) << "," << detail::csv_escape(cap) << ",\n";
    out.records.push_back(r);
  }
  out.review_csv = csv.str();
  return out;
}

// COCO-style detection JSON: images[{id, file_name, width, height}],
// annotations[{image_id, bbox:[x, y, w, h] in pixels, category_id}],
// categories[{id, name}]. Boxes are normalized to [0,1] and clamped;
// boxes degenerate after clamping are dropped with a rejection note.
inline LoadResult import_coco_detections(const nlohmann::json& j) {
  LoadResult result;
  std::map<int64_t, std::string> categories;
  for (const auto& c : j.at("categories"))
    categories[c.at("id").get<int64_t>()] = c.at("name").get<std::string>();

  struct Meta {
    std::string file_name;
    double width = 0, height = 0;
  };
  std::map<int64_t, Meta> images;
  std::vector<int64_t> image_order;
  for (const auto& im : j.at("images")) {
    int64_t id = im.at("id").get<int64_t>();
    images[id] = {im.at("file_name").get<std::string>(), im.at("width").get<double>(),
                  im.at("height").get<double>()};
    image_order.push_back(id);
  }

  std::map<int64_t, std::vector<ObjectAnnotation>> per_image;
  size_t ann_index = 0;
  for (const auto& a : j.at("annotations")) {
    ++ann_index;
    int64_t image_id = a.at("image_id").get<int64_t>();
    auto im = images.find(image_id);
    if (im == images.end()) {
      result.rejections.push_back(
          {static_cast<int>(ann_index), "annotation#" + std::to_string(ann_index),
           "unknown image_id"});
      continue;
    }
    auto cat = categories.find(a.at("category_id").get<int64_t>());
    if (cat == categories.end()) {
      result.rejections.push_back(
          {static_cast<int>(ann_index), "annotation#" + std::to_string(ann_index),
           "unknown category_id"});
      continue;
    }
    const auto& bb = a.at("bbox");
    double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
    double w = bb.at(2).get<double>(), h = bb.at(3).get<double>();
    ObjectAnnotation obj;
    obj.category = cat->second;
    obj.bbox.x1 = std::clamp(x / im->second.width, 0.0, 1.0);
    obj.bbox.y1 = std::clamp(y / im->second.height, 0.0, 1.0);
    obj.bbox.x2 = std::clamp((x + w) / im->second.width, 0.0, 1.0);
    obj.bbox.y2 = std::clamp((y + h) / im->second.height, 0.0, 1.0);
    if (!obj.bbox.valid()) {
      result.rejections.push_back(
          {static_cast<int>(ann_index), "annotation#" + std::to_string(ann_index),
           "degenerate bbox after normalization"});
      continue;
    }
    per_image[image_id].push_back(std::move(obj));
  }

  for (int64_t id : image_order) {
    ImageRecord rec;
    rec.image_id = "coco_" + std::to_string(id);
    rec.image_path = images[id].file_name;
    auto it = per_image.find(id);
    if (it != per_image.end()) rec.objects = std::move(it->second);
    result.records.push_back(std::move(rec));
  }
  return result;
}

}  // namespace farslip
