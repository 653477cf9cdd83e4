#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "farslip/autodiff.hpp"
#include "farslip/datamodel.hpp"
#include "farslip/encoders.hpp"
#include "farslip/tensor.hpp"

namespace farslip {

enum class RegionMode { cls_of_crop, pooled_patches_of_crop, roi_embedding };

inline const char* to_string(RegionMode m) {
  switch (m) {
    case RegionMode::cls_of_crop: return "cls_of_crop";
    case RegionMode::pooled_patches_of_crop: return "pooled_patches_of_crop";
    case RegionMode::roi_embedding: return "roi_embedding";
  }
  return "?";
}

inline RegionMode region_mode_from_string(const std::string& s) {
  if (s == "cls_of_crop") return RegionMode::cls_of_crop;
  if (s == "pooled_patches_of_crop") return RegionMode::pooled_patches_of_crop;
  if (s == "roi_embedding") return RegionMode::roi_embedding;
  throw std::invalid_argument("unknown region mode: " + s);
}

struct RegionFeature {
  Vector vector;
  RegionMode mode = RegionMode::cls_of_crop;
  BBox source;
};

namespace detail {

// Bilinear interpolation weights at a continuous grid coordinate, with
// border clamping. Cell (y, x) centers sit at integer coordinates.
inline void bilinear_taps(double cy, double cx, int h, int w, std::vector<std::pair<int, double>>& taps) {
  cy = std::clamp(cy, 0.0, static_cast<double>(h - 1));
  cx = std::clamp(cx, 0.0, static_cast<double>(w - 1));
  int y0 = static_cast<int>(std::floor(cy));
  int x0 = static_cast<int>(std::floor(cx));
  int y1 = std::min(y0 + 1, h - 1);
  int x1 = std::min(x0 + 1, w - 1);
  double fy = cy - y0;
  double fx = cx - x0;
  taps.emplace_back(y0 * w + x0, (1 - fy) * (1 - fx));
  taps.emplace_back(y0 * w + x1, (1 - fy) * fx);
  taps.emplace_back(y1 * w + x0, fy * (1 - fx));
  taps.emplace_back(y1 * w + x1, fy * fx);
}

}  // namespace detail

// Sampling matrix of shape (oh*ow) x (h*w): one bilinear sample per
// output cell, taken at the cell center within the bbox extent,
// half-pixel aligned (cell centers at (i+0.5)/n in normalized coords).
inline Matrix roi_align_matrix(int h, int w, const BBox& bbox, int oh, int ow) {
  require(bbox.valid(), "roi_align: invalid bbox");
  require(oh >= 1 && ow >= 1, "roi_align: output size must be >= 1");
  Matrix weights = Matrix::Zero(oh * ow, h * w);
  std::vector<std::pair<int, double>> taps;
  for (int iy = 0; iy < oh; ++iy) {
    for (int ix = 0; ix < ow; ++ix) {
      double ny = bbox.y1 + (iy + 0.5) * (bbox.y2 - bbox.y1) / oh;
      double nx = bbox.x1 + (ix + 0.5) * (bbox.x2 - bbox.x1) / ow;
      taps.clear();
      detail::bilinear_taps(ny * h - 0.5, nx * w - 0.5, h, w, taps);
      for (const auto& [idx, wgt] : taps) weights(iy * ow + ix, idx) += wgt;
    }
  }
  return weights;
}

inline PatchGrid roi_align(const PatchGrid& patches, const BBox& bbox, int oh, int ow) {
  PatchGrid out(oh, ow, patches.dim());
  out.features = roi_align_matrix(patches.h, patches.w, bbox, oh, ow) * patches.features;
  return out;
}

// Output resolution matching the number of grid cells the bbox spans, so
// that a full-image box samples exactly at the patch centers and a
// single-cell box hits that cell's center.
inline std::pair<int, int> native_roi_resolution(int h, int w, const BBox& bbox) {
  int oh = std::max(1, static_cast<int>(std::lround((bbox.y2 - bbox.y1) * h)));
  int ow = std::max(1, static_cast<int>(std::lround((bbox.x2 - bbox.x1) * w)));
  return {oh, ow};
}

// d-vector region embedding: mean of the native-resolution RoIAlign cells.
inline RegionFeature roi_embedding(const PatchGrid& patches, const BBox& bbox) {
  auto [oh, ow] = native_roi_resolution(patches.h, patches.w, bbox);
  PatchGrid aligned = roi_align(patches, bbox, oh, ow);
  RegionFeature f;
  f.vector = aligned.features.colwise().mean().transpose();
  f.mode = RegionMode::roi_embedding;
  f.source = bbox;
  return f;
}

// Differentiable variant: the pooled RoI row as a 1 x d Var.
inline ad::Var roi_embedding_var(ad::Tape& tape, ad::Var patches, int h, int w, const BBox& bbox) {
  auto [oh, ow] = native_roi_resolution(h, w, bbox);
  Matrix pool = roi_align_matrix(h, w, bbox, oh, ow).colwise().mean();
  return ad::matmul(tape.constant(pool), patches);
}

// --- image cropping ----------------------------------------------------------

// Pixel crop resized to (out_h, out_w) with bilinear sampling.
inline Image crop_image(const Image& image, const BBox& bbox, int out_h, int out_w) {
  require(bbox.valid(), "crop_image: invalid bbox");
  double crop_w = (bbox.x2 - bbox.x1) * image.width;
  double crop_h = (bbox.y2 - bbox.y1) * image.height;
  require(crop_w >= 2.0 && crop_h >= 2.0, "crop_image: crop smaller than 2x2 px");
  Image out(out_h, out_w, image.channels);
  std::vector<std::pair<int, double>> taps;
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      double ny = bbox.y1 + (y + 0.5) * (bbox.y2 - bbox.y1) / out_h;
      double nx = bbox.x1 + (x + 0.5) * (bbox.x2 - bbox.x1) / out_w;
      taps.clear();
      detail::bilinear_taps(ny * image.height - 0.5, nx * image.width - 0.5, image.height, image.width, taps);
      for (int c = 0; c < image.channels; ++c) {
        double v = 0;
        for (const auto& [idx, wgt] : taps) v += wgt * image.data[static_cast<size_t>(idx) * image.channels + c];
        out.at(y, x, c) = v;
      }
    }
  }
  return out;
}

// --- crop planning ----------------------------------------------------------

enum class CropMethod { random, grid };

inline const char* to_string(CropMethod m) { return m == CropMethod::random ? "random" : "grid"; }

inline CropMethod crop_method_from_string(const std::string& s) {
  if (s == "random") return CropMethod::random;
  if (s == "grid") return CropMethod::grid;
  throw std::invalid_argument("unknown crop method: " + s);
}

struct CropPlan {
  std::vector<BBox> boxes;
  CropMethod method = CropMethod::random;
  uint64_t seed = 0;
  double scale_min = 0.2;
  double scale_max = 0.8;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json boxes_j = nlohmann::ordered_json::array();
    for (const auto& b : boxes) boxes_j.push_back({b.x1, b.y1, b.x2, b.y2});
    return {{"method", to_string(method)},
            {"seed", seed},
            {"scale_range", {scale_min, scale_max}},
            {"boxes", boxes_j}};
  }
};

// random: area fraction uniform in scale_range, aspect in [3/4, 4/3]
// (re-drawn until the box fits so the area marginal stays uniform),
// position uniform. grid: the g x g regular partition, m = g^2.
inline CropPlan plan_crops(CropMethod method, int m, Rng& rng, double scale_min = 0.2, double scale_max = 0.8) {
  require(m >= 1, "plan_crops: m must be >= 1");
  CropPlan plan;
  plan.method = method;
  plan.seed = rng.key();
  plan.scale_min = scale_min;
  plan.scale_max = scale_max;
  if (method == CropMethod::grid) {
    int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(m))));
    require(g * g == m, "plan_crops: grid method requires a perfect-square m");
    for (int i = 0; i < g; ++i)
      for (int j = 0; j < g; ++j)
        plan.boxes.push_back({static_cast<double>(j) / g, static_cast<double>(i) / g,
                              static_cast<double>(j + 1) / g, static_cast<double>(i + 1) / g});
    return plan;
  }
  for (int i = 0; i < m; ++i) {
    double area = rng.uniform(scale_min, scale_max);
    double wf, hf;
    do {
      double aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0);
      wf = std::sqrt(area * aspect);
      hf = std::sqrt(area / aspect);
    } while (wf > 1.0 || hf > 1.0);
    double x1 = rng.uniform(0.0, 1.0 - wf);
    double y1 = rng.uniform(0.0, 1.0 - hf);
    plan.boxes.push_back({x1, y1, x1 + wf, y1 + hf});
  }
  return plan;
}

// --- region features -----------------------------------------------------------

// The three region-embedding variants compared for region-category CL.
inline RegionFeature region_feature(const Image& image, const PatchGrid* patches, const BBox& bbox,
                                    RegionMode mode, const VisionEncoder& encoder) {
  RegionFeature f;
  f.mode = mode;
  f.source = bbox;
  switch (mode) {
    case RegionMode::cls_of_crop: {
      Image crop = crop_image(image, bbox, encoder.config().image_size, encoder.config().image_size);
      f.vector = encoder.encode(crop).cls;
      break;
    }
    case RegionMode::pooled_patches_of_crop: {
      Image crop = crop_image(image, bbox, encoder.config().image_size, encoder.config().image_size);
      f.vector = encoder.encode(crop).patches.features.colwise().mean().transpose();
      break;
    }
    case RegionMode::roi_embedding: {
      require(patches != nullptr, "region_feature: roi_embedding mode needs the full-image patch grid");
      f.vector = roi_embedding(*patches, bbox).vector;
      break;
    }
  }
  return f;
}

}  // namespace farslip
