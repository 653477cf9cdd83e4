#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "farslip/rng.hpp"
#include "farslip/tensor.hpp"

namespace farslip {

// --- mask/grid reconciliation ------------------------------------------------

// Majority vote per patch cell; ties resolved toward the smaller class id.
inline Mask downsample_mask(const Mask& mask, int grid_h, int grid_w) {
  Mask out(grid_h, grid_w);
  for (int gy = 0; gy < grid_h; ++gy) {
    for (int gx = 0; gx < grid_w; ++gx) {
      int y0 = gy * mask.height / grid_h, y1 = (gy + 1) * mask.height / grid_h;
      int x0 = gx * mask.width / grid_w, x1 = (gx + 1) * mask.width / grid_w;
      std::map<int, int> counts;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) counts[mask.at(y, x)]++;
      int best = -1, best_count = -1;
      for (const auto& [cls, cnt] : counts)
        if (cnt > best_count) best = cls, best_count = cnt;
      out.at(gy, gx) = best;
    }
  }
  return out;
}

inline Mask upsample_mask_nearest(const Mask& mask, int out_h, int out_w) {
  Mask out(out_h, out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) out.at(y, x) = mask.at(y * mask.height / out_h, x * mask.width / out_w);
  return out;
}

// --- instance feature pooling ------------------------------------------------

struct InstanceFeatureSet {
  std::vector<std::string> categories;          // retained categories, in order
  std::vector<std::vector<Vector>> features;    // per retained category
  int sample_cap = 256;
};

struct PooledInstance {
  std::string category;
  Vector feature;
};

// Mean of dense cells whose (downsampled) ground-truth label matches;
// one instance per (image, category) occurrence.
inline std::vector<PooledInstance> mask_pool_image(const PatchGrid& dense, const Mask& gt_mask,
                                                   const std::vector<std::string>& category_names) {
  Mask grid_mask = downsample_mask(gt_mask, dense.h, dense.w);
  std::map<int, std::pair<Vector, int>> sums;
  for (int y = 0; y < dense.h; ++y)
    for (int x = 0; x < dense.w; ++x) {
      int cls = grid_mask.at(y, x);
      auto [it, fresh] = sums.try_emplace(cls, Vector::Zero(dense.dim()), 0);
      it->second.first += dense.cell(y, x).transpose();
      it->second.second += 1;
    }
  std::vector<PooledInstance> out;
  for (const auto& [cls, sum_count] : sums) {
    if (cls < 0 || cls >= static_cast<int>(category_names.size())) continue;  // unlabeled, skipped
    out.push_back({category_names[cls], sum_count.first / sum_count.second});
  }
  return out;
}

// Keeps only categories with more than sample_cap instances and samples
// exactly sample_cap of each (without replacement).
inline InstanceFeatureSet mask_pool_instances(const std::vector<PatchGrid>& dense_per_image,
                                              const std::vector<Mask>& gt_masks,
                                              const std::vector<std::string>& category_names, int sample_cap,
                                              Rng& rng) {
  require(dense_per_image.size() == gt_masks.size(), "mask_pool_instances: image/mask count mismatch");
  std::map<std::string, std::vector<Vector>> by_category;
  for (size_t i = 0; i < dense_per_image.size(); ++i)
    for (auto& inst : mask_pool_image(dense_per_image[i], gt_masks[i], category_names))
      by_category[inst.category].push_back(std::move(inst.feature));

  InstanceFeatureSet set;
  set.sample_cap = sample_cap;
  for (auto& [category, vectors] : by_category) {
    if (static_cast<int>(vectors.size()) <= sample_cap) continue;
    // partial Fisher-Yates for a uniform subset
    for (int i = 0; i < sample_cap; ++i) {
      size_t j = i + rng.uniform_index(vectors.size() - i);
      std::swap(vectors[i], vectors[j]);
    }
    vectors.resize(sample_cap);
    set.categories.push_back(category);
    set.features.push_back(std::move(vectors));
  }
  return set;
}

// --- Davies-Bouldin index ------------------------------------------------------

// DBI = (1/K) sum_i max_{j != i} (S_i + S_j) / M_ij with S the mean
// Euclidean distance to the class centroid and M the centroid distance.
// Lower means more discriminable features.
inline double dbi(const std::vector<std::vector<Vector>>& clusters,
                  const std::vector<std::string>* names = nullptr) {
  const int k = static_cast<int>(clusters.size());
  require(k >= 2, "dbi: need at least 2 categories");
  std::vector<Vector> centroids(k);
  std::vector<double> scatter(k);
  for (int i = 0; i < k; ++i) {
    require(!clusters[i].empty(), "dbi: empty cluster");
    Vector c = Vector::Zero(clusters[i][0].size());
    for (const auto& v : clusters[i]) c += v;
    c /= static_cast<double>(clusters[i].size());
    double s = 0;
    for (const auto& v : clusters[i]) s += (v - c).norm();
    centroids[i] = std::move(c);
    scatter[i] = s / static_cast<double>(clusters[i].size());
  }
  double total = 0;
  for (int i = 0; i < k; ++i) {
    double worst = 0;
    for (int j = 0; j < k; ++j) {
      if (j == i) continue;
      double m = (centroids[i] - centroids[j]).norm();
      if (m <= 0) {
        std::string a = names ? (*names)[i] : std::to_string(i);
        std::string b = names ? (*names)[j] : std::to_string(j);
        throw std::invalid_argument("dbi: coincident centroids for categories " + a + " and " + b);
      }
      worst = std::max(worst, (scatter[i] + scatter[j]) / m);
    }
    total += worst;
  }
  return total / k;
}

inline double dbi(const InstanceFeatureSet& set) { return dbi(set.features, &set.categories); }

// --- region-text alignment -------------------------------------------------

inline double cosine(const Vector& a, const Vector& b) {
  double na = a.norm(), nb = b.norm();
  require(na > 1e-12 && nb > 1e-12, "cosine: zero vector");
  return a.dot(b) / (na * nb);
}

// Zero-shot instance classification: fraction of pooled instances whose
// argmax-cosine category matches; ties break toward the first index.
inline double region_text_acc1(const InstanceFeatureSet& set, const std::map<std::string, Vector>& text_embeddings) {
  const int k = static_cast<int>(set.categories.size());
  require(k >= 2, "region_text_acc1: need at least 2 retained categories");
  std::vector<const Vector*> texts(k);
  for (int i = 0; i < k; ++i) {
    auto it = text_embeddings.find(set.categories[i]);
    require(it != text_embeddings.end(), "region_text_acc1: missing text embedding for " + set.categories[i]);
    texts[i] = &it->second;
  }
  int correct = 0, total = 0;
  for (int c = 0; c < k; ++c) {
    for (const auto& f : set.features[c]) {
      int best = 0;
      double best_sim = cosine(f, *texts[0]);
      for (int j = 1; j < k; ++j) {
        double s = cosine(f, *texts[j]);
        if (s > best_sim) best_sim = s, best = j;
      }
      correct += (best == c);
      ++total;
    }
  }
  return static_cast<double>(correct) / total;
}

// --- average precision / semantic coherence ----------------------------------

// All-points AP: precision envelope integrated over recall, ties broken
// by stable sort on the original index.
inline double average_precision(const std::vector<double>& scores, const std::vector<bool>& labels) {
  require(scores.size() == labels.size() && !scores.empty(), "average_precision: size mismatch");
  int positives = static_cast<int>(std::count(labels.begin(), labels.end(), true));
  require(positives > 0, "average_precision: no positive pairs");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });

  const int n = static_cast<int>(order.size());
  std::vector<double> precision(n);
  int tp = 0;
  for (int r = 0; r < n; ++r) {
    tp += labels[order[r]] ? 1 : 0;
    precision[r] = static_cast<double>(tp) / (r + 1);
  }
  // envelope: max precision at or beyond each rank
  for (int r = n - 2; r >= 0; --r) precision[r] = std::max(precision[r], precision[r + 1]);
  double ap = 0;
  for (int r = 0; r < n; ++r)
    if (labels[order[r]]) ap += precision[r];
  return ap / positives;
}

struct PixelPair {
  int cell_a = 0, cell_b = 0;
  bool same_class = false;
  double similarity = 0;
};

inline std::vector<PixelPair> sample_pixel_pairs(const PatchGrid& dense, const Mask& gt_mask, int n_pairs,
                                                 Rng& rng) {
  Mask grid_mask = downsample_mask(gt_mask, dense.h, dense.w);
  const int cells = dense.h * dense.w;
  require(cells >= 2, "sample_pixel_pairs: fewer than 2 labeled cells");
  std::vector<PixelPair> pairs;
  pairs.reserve(n_pairs);
  for (int i = 0; i < n_pairs; ++i) {
    int a = static_cast<int>(rng.uniform_index(cells));
    int b = static_cast<int>(rng.uniform_index(cells - 1));
    if (b >= a) ++b;  // distinct cells
    PixelPair p;
    p.cell_a = a;
    p.cell_b = b;
    p.same_class = grid_mask.labels[a] == grid_mask.labels[b];
    p.similarity = cosine(dense.features.row(a).transpose(), dense.features.row(b).transpose());
    pairs.push_back(p);
  }
  return pairs;
}

enum class CoherenceMode { per_image_mean, pooled };

// Semantic-coherence mAP: rank sampled pixel-pair similarities against
// the same-class labels. Default averages per-image APs; pooled ranks
// all pairs jointly.
inline double coherence_map(const std::vector<PatchGrid>& dense_per_image, const std::vector<Mask>& gt_masks,
                            int n_pairs, Rng& rng, CoherenceMode mode = CoherenceMode::per_image_mean) {
  require(dense_per_image.size() == gt_masks.size(), "coherence_map: image/mask count mismatch");
  require(n_pairs >= 2, "coherence_map: n_pairs must be >= 2");
  std::vector<double> pooled_scores;
  std::vector<bool> pooled_labels;
  std::vector<double> per_image;
  for (size_t i = 0; i < dense_per_image.size(); ++i) {
    if (dense_per_image[i].h * dense_per_image[i].w < 2) continue;  // skip, too few labeled cells
    auto pairs = sample_pixel_pairs(dense_per_image[i], gt_masks[i], n_pairs, rng);
    std::vector<double> scores;
    std::vector<bool> labels;
    bool has_pos = false, has_neg = false;
    for (const auto& p : pairs) {
      scores.push_back(p.similarity);
      labels.push_back(p.same_class);
      has_pos |= p.same_class;
      has_neg |= !p.same_class;
      pooled_scores.push_back(p.similarity);
      pooled_labels.push_back(p.same_class);
    }
    if (mode == CoherenceMode::per_image_mean && has_pos)
      per_image.push_back(average_precision(scores, labels));
    (void)has_neg;
  }
  if (mode == CoherenceMode::pooled) return average_precision(pooled_scores, pooled_labels);
  require(!per_image.empty(), "coherence_map: no image produced an AP");
  return std::accumulate(per_image.begin(), per_image.end(), 0.0) / per_image.size();
}

// --- OVSS ---------------------------------------------------------------

struct SegmentationResult {
  Mask prediction;  // at mask resolution
  Mask grid_prediction;
  double miou = 0;
};

inline double mean_iou(const Mask& prediction, const Mask& gt, int num_classes) {
  require(prediction.height == gt.height && prediction.width == gt.width, "mean_iou: size mismatch");
  std::vector<long> inter(num_classes, 0), uni(num_classes, 0);
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    int p = prediction.labels[i], g = gt.labels[i];
    if (g >= 0 && g < num_classes) {
      if (p == g)
        inter[g]++;
      else
        uni[g]++;
    }
    if (p >= 0 && p < num_classes && p != g) uni[p]++;
  }
  double total = 0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    long u = uni[c] + inter[c];
    if (u == 0) continue;  // absent from both gt and prediction
    total += static_cast<double>(inter[c]) / u;
    ++present;
  }
  require(present > 0, "mean_iou: no class present");
  return total / present;
}

// Per-cell argmax over cosine logits against the class queries, upsampled
// nearest to the ground-truth resolution.
inline SegmentationResult ovss_segment(const PatchGrid& dense, const std::vector<Vector>& class_embeddings,
                                       const Mask& gt_mask) {
  require(!class_embeddings.empty(), "ovss_segment: zero text embeddings");
  SegmentationResult result;
  result.grid_prediction = Mask(dense.h, dense.w);
  for (int y = 0; y < dense.h; ++y)
    for (int x = 0; x < dense.w; ++x) {
      Vector f = dense.cell(y, x).transpose();
      int best = 0;
      double best_sim = cosine(f, class_embeddings[0]);
      for (size_t c = 1; c < class_embeddings.size(); ++c) {
        double s = cosine(f, class_embeddings[c]);
        if (s > best_sim) best_sim = s, best = static_cast<int>(c);
      }
      result.grid_prediction.at(y, x) = best;
    }
  result.prediction = upsample_mask_nearest(result.grid_prediction, gt_mask.height, gt_mask.width);
  result.miou = mean_iou(result.prediction, gt_mask, static_cast<int>(class_embeddings.size()));
  return result;
}

// --- global task metrics ---------------------------------------------------

inline double zsc_top1(const std::vector<Vector>& image_embeddings, const std::vector<int>& labels,
                       const std::vector<Vector>& class_embeddings) {
  require(image_embeddings.size() == labels.size() && !image_embeddings.empty(), "zsc_top1: size mismatch");
  int correct = 0;
  for (size_t i = 0; i < image_embeddings.size(); ++i) {
    int best = 0;
    double best_sim = cosine(image_embeddings[i], class_embeddings[0]);
    for (size_t c = 1; c < class_embeddings.size(); ++c) {
      double s = cosine(image_embeddings[i], class_embeddings[c]);
      if (s > best_sim) best_sim = s, best = static_cast<int>(c);
    }
    correct += (best == labels[i]);
  }
  return static_cast<double>(correct) / image_embeddings.size();
}

struct RecallReport {
  std::map<int, double> image_to_text;
  std::map<int, double> text_to_image;
  std::map<int, double> mean;
};

// recall@k under cosine ranking for paired sets, both directions.
inline RecallReport retrieval_recall(const std::vector<Vector>& image_embeddings,
                                     const std::vector<Vector>& text_embeddings,
                                     const std::vector<int>& ks = {1, 5, 10}) {
  const int n = static_cast<int>(image_embeddings.size());
  require(n == static_cast<int>(text_embeddings.size()) && n > 0, "retrieval_recall: paired set mismatch");
  for (int k : ks) require(k <= n, "retrieval_recall: k exceeds set size");

  Matrix sim(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) sim(i, j) = cosine(image_embeddings[i], text_embeddings[j]);

  auto direction = [&](bool image_query) {
    std::map<int, double> recall;
    for (int k : ks) recall[k] = 0;
    for (int i = 0; i < n; ++i) {
      // rank of the matched item = number of strictly better candidates
      int rank = 0;
      const double own = sim(i, i);
      for (int j = 0; j < n; ++j) {
        double s = image_query ? sim(i, j) : sim(j, i);
        if (j != i && s > own) ++rank;
      }
      for (int k : ks)
        if (rank < k) recall[k] += 1.0;
    }
    for (int k : ks) recall[k] /= n;
    return recall;
  };

  RecallReport report;
  report.image_to_text = direction(true);
  report.text_to_image = direction(false);
  for (int k : ks) report.mean[k] = 0.5 * (report.image_to_text[k] + report.text_to_image[k]);
  return report;
}

// --- aggregate report -----------------------------------------------------------

struct MetricReport {
  std::optional<double> dbi;
  std::optional<double> acc1;
  std::optional<double> map_coherence;
  std::optional<double> miou;
  std::optional<double> zsc_top1;
  std::map<int, double> recall_mean;
  nlohmann::ordered_json sampling_config;
  uint64_t seed = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    auto put = [&](const char* key, const std::optional<double>& v) {
      if (v) j[key] = *v;
    };
    put("dbi", dbi);
    put("acc1", acc1);
    put("map", map_coherence);
    put("miou", miou);
    put("zsc_top1", zsc_top1);
    if (!recall_mean.empty()) {
      nlohmann::ordered_json r;
      for (const auto& [k, v] : recall_mean) r["r@" + std::to_string(k)] = v;
      j["recall"] = r;
    }
    if (!sampling_config.is_null()) j["sampling"] = sampling_config;
    j["seed"] = seed;
    return j;
  }
};

}  // namespace farslip
