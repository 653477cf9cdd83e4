#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace farslip {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// H x W x C image with values in [0, 1], row-major per channel plane.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;  // index: (y * width + x) * channels + c

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0.0) {}

  double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }

  bool empty() const { return data.empty(); }
};

// h x w grid of d-dimensional patch features, stored as an (h*w) x d
// matrix in row-major patch order (row y, then column x).
struct PatchGrid {
  int h = 0;
  int w = 0;
  Matrix features;  // (h*w) x d

  PatchGrid() = default;
  PatchGrid(int h_, int w_, int d) : h(h_), w(w_), features(Matrix::Zero(h_ * w_, d)) {}

  int dim() const { return static_cast<int>(features.cols()); }
  Eigen::RowVectorXd cell(int y, int x) const { return features.row(y * w + x); }
};

// Integer class-id mask, H x W.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // y * width + x

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), labels(static_cast<size_t>(h) * w, 0) {}

  int& at(int y, int x) { return labels[static_cast<size_t>(y) * width + x]; }
  int at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace farslip
