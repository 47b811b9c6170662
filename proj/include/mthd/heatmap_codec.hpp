// Center-heatmap encoding of boxes and peak decoding of predicted maps.
#pragma once

#include "mthd/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

namespace mthd {

struct CodecConfig {
  int stride = 4;
  double min_overlap = 0.7;
};

/// Largest corner displacement (in the units of w and h) that keeps IoU with
/// the original box at or above `min_overlap`. Minimum over the three extreme
/// cases: translated box, shrunken box, grown box. Each case solves a
/// quadratic in r and takes its smallest non-negative root.
inline double gaussian_radius(double box_w, double box_h, double min_overlap = 0.7) {
  if (!(box_w > 0) || !(box_h > 0))
    throw std::invalid_argument("gaussian_radius: box dimensions must be positive");
  if (!(min_overlap > 0 && min_overlap < 1))
    throw std::invalid_argument("gaussian_radius: min_overlap must be in (0, 1)");
  const double sum = box_w + box_h;
  const double area = box_w * box_h;
  const double o = min_overlap;

  // (w - r)(h - r) / (2wh - (w - r)(h - r)) = o
  const double c1 = area * (1 - o) / (1 + o);
  const double r1 = (sum - std::sqrt(sum * sum - 4 * c1)) / 2;
  // (w - 2r)(h - 2r) / wh = o
  const double r2 = (2 * sum - std::sqrt(4 * sum * sum - 16 * (1 - o) * area)) / 8;
  // wh / ((w + 2r)(h + 2r)) = o
  const double r3 =
      (-2 * o * sum + std::sqrt(4 * o * o * sum * sum - 16 * o * (o - 1) * area)) / (8 * o);
  return std::max(0.0, std::min({r1, r2, r3}));
}

/// Splats max(existing, exp(-d^2 / 2 sigma^2)) around `center` (row, col) with
/// sigma = radius / 3. A zero radius marks the center cell only.
template <typename Scalar>
void splat_gaussian(Image<Scalar>& heatmap, Eigen::Index row, Eigen::Index col, double radius) {
  const double sigma = radius / 3.0;
  const auto reach = static_cast<Eigen::Index>(std::ceil(radius));
  for (Eigen::Index i = std::max<Eigen::Index>(0, row - reach);
       i <= std::min(heatmap.rows() - 1, row + reach); ++i) {
    for (Eigen::Index j = std::max<Eigen::Index>(0, col - reach);
         j <= std::min(heatmap.cols() - 1, col + reach); ++j) {
      const double di = static_cast<double>(i - row);
      const double dj = static_cast<double>(j - col);
      const double d2 = di * di + dj * dj;
      double value;
      if (d2 == 0)
        value = 1.0;
      else if (sigma > 0)
        value = std::exp(-d2 / (2 * sigma * sigma));
      else
        continue;
      heatmap(i, j) = std::max(heatmap(i, j), static_cast<Scalar>(value));
    }
  }
}

template <typename Scalar>
TargetMaps<Scalar> encode(std::span<const BBox> boxes, int height, int width,
                          const CodecConfig& config = {}) {
  const int stride = config.stride;
  if (stride <= 0 || height % stride != 0 || width % stride != 0)
    throw std::invalid_argument("encode: H and W must be divisible by the stride");
  const int rows = height / stride;
  const int cols = width / stride;

  TargetMaps<Scalar> maps;
  maps.heatmap = Image<Scalar>::Zero(rows, cols);
  maps.size = zero_field<Scalar>(rows, cols);
  maps.offset = zero_field<Scalar>(rows, cols);
  maps.center_mask = Mask::Constant(rows, cols, false);

  for (const auto& box : boxes) {
    check_box(box, width, height);
    const double cx = box.center_x() / stride;
    const double cy = box.center_y() / stride;
    const double w = box.width() / stride;
    const double h = box.height() / stride;
    const auto col = std::min<Eigen::Index>(cols - 1, static_cast<Eigen::Index>(std::floor(cx)));
    const auto row = std::min<Eigen::Index>(rows - 1, static_cast<Eigen::Index>(std::floor(cy)));

    splat_gaussian(maps.heatmap, row, col, gaussian_radius(w, h, config.min_overlap));
    maps.size[0](row, col) = static_cast<Scalar>(w);
    maps.size[1](row, col) = static_cast<Scalar>(h);
    maps.offset[0](row, col) = static_cast<Scalar>(cx - static_cast<double>(col));
    maps.offset[1](row, col) = static_cast<Scalar>(cy - static_cast<double>(row));
    maps.center_mask(row, col) = true;
  }
  return maps;
}

struct DecodeOptions {
  int stride = 4;
  int top_k = 100;
  double score_threshold = 0.0;
};

/// A cell is a peak when it is >= every cell of its 3x3 neighborhood.
template <typename Scalar>
bool is_local_peak(const Image<Scalar>& heat, Eigen::Index i, Eigen::Index j) {
  const Scalar v = heat(i, j);
  for (Eigen::Index di = -1; di <= 1; ++di)
    for (Eigen::Index dj = -1; dj <= 1; ++dj) {
      const Eigen::Index ii = i + di, jj = j + dj;
      if (ii < 0 || jj < 0 || ii >= heat.rows() || jj >= heat.cols()) continue;
      if (heat(ii, jj) > v) return false;
    }
  return true;
}

/// Peaks in descending score order (ties by raster index), up to top_k, each
/// turned into a corner-form box clamped to the image.
template <typename Scalar>
std::vector<Detection> decode(const Image<Scalar>& heat, const VectorField<Scalar>& size,
                              const VectorField<Scalar>& offset, const DecodeOptions& options = {}) {
  for (const auto* m : {&size[0], &size[1], &offset[0], &offset[1]})
    if (m->rows() != heat.rows() || m->cols() != heat.cols())
      throw ShapeMismatch("decode: size/offset maps do not match the heatmap shape");

  struct Peak {
    Eigen::Index i, j;
    Scalar score;
  };
  std::vector<Peak> peaks;
  for (Eigen::Index i = 0; i < heat.rows(); ++i)
    for (Eigen::Index j = 0; j < heat.cols(); ++j)
      if (heat(i, j) >= options.score_threshold && is_local_peak(heat, i, j))
        peaks.push_back({i, j, heat(i, j)});
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const Peak& a, const Peak& b) { return a.score > b.score; });
  if (static_cast<int>(peaks.size()) > options.top_k) peaks.resize(std::max(0, options.top_k));

  const double stride = options.stride;
  const double img_w = static_cast<double>(heat.cols()) * stride;
  const double img_h = static_cast<double>(heat.rows()) * stride;
  std::vector<Detection> detections;
  detections.reserve(peaks.size());
  for (const auto& p : peaks) {
    const double cx = stride * (static_cast<double>(p.j) + offset[0](p.i, p.j));
    const double cy = stride * (static_cast<double>(p.i) + offset[1](p.i, p.j));
    const double w = stride * std::max<double>(0, size[0](p.i, p.j));
    const double h = stride * std::max<double>(0, size[1](p.i, p.j));
    Detection det;
    det.box = {std::clamp(cx - w / 2, 0.0, img_w), std::clamp(cy - h / 2, 0.0, img_h),
               std::clamp(cx + w / 2, 0.0, img_w), std::clamp(cy + h / 2, 0.0, img_h)};
    det.score = std::clamp<double>(p.score, 0.0, 1.0);
    detections.push_back(det);
  }
  return detections;
}

template <typename Scalar>
std::vector<Detection> decode(const DetectorOutput<Scalar>& out, const DecodeOptions& options = {}) {
  return decode(out.heatmap, out.size, out.offset, options);
}

}  // namespace mthd
