// Core dense types shared by every module.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace mthd {

/// Single-channel image or activation plane, row-major H x W.
template <typename Scalar>
using Image = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Two-channel map (x/width channel first, then y/height).
template <typename Scalar>
using VectorField = std::array<Image<Scalar>, 2>;

using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ImageF = Image<float>;
using ImageD = Image<double>;

// Error hierarchy. Everything derives from std::runtime_error so callers that
// do not care can catch one type.
struct ShapeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SchemaMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvariantViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Axis-aligned box in continuous pixel coordinates. Pixel (i, j) covers
/// [j, j+1) x [i, i+1).
struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  double area() const { return width() * height(); }

  bool operator==(const BBox&) const = default;
};

inline bool is_well_formed(const BBox& b) {
  return b.x_min < b.x_max && b.y_min < b.y_max;
}

inline bool within_bounds(const BBox& b, double width, double height) {
  return b.x_min >= 0 && b.y_min >= 0 && b.x_max <= width && b.y_max <= height;
}

/// Throws InvariantViolation unless the box is well formed and inside the image.
inline void check_box(const BBox& b, double width, double height) {
  if (!is_well_formed(b))
    throw InvariantViolation("box has x_min >= x_max or y_min >= y_max");
  if (!within_bounds(b, width, height))
    throw InvariantViolation("box lies outside the image");
}

struct Detection {
  BBox box;
  double score = 0;
};

/// Center heatmap, size and offset supervision at output stride R.
template <typename Scalar>
struct TargetMaps {
  Image<Scalar> heatmap;
  VectorField<Scalar> size;    // (w/R, h/R) at center cells
  VectorField<Scalar> offset;  // fractional part of the downscaled center
  Mask center_mask;
};

/// Network outputs; also used to carry gradients with respect to them.
template <typename Scalar>
struct DetectorOutput {
  Image<Scalar> heatmap;
  VectorField<Scalar> size;
  VectorField<Scalar> offset;

  Eigen::Index rows() const { return heatmap.rows(); }
  Eigen::Index cols() const { return heatmap.cols(); }

  static DetectorOutput zeros(Eigen::Index rows, Eigen::Index cols) {
    DetectorOutput out;
    out.heatmap = Image<Scalar>::Zero(rows, cols);
    for (int c = 0; c < 2; ++c) {
      out.size[c] = Image<Scalar>::Zero(rows, cols);
      out.offset[c] = Image<Scalar>::Zero(rows, cols);
    }
    return out;
  }
};

template <typename Scalar>
VectorField<Scalar> zero_field(Eigen::Index rows, Eigen::Index cols) {
  return {Image<Scalar>::Zero(rows, cols), Image<Scalar>::Zero(rows, cols)};
}

}  // namespace mthd
