// Intensity, geometric and sequence-subset transforms for the student and
// teacher inputs, and the matching warp of teacher output maps.
#pragma once

#include "mthd/random.hpp"
#include "mthd/types.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace mthd {

struct AugmentRanges {
  double gamma_min = 0.5;
  double gamma_max = 2.0;
  double max_rotation_deg = 10.0;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double max_shift_fraction = 0.25;  // of H (vertical) and W (horizontal)
  bool intensity = true;
  bool geometric = true;
  bool sequence_subset = true;
  bool rescale_size_values = true;
};

/// Similarity transform about the image center c:
///   x' = scale * Rot(rotation) * (x - c) + c + shift
/// in continuous pixel coordinates (pixel (i, j) is centered at (j+.5, i+.5)).
struct GeomParams {
  double rotation_deg = 0;
  double scale = 1;
  double shift_x = 0;
  double shift_y = 0;

  bool is_identity() const {
    return rotation_deg == 0 && scale == 1 && shift_x == 0 && shift_y == 0;
  }

  /// The same transform expressed on a grid downsampled by `stride`.
  GeomParams at_stride(int stride) const {
    return {rotation_deg, scale, shift_x / stride, shift_y / stride};
  }

  /// cos/sin of the rotation, exact for multiples of 90 degrees.
  std::pair<double, double> cos_sin() const {
    const double quarter = rotation_deg / 90.0;
    if (quarter == std::round(quarter)) {
      static constexpr double c[] = {1, 0, -1, 0};
      static constexpr double s[] = {0, 1, 0, -1};
      const int q = ((static_cast<int>(std::round(quarter)) % 4) + 4) % 4;
      return {c[q], s[q]};
    }
    const double rad = rotation_deg * 3.14159265358979323846 / 180.0;
    return {std::cos(rad), std::sin(rad)};
  }

  GeomParams inverse() const {
    const auto [c, s] = cos_sin();
    // x = Rot(-a) (x' - c - t) / scale + c
    return {-rotation_deg, 1.0 / scale, -(c * shift_x + s * shift_y) / scale,
            -(-s * shift_x + c * shift_y) / scale};
  }

  bool operator==(const GeomParams&) const = default;
};

struct AugmentSpec {
  double gamma_student = 1;
  double gamma_teacher = 1;
  GeomParams geometry;
  std::vector<std::string> sequence_subset;
};

/// Two-stage subset draw: cardinality uniform in [1, n], then a uniform
/// n-combination. Returned names keep the order of `available`.
std::vector<std::string> sample_sequence_subset(std::span<const std::string> available, Rng& rng);

/// Draws one AugmentSpec for a `height` x `width` image. Disabled families
/// yield identity values (gamma 1, identity geometry, full subset).
AugmentSpec sample_augment(std::span<const std::string> available, Rng& rng,
                           const AugmentRanges& ranges, int height, int width);

/// Throws InvariantViolation if any field is outside `ranges`.
void validate(const AugmentSpec& spec, const AugmentRanges& ranges, int height, int width);

template <typename Scalar>
Image<Scalar> apply_intensity(const Image<Scalar>& image, double gamma) {
  if ((image.array() < Scalar(0)).any())
    throw std::invalid_argument("apply_intensity: negative pixel values");
  if (gamma == 1.0) return image;
  return image.array().pow(static_cast<Scalar>(gamma)).matrix();
}

/// Bilinear sample at continuous coordinates (x, y); zero outside.
template <typename Scalar>
Scalar sample_bilinear(const Image<Scalar>& image, double x, double y) {
  const double fx = x - 0.5;
  const double fy = y - 0.5;
  const double x0 = std::floor(fx);
  const double y0 = std::floor(fy);
  const double ax = fx - x0;
  const double ay = fy - y0;
  const auto j0 = static_cast<Eigen::Index>(x0);
  const auto i0 = static_cast<Eigen::Index>(y0);
  auto at = [&](Eigen::Index i, Eigen::Index j) -> double {
    if (i < 0 || j < 0 || i >= image.rows() || j >= image.cols()) return 0.0;
    return static_cast<double>(image(i, j));
  };
  double v = 0;
  if (ax == 0 && ay == 0) {
    v = at(i0, j0);
  } else {
    v = (1 - ax) * (1 - ay) * at(i0, j0) + ax * (1 - ay) * at(i0, j0 + 1) +
        (1 - ax) * ay * at(i0 + 1, j0) + ax * ay * at(i0 + 1, j0 + 1);
  }
  return static_cast<Scalar>(v);
}

/// Warps by inverse mapping each destination pixel center through `g`.
/// `g` is expressed in the pixel units of `image`.
template <typename Scalar>
Image<Scalar> apply_geometric(const Image<Scalar>& image, const GeomParams& g) {
  if (g.is_identity()) return image;
  const auto [c, s] = g.cos_sin();
  const double cx = image.cols() / 2.0;
  const double cy = image.rows() / 2.0;
  Image<Scalar> out(image.rows(), image.cols());
  for (Eigen::Index i = 0; i < image.rows(); ++i) {
    for (Eigen::Index j = 0; j < image.cols(); ++j) {
      const double dx = (j + 0.5 - cx - g.shift_x) / g.scale;
      const double dy = (i + 0.5 - cy - g.shift_y) / g.scale;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      out(i, j) = sample_bilinear(image, sx, sy);
    }
  }
  return out;
}

/// Warps teacher heatmap and size maps onto the student's geometry. `g` is the
/// transform applied to the student input (image pixels); maps are at
/// `stride`. Size values are multiplied by g.scale when requested; heatmap
/// values are never rescaled. Offsets are deliberately not handled.
template <typename Scalar>
std::pair<Image<Scalar>, VectorField<Scalar>> warp_teacher_outputs(
    const Image<Scalar>& heat, const VectorField<Scalar>& size, const GeomParams& g, int stride,
    bool rescale_size_values = true) {
  const GeomParams grid = g.at_stride(stride);
  Image<Scalar> warped_heat = apply_geometric(heat, grid);
  VectorField<Scalar> warped_size{apply_geometric(size[0], grid), apply_geometric(size[1], grid)};
  if (rescale_size_values && g.scale != 1.0)
    for (auto& channel : warped_size) channel *= static_cast<Scalar>(g.scale);
  for (auto& channel : warped_size) channel = channel.cwiseMax(Scalar(0));
  return {std::move(warped_heat), std::move(warped_size)};
}

/// Image of a box under g. Boxes bound elliptical lesions, so the inscribed
/// axis-aligned ellipse is transformed and re-bounded; for multiples of 90
/// degrees this is an exact corner permutation.
BBox transform_box(const BBox& box, const GeomParams& g, int height, int width);

}  // namespace mthd
