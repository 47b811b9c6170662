#include "mthd/augment.hpp"

#include <algorithm>

namespace mthd {

std::vector<std::string> sample_sequence_subset(std::span<const std::string> available, Rng& rng) {
  if (available.empty()) throw std::invalid_argument("sample_sequence_subset: no sequences");
  const long n = static_cast<long>(available.size());
  const long size = uniform_int(rng, 1, n);
  // Partial Fisher-Yates over indices gives a uniform size-combination.
  std::vector<long> index(available.size());
  for (long i = 0; i < n; ++i) index[i] = i;
  for (long i = 0; i < size; ++i) std::swap(index[i], index[uniform_int(rng, i, n - 1)]);
  std::sort(index.begin(), index.begin() + size);
  std::vector<std::string> subset;
  for (long i = 0; i < size; ++i) subset.push_back(available[index[i]]);
  return subset;
}

AugmentSpec sample_augment(std::span<const std::string> available, Rng& rng,
                           const AugmentRanges& ranges, int height, int width) {
  if (available.empty()) throw std::invalid_argument("sample_augment: no sequences");
  // Every value is drawn whether or not its family is enabled, so toggling a
  // family does not shift the stream seen by the others.
  AugmentSpec spec;
  auto subset = sample_sequence_subset(available, rng);
  const double gamma_s = uniform(rng, ranges.gamma_min, ranges.gamma_max);
  const double gamma_t = uniform(rng, ranges.gamma_min, ranges.gamma_max);
  const double rotation = uniform(rng, -ranges.max_rotation_deg, ranges.max_rotation_deg);
  const double scale = uniform(rng, ranges.scale_min, ranges.scale_max);
  const double dx = uniform(rng, -ranges.max_shift_fraction, ranges.max_shift_fraction) * width;
  const double dy = uniform(rng, -ranges.max_shift_fraction, ranges.max_shift_fraction) * height;

  spec.sequence_subset = ranges.sequence_subset
                             ? std::move(subset)
                             : std::vector<std::string>(available.begin(), available.end());
  if (ranges.intensity) {
    spec.gamma_student = gamma_s;
    spec.gamma_teacher = gamma_t;
  }
  if (ranges.geometric) spec.geometry = {rotation, scale, dx, dy};
  return spec;
}

void validate(const AugmentSpec& spec, const AugmentRanges& ranges, int height, int width) {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  const bool gammas_ok = (spec.gamma_student == 1 && spec.gamma_teacher == 1) ||
                         (in(spec.gamma_student, ranges.gamma_min, ranges.gamma_max) &&
                          in(spec.gamma_teacher, ranges.gamma_min, ranges.gamma_max));
  if (!gammas_ok) throw InvariantViolation("gamma outside the configured range");
  const auto& g = spec.geometry;
  if (!in(g.rotation_deg, -ranges.max_rotation_deg, ranges.max_rotation_deg))
    throw InvariantViolation("rotation outside the configured range");
  if (!g.is_identity() && !in(g.scale, ranges.scale_min, ranges.scale_max))
    throw InvariantViolation("scale outside the configured range");
  if (std::abs(g.shift_x) > ranges.max_shift_fraction * width ||
      std::abs(g.shift_y) > ranges.max_shift_fraction * height)
    throw InvariantViolation("shift outside the configured range");
  if (spec.sequence_subset.empty()) throw InvariantViolation("empty sequence subset");
}

BBox transform_box(const BBox& box, const GeomParams& g, int height, int width) {
  const auto [c, s] = g.cos_sin();
  const double cx = width / 2.0;
  const double cy = height / 2.0;
  const double dx = box.center_x() - cx;
  const double dy = box.center_y() - cy;
  const double px = g.scale * (c * dx - s * dy) + cx + g.shift_x;
  const double py = g.scale * (s * dx + c * dy) + cy + g.shift_y;
  const double a = box.width() / 2;
  const double b = box.height() / 2;
  const double half_w = g.scale * std::sqrt(a * c * (a * c) + b * s * (b * s));
  const double half_h = g.scale * std::sqrt(a * s * (a * s) + b * c * (b * c));
  return {std::clamp(px - half_w, 0.0, static_cast<double>(width)),
          std::clamp(py - half_h, 0.0, static_cast<double>(height)),
          std::clamp(px + half_w, 0.0, static_cast<double>(width)),
          std::clamp(py + half_h, 0.0, static_cast<double>(height))};
}

}  // namespace mthd
