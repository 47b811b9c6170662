// Supervised center-heatmap losses and the teacher/student consistency loss.
// Every loss optionally writes its gradient with respect to the prediction;
// teacher-side inputs are constants and never receive a gradient.
#pragma once

#include "mthd/types.hpp"

#include <algorithm>
#include <cmath>

namespace mthd {

struct SupLossConfig {
  double focal_alpha = 2.0;
  double focal_beta = 4.0;
  double size_weight = 0.1;
  double offset_weight = 1.0;
};

struct ConsLossConfig {
  double size_weight = 0.02;  // weight of the size-map MSE term
};

inline void validate(const SupLossConfig& config) {
  if (!(config.focal_alpha > 0) || !(config.focal_beta > 0))
    throw ConfigError("focal exponents must be positive");
  if (config.size_weight < 0 || config.offset_weight < 0)
    throw ConfigError("loss weights must be non-negative");
}

inline void validate(const ConsLossConfig& config) {
  if (config.size_weight < 0) throw ConfigError("size consistency weight must be non-negative");
}

inline constexpr double kFocalEpsilon = 1e-6;

/// Penalty-reduced pixel-wise focal loss, normalized by max(1, #(Y == 1)).
template <typename Scalar>
Scalar focal_heatmap_loss(const Image<Scalar>& pred, const Image<Scalar>& target, double alpha = 2.0,
                          double beta = 4.0, Image<Scalar>* grad = nullptr) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeMismatch("focal_heatmap_loss: shapes differ");
  const Eigen::Index positives = (target.array() == Scalar(1)).count();
  const double norm = static_cast<double>(std::max<Eigen::Index>(1, positives));
  if (grad) *grad = Image<Scalar>::Zero(pred.rows(), pred.cols());

  double total = 0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double raw = static_cast<double>(pred.data()[i]);
    const double p = std::clamp(raw, kFocalEpsilon, 1 - kFocalEpsilon);
    const bool clamped = p != raw;
    const double y = static_cast<double>(target.data()[i]);
    double loss, dloss;
    if (y == 1.0) {
      const double q = 1 - p;
      loss = -std::pow(q, alpha) * std::log(p);
      dloss = alpha * std::pow(q, alpha - 1) * std::log(p) - std::pow(q, alpha) / p;
    } else {
      const double w = std::pow(1 - y, beta);
      loss = -w * std::pow(p, alpha) * std::log1p(-p);
      dloss = -w * (alpha * std::pow(p, alpha - 1) * std::log1p(-p) - std::pow(p, alpha) / (1 - p));
    }
    total += loss;
    if (grad && !clamped) grad->data()[i] = static_cast<Scalar>(dloss / norm);
  }
  return static_cast<Scalar>(total / norm);
}

/// Mean absolute error over the masked cells and both channels; 0 for an
/// empty mask.
template <typename Scalar>
Scalar masked_l1(const VectorField<Scalar>& pred, const VectorField<Scalar>& target, const Mask& mask,
                 VectorField<Scalar>* grad = nullptr) {
  for (int c = 0; c < 2; ++c)
    if (pred[c].rows() != mask.rows() || pred[c].cols() != mask.cols() ||
        target[c].rows() != mask.rows() || target[c].cols() != mask.cols())
      throw ShapeMismatch("masked_l1: shapes differ");
  if (grad) *grad = zero_field<Scalar>(mask.rows(), mask.cols());
  const Eigen::Index count = mask.count();
  if (count == 0) return Scalar(0);
  const double norm = 2.0 * static_cast<double>(count);
  double total = 0;
  for (int c = 0; c < 2; ++c) {
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      if (!mask.data()[i]) continue;
      const double diff = static_cast<double>(pred[c].data()[i]) - static_cast<double>(target[c].data()[i]);
      total += std::abs(diff);
      if (grad) {
        const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
        (*grad)[c].data()[i] = static_cast<Scalar>(sign / norm);
      }
    }
  }
  return static_cast<Scalar>(total / norm);
}

struct SupLoss {
  double total = 0;
  double heatmap = 0;
  double size = 0;
  double offset = 0;
};

template <typename Scalar>
SupLoss sup_loss(const DetectorOutput<Scalar>& out, const TargetMaps<Scalar>& targets,
                 const SupLossConfig& config = {}, DetectorOutput<Scalar>* grad = nullptr) {
  SupLoss loss;
  Image<Scalar>* gheat = grad ? &grad->heatmap : nullptr;
  VectorField<Scalar>* gsize = grad ? &grad->size : nullptr;
  VectorField<Scalar>* goff = grad ? &grad->offset : nullptr;
  loss.heatmap = focal_heatmap_loss(out.heatmap, targets.heatmap, config.focal_alpha,
                                    config.focal_beta, gheat);
  loss.size = masked_l1(out.size, targets.size, targets.center_mask, gsize);
  loss.offset = masked_l1(out.offset, targets.offset, targets.center_mask, goff);
  loss.total = loss.heatmap + config.size_weight * loss.size + config.offset_weight * loss.offset;
  if (grad) {
    for (int c = 0; c < 2; ++c) {
      grad->size[c] *= static_cast<Scalar>(config.size_weight);
      grad->offset[c] *= static_cast<Scalar>(config.offset_weight);
    }
  }
  return loss;
}

struct ConsLoss {
  double total = 0;
  double heatmap = 0;
  double size = 0;
};

/// mse(Y_s, Y_t) + size_weight * mse(D_s, D_t), means over all cells (and both
/// channels for D). Offsets take no part. The gradient is written only for the
/// student; offset gradients are zero.
template <typename Scalar>
ConsLoss consistency_loss(const DetectorOutput<Scalar>& student, const Image<Scalar>& teacher_heat,
                          const VectorField<Scalar>& teacher_size, const ConsLossConfig& config = {},
                          DetectorOutput<Scalar>* grad = nullptr) {
  const auto rows = student.heatmap.rows();
  const auto cols = student.heatmap.cols();
  if (teacher_heat.rows() != rows || teacher_heat.cols() != cols)
    throw ShapeMismatch("consistency_loss: heatmap shapes differ");
  for (int c = 0; c < 2; ++c)
    if (teacher_size[c].rows() != rows || teacher_size[c].cols() != cols ||
        student.size[c].rows() != rows || student.size[c].cols() != cols)
      throw ShapeMismatch("consistency_loss: size map shapes differ");

  const double cells = static_cast<double>(rows * cols);
  const auto heat_diff = (student.heatmap.template cast<double>() - teacher_heat.template cast<double>()).eval();
  ConsLoss loss;
  loss.heatmap = heat_diff.squaredNorm() / cells;
  double size_sq = 0;
  std::array<Image<double>, 2> size_diff;
  for (int c = 0; c < 2; ++c) {
    size_diff[c] = student.size[c].template cast<double>() - teacher_size[c].template cast<double>();
    size_sq += size_diff[c].squaredNorm();
  }
  loss.size = size_sq / (2 * cells);
  loss.total = loss.heatmap + config.size_weight * loss.size;

  if (grad) {
    *grad = DetectorOutput<Scalar>::zeros(rows, cols);
    grad->heatmap = (heat_diff * (2.0 / cells)).template cast<Scalar>();
    for (int c = 0; c < 2; ++c)
      grad->size[c] = (size_diff[c] * (config.size_weight * 2.0 / (2 * cells))).template cast<Scalar>();
  }
  return loss;
}

}  // namespace mthd
