// Per-patient FROC: sensitivity at fixed mean false positives per study.
#pragma once

#include "mthd/types.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mthd {

inline constexpr std::array<double, 5> kDefaultFpPoints{1, 2, 4, 8, 16};

double iou(const BBox& a, const BBox& b);

struct MatchResult {
  std::vector<bool> is_true_positive;  // in the order of the input detections
  int matched_gt = 0;
};

/// Greedy by descending score (ties keep input order). A detection is a true
/// positive when its best-IoU unmatched ground truth has IoU strictly above
/// the threshold; that ground truth is then consumed.
MatchResult match_detections(std::span<const Detection> detections, std::span<const BBox> gts,
                             double iou_threshold = 0.5);

struct StudyPrediction {
  std::string study_id;
  std::vector<Detection> detections;
  std::vector<BBox> ground_truth;
};

struct StudyMatch {
  std::string study_id;
  int num_gt = 0;
  int num_detections = 0;
  std::vector<bool> is_true_positive;
};

enum class SensitivityMode { lesion_pooled, per_study_mean };

struct FrocOptions {
  std::vector<double> fp_points{kDefaultFpPoints.begin(), kDefaultFpPoints.end()};
  double iou_threshold = 0.5;
  SensitivityMode mode = SensitivityMode::lesion_pooled;
};

struct EvalResult {
  std::vector<double> fp_points;
  std::vector<double> sensitivities;  // one per fp point
  double average = 0;
  std::vector<StudyMatch> records;
};

struct FrocCurvePoint {
  double threshold;
  double mean_fp;
  double sensitivity;
};

/// The full operating curve, one point per distinct score threshold, starting
/// with the empty operating point (threshold +inf).
std::vector<FrocCurvePoint> froc_curve(std::span<const StudyPrediction> studies,
                                       const FrocOptions& options = {});

/// Sensitivity at each FP point is the best sensitivity over thresholds whose
/// mean FP per study is <= the point. Throws std::domain_error when there are
/// no ground-truth lesions at all.
EvalResult froc(std::span<const StudyPrediction> studies, const FrocOptions& options = {});

/// Mean per operating point and of the averages. Throws on an empty list or
/// mismatched operating points.
EvalResult aggregate_folds(std::span<const EvalResult> results);

// Prediction file: {"schema_version": 1, "studies": [{"study_id": ...,
//   "detections": [[x_min, y_min, x_max, y_max, score], ...],
//   "ground_truth": [[x_min, y_min, x_max, y_max], ...] (optional)}]}
void save_predictions(std::span<const StudyPrediction> studies, const std::filesystem::path& path);
std::vector<StudyPrediction> load_predictions(const std::filesystem::path& path);

/// Plain-text table with the five operating points and the average, in percent.
std::string format_table(const std::vector<std::pair<std::string, EvalResult>>& rows);

}  // namespace mthd
