#include "mthd/froc.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mthd {

using nlohmann::json;

double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

MatchResult match_detections(std::span<const Detection> detections, std::span<const BBox> gts,
                             double iou_threshold) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  MatchResult result;
  result.is_true_positive.assign(detections.size(), false);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t d : order) {
    double best = -1;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double overlap = iou(detections[d].box, gts[g]);
      if (overlap > best) {
        best = overlap;
        best_gt = g;
      }
    }
    if (best_gt < gts.size() && best > iou_threshold) {
      used[best_gt] = true;
      result.is_true_positive[d] = true;
      ++result.matched_gt;
    }
  }
  return result;
}

namespace {

struct PooledDetection {
  double score;
  bool tp;
  std::size_t study;
};

int total_gt(std::span<const StudyPrediction> studies) {
  int n = 0;
  for (const auto& s : studies) n += static_cast<int>(s.ground_truth.size());
  return n;
}

}  // namespace

std::vector<FrocCurvePoint> froc_curve(std::span<const StudyPrediction> studies,
                                       const FrocOptions& options) {
  const int gt_count = total_gt(studies);
  if (gt_count == 0) throw std::domain_error("froc: no ground-truth lesions; sensitivity undefined");
  const double n_studies = static_cast<double>(studies.size());

  std::vector<PooledDetection> pooled;
  std::vector<int> study_gt(studies.size());
  int studies_with_gt = 0;
  for (std::size_t s = 0; s < studies.size(); ++s) {
    const auto& st = studies[s];
    study_gt[s] = static_cast<int>(st.ground_truth.size());
    if (study_gt[s] > 0) ++studies_with_gt;
    const auto match = match_detections(st.detections, st.ground_truth, options.iou_threshold);
    for (std::size_t d = 0; d < st.detections.size(); ++d)
      pooled.push_back({st.detections[d].score, match.is_true_positive[d], s});
  }
  // Stable: equal scores stay in (study, detection) order.
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const PooledDetection& a, const PooledDetection& b) { return a.score > b.score; });

  std::vector<int> study_tp(studies.size(), 0);
  auto sensitivity = [&](int tp) {
    if (options.mode == SensitivityMode::lesion_pooled) return static_cast<double>(tp) / gt_count;
    double sum = 0;
    for (std::size_t s = 0; s < studies.size(); ++s)
      if (study_gt[s] > 0) sum += static_cast<double>(study_tp[s]) / study_gt[s];
    return sum / studies_with_gt;
  };

  std::vector<FrocCurvePoint> curve{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < pooled.size();) {
    const double score = pooled[i].score;
    for (; i < pooled.size() && pooled[i].score == score; ++i) {
      if (pooled[i].tp) {
        ++tp;
        ++study_tp[pooled[i].study];
      } else {
        ++fp;
      }
    }
    curve.push_back({score, fp / n_studies, sensitivity(tp)});
  }
  return curve;
}

EvalResult froc(std::span<const StudyPrediction> studies, const FrocOptions& options) {
  const auto curve = froc_curve(studies, options);
  EvalResult result;
  result.fp_points = options.fp_points;
  for (double point : options.fp_points) {
    double best = 0;
    for (const auto& c : curve)
      if (c.mean_fp <= point) best = std::max(best, c.sensitivity);
    result.sensitivities.push_back(best);
  }
  result.average = result.sensitivities.empty()
                       ? 0.0
                       : std::accumulate(result.sensitivities.begin(), result.sensitivities.end(), 0.0) /
                             static_cast<double>(result.sensitivities.size());
  for (const auto& st : studies) {
    const auto match = match_detections(st.detections, st.ground_truth, options.iou_threshold);
    result.records.push_back({st.study_id, static_cast<int>(st.ground_truth.size()),
                              static_cast<int>(st.detections.size()), match.is_true_positive});
  }
  return result;
}

EvalResult aggregate_folds(std::span<const EvalResult> results) {
  if (results.empty()) throw std::invalid_argument("aggregate_folds: no folds");
  EvalResult out;
  out.fp_points = results.front().fp_points;
  out.sensitivities.assign(out.fp_points.size(), 0.0);
  for (const auto& r : results) {
    if (r.fp_points != out.fp_points || r.sensitivities.size() != out.fp_points.size())
      throw std::invalid_argument("aggregate_folds: folds use different operating points");
    for (std::size_t i = 0; i < r.sensitivities.size(); ++i) out.sensitivities[i] += r.sensitivities[i];
    out.average += r.average;
    out.records.insert(out.records.end(), r.records.begin(), r.records.end());
  }
  const double n = static_cast<double>(results.size());
  for (auto& s : out.sensitivities) s /= n;
  out.average /= n;
  return out;
}

void save_predictions(std::span<const StudyPrediction> studies, const std::filesystem::path& path) {
  json doc;
  doc["schema_version"] = 1;
  json list = json::array();
  for (const auto& s : studies) {
    json dets = json::array();
    for (const auto& d : s.detections)
      dets.push_back({d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, d.score});
    json gts = json::array();
    for (const auto& b : s.ground_truth) gts.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    list.push_back({{"study_id", s.study_id}, {"detections", dets}, {"ground_truth", gts}});
  }
  doc["studies"] = list;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << doc.dump(1) << '\n';
}

std::vector<StudyPrediction> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing file: " + path.string());
  std::vector<StudyPrediction> out;
  try {
    const json doc = json::parse(in);
    if (doc.at("schema_version") != 1) throw SchemaMismatch("prediction schema_version mismatch");
    for (const auto& s : doc.at("studies")) {
      StudyPrediction p;
      p.study_id = s.at("study_id").get<std::string>();
      for (const auto& d : s.at("detections"))
        p.detections.push_back({{d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>(),
                                 d.at(3).get<double>()},
                                d.at(4).get<double>()});
      if (s.contains("ground_truth"))
        for (const auto& b : s["ground_truth"])
          p.ground_truth.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                    b.at(3).get<double>()});
      out.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw SchemaMismatch("bad prediction file " + path.string() + ": " + e.what());
  }
  return out;
}

std::string format_table(const std::vector<std::pair<std::string, EvalResult>>& rows) {
  std::size_t name_width = 7;
  for (const auto& [name, _] : rows) name_width = std::max(name_width, name.size());
  std::ostringstream out;
  char buf[64];
  out << std::string(name_width, ' ') << " | FPs per patient" << '\n';
  out << std::string(name_width, ' ') << " |";
  const auto& points = rows.empty() ? std::vector<double>(kDefaultFpPoints.begin(), kDefaultFpPoints.end())
                                    : rows.front().second.fp_points;
  for (double p : points) {
    std::snprintf(buf, sizeof buf, " %6g", p);
    out << buf;
  }
  out << " |   Avg.\n";
  out << std::string(name_width + 2 + 7 * points.size() + 9, '-') << '\n';
  for (const auto& [name, r] : rows) {
    out << name << std::string(name_width - name.size(), ' ') << " |";
    for (double s : r.sensitivities) {
      std::snprintf(buf, sizeof buf, " %6.1f", 100.0 * s);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, " | %6.1f", 100.0 * r.average);
    out << buf << '\n';
  }
  return out.str();
}

}  // namespace mthd
