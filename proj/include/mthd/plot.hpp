// Minimal SVG line charts for FROC curves and sensitivity summaries.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace mthd {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotPanel {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  double y_min = 0;
  double y_max = 1;
  std::vector<PlotSeries> series;
};

/// Panels are laid out left to right. Throws std::invalid_argument for a
/// series whose x and y lengths differ, or non-positive x on a log axis.
std::string render_svg(const std::vector<PlotPanel>& panels);
void write_svg(const std::filesystem::path& path, const std::vector<PlotPanel>& panels);

}  // namespace mthd
