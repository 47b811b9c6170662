#include "mthd/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mthd {

namespace {

constexpr double kPanelW = 420, kPanelH = 320;
constexpr double kLeft = 60, kRight = 20, kTop = 36, kBottom = 48;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
                                   "#e377c2", "#7f7f7f"};

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void render_panel(std::ostringstream& svg, const PlotPanel& panel, double x0) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : panel.series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("plot: series x/y length mismatch");
    for (double x : s.x) {
      if (panel.log_x && x <= 0) throw std::invalid_argument("plot: non-positive x on a log axis");
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  auto tx = [&](double x) { return panel.log_x ? std::log2(x) : x; };
  double a = tx(lo), b = tx(hi);
  if (a == b) a -= 0.5, b += 0.5;
  const double pw = kPanelW - kLeft - kRight, ph = kPanelH - kTop - kBottom;
  auto px = [&](double x) { return x0 + kLeft + (tx(x) - a) / (b - a) * pw; };
  auto py = [&](double y) { return kTop + (1 - (y - panel.y_min) / (panel.y_max - panel.y_min)) * ph; };

  svg << "<text x=\"" << num(x0 + kPanelW / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(panel.title) << "</text>\n";
  svg << "<rect x=\"" << num(x0 + kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(pw)
      << "\" height=\"" << num(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";

  for (int k = 0; k <= 4; ++k) {
    const double y = panel.y_min + (panel.y_max - panel.y_min) * k / 4;
    svg << "<line x1=\"" << num(x0 + kLeft) << "\" x2=\"" << num(x0 + kLeft + pw) << "\" y1=\"" << num(py(y))
        << "\" y2=\"" << num(py(y)) << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << num(x0 + kLeft - 6) << "\" y=\"" << num(py(y) + 4)
        << "\" text-anchor=\"end\" font-size=\"11\">" << tick(y) << "</text>\n";
  }
  std::vector<double> xticks;
  for (const auto& s : panel.series) xticks.insert(xticks.end(), s.x.begin(), s.x.end());
  std::sort(xticks.begin(), xticks.end());
  xticks.erase(std::unique(xticks.begin(), xticks.end()), xticks.end());
  if (xticks.size() > 10) xticks = {lo, hi};
  for (double x : xticks)
    svg << "<text x=\"" << num(px(x)) << "\" y=\"" << num(kTop + ph + 16)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << tick(x) << "</text>\n";
  svg << "<text x=\"" << num(x0 + kLeft + pw / 2) << "\" y=\"" << num(kPanelH - 10)
      << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(panel.x_label) << "</text>\n";
  const double ly = kTop + ph / 2;
  svg << "<text x=\"" << num(x0 + 16) << "\" y=\"" << num(ly) << "\" text-anchor=\"middle\" font-size=\"12\""
      << " transform=\"rotate(-90 " << num(x0 + 16) << ' ' << num(ly) << ")\">" << escape(panel.y_label)
      << "</text>\n";

  for (std::size_t i = 0; i < panel.series.size(); ++i) {
    const auto& s = panel.series[i];
    const char* color = kColors[i % std::size(kColors)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) svg << num(px(s.x[k])) << ',' << num(py(s.y[k])) << ' ';
    svg << "\"/>\n";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      svg << "<circle cx=\"" << num(px(s.x[k])) << "\" cy=\"" << num(py(s.y[k])) << "\" r=\"3\" fill=\""
          << color << "\"/>\n";
    const double ky = kTop + 14 + 16 * static_cast<double>(i);
    svg << "<line x1=\"" << num(x0 + kLeft + 8) << "\" x2=\"" << num(x0 + kLeft + 28) << "\" y1=\""
        << num(ky) << "\" y2=\"" << num(ky) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text class=\"legend\" x=\"" << num(x0 + kLeft + 32) << "\" y=\"" << num(ky + 4)
        << "\" font-size=\"11\">" << escape(s.label) << "</text>\n";
  }
}

}  // namespace

std::string render_svg(const std::vector<PlotPanel>& panels) {
  const double width = kPanelW * static_cast<double>(std::max<std::size_t>(1, panels.size()));
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(kPanelH)
      << "\" font-family=\"sans-serif\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) render_panel(svg, panels[i], kPanelW * static_cast<double>(i));
  svg << "</svg>\n";
  return svg.str();
}

void write_svg(const std::filesystem::path& path, const std::vector<PlotPanel>& panels) {
  const auto text = render_svg(panels);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
}

}  // namespace mthd
