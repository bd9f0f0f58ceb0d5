// Hand-rolled SVG output: a small line-chart renderer for metric and
// residual curves plus a top-down trajectory overlay of the intersection.
// No external renderer; the files are self-contained.

#include "dtn/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace dtn {
namespace {

constexpr int kWidth = 720;
constexpr int kHeight = 540;
constexpr int kMarginLeft = 70;
constexpr int kMarginRight = 24;
constexpr int kMarginTop = 40;
constexpr int kMarginBottom = 56;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                          "#bcbd22", "#17becf", "#393b79", "#ad494a"};
constexpr int kPaletteSize = 12;

std::string escape_xml(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
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

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// "Nice" tick step covering the span with ~n intervals.
double nice_step(double span, int n) {
  if (span <= 0.0) return 1.0;
  const double raw = span / std::max(1, n);
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double frac = raw / mag;
  double step = 10.0;
  if (frac <= 1.0)
    step = 1.0;
  else if (frac <= 2.0)
    step = 2.0;
  else if (frac <= 5.0)
    step = 5.0;
  return step * mag;
}

}  // namespace

bool svg_line_chart(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series, bool log_y) {
  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  double y_min = x_min, y_max = -x_min;
  bool any = false;
  for (const PlotSeries& s : series) {
    for (const auto& [x, y] : s.points) {
      const double yv = log_y ? std::log10(std::max(y, 1e-12)) : y;
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_min = std::min(y_min, yv);
      y_max = std::max(y_max, yv);
      any = true;
    }
  }
  if (!any) return false;
  if (x_max - x_min < 1e-12) {
    x_min -= 0.5;
    x_max += 0.5;
  }
  if (y_max - y_min < 1e-12) {
    y_min -= 0.5;
    y_max += 0.5;
  }
  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = kHeight - kMarginTop - kMarginBottom;
  const auto px = [&](double x) {
    return kMarginLeft + (x - x_min) / (x_max - x_min) * plot_w;
  };
  const auto py = [&](double y) {
    return kMarginTop + plot_h - (y - y_min) / (y_max - y_min) * plot_h;
  };

  std::ofstream out(path);
  if (!out) return false;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
      << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << ' '
      << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"16\">"
      << escape_xml(title) << "</text>\n";

  // Axes and grid.
  out << "<rect x=\"" << kMarginLeft << "\" y=\"" << kMarginTop
      << "\" width=\"" << plot_w << "\" height=\"" << plot_h
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
  const double xs = nice_step(x_max - x_min, 6);
  for (double x = std::ceil(x_min / xs) * xs; x <= x_max + 1e-9; x += xs) {
    out << "<line x1=\"" << px(x) << "\" y1=\"" << kMarginTop << "\" x2=\""
        << px(x) << "\" y2=\"" << kMarginTop + plot_h
        << "\" stroke=\"#ddd\"/>\n"
        << "<text x=\"" << px(x) << "\" y=\"" << kMarginTop + plot_h + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << fmt(x) << "</text>\n";
  }
  const double ys = log_y ? 1.0 : nice_step(y_max - y_min, 6);
  for (double y = std::ceil(y_min / ys) * ys; y <= y_max + 1e-9; y += ys) {
    out << "<line x1=\"" << kMarginLeft << "\" y1=\"" << py(y) << "\" x2=\""
        << kMarginLeft + plot_w << "\" y2=\"" << py(y)
        << "\" stroke=\"#ddd\"/>\n"
        << "<text x=\"" << kMarginLeft - 6 << "\" y=\"" << py(y) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">"
        << (log_y ? ("1e" + fmt(y)) : fmt(y)) << "</text>\n";
  }
  out << "<text x=\"" << kMarginLeft + plot_w / 2 << "\" y=\""
      << kHeight - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\">"
      << escape_xml(x_label) << "</text>\n"
      << "<text x=\"18\" y=\"" << kMarginTop + plot_h / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\" transform=\"rotate(-90 18 "
      << kMarginTop + plot_h / 2 << ")\">" << escape_xml(y_label)
      << "</text>\n";

  // Curves.
  for (std::size_t s = 0; s < series.size(); ++s) {
    if (series[s].points.empty()) continue;
    const char* color = kPalette[s % kPaletteSize];
    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.8\" points=\"";
    for (const auto& [x, y] : series[s].points)
      out << px(x) << ','
          << py(log_y ? std::log10(std::max(y, 1e-12)) : y) << ' ';
    out << "\"/>\n";
    if (series[s].points.size() <= 40) {
      for (const auto& [x, y] : series[s].points)
        out << "<circle cx=\"" << px(x) << "\" cy=\""
            << py(log_y ? std::log10(std::max(y, 1e-12)) : y)
            << "\" r=\"2.4\" fill=\"" << color << "\"/>\n";
    }
  }

  // Legend.
  double ly = kMarginTop + 10;
  for (std::size_t s = 0; s < series.size(); ++s) {
    if (series[s].label.empty()) continue;
    const char* color = kPalette[s % kPaletteSize];
    const double lx = kMarginLeft + plot_w - 150;
    out << "<line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx + 22
        << "\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << lx + 28 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\">"
        << escape_xml(series[s].label) << "</text>\n";
    ly += 18;
  }
  out << "</svg>\n";
  return static_cast<bool>(out);
}

bool svg_trajectories(const std::string& path,
                      const std::vector<TrajectoryRow>& rows, double area,
                      double lane_width) {
  if (rows.empty()) return false;
  const double half_view = area / 2.0 + 5.0;
  const double scale = (kHeight - 80.0) / (2.0 * half_view);
  const double cx = kWidth / 2.0, cy = kHeight / 2.0 + 10.0;
  const auto px = [&](double x) { return cx + x * scale; };
  const auto py = [&](double y) { return cy - y * scale; };

  std::ofstream out(path);
  if (!out) return false;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
      << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << ' '
      << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"16\">Trajectories</text>\n";

  // Road bands (both directions of each road) and the field boundary.
  const double b = lane_width;
  out << "<rect x=\"" << px(-half_view) << "\" y=\"" << py(b) << "\" width=\""
      << 2.0 * half_view * scale << "\" height=\"" << 2.0 * b * scale
      << "\" fill=\"#eee\"/>\n"
      << "<rect x=\"" << px(-b) << "\" y=\"" << py(half_view) << "\" width=\""
      << 2.0 * b * scale << "\" height=\"" << 2.0 * half_view * scale
      << "\" fill=\"#eee\"/>\n"
      << "<line x1=\"" << px(-half_view) << "\" y1=\"" << py(0) << "\" x2=\""
      << px(half_view) << "\" y2=\"" << py(0)
      << "\" stroke=\"#bbb\" stroke-dasharray=\"6,5\"/>\n"
      << "<line x1=\"" << px(0) << "\" y1=\"" << py(-half_view) << "\" x2=\""
      << px(0) << "\" y2=\"" << py(half_view)
      << "\" stroke=\"#bbb\" stroke-dasharray=\"6,5\"/>\n"
      << "<rect x=\"" << px(-area / 2.0) << "\" y=\"" << py(area / 2.0)
      << "\" width=\"" << area * scale << "\" height=\"" << area * scale
      << "\" fill=\"none\" stroke=\"#999\" stroke-dasharray=\"3,4\"/>\n";

  // Per-vehicle colour-coded paths with planned 2-sigma circles.
  std::map<int, std::vector<const TrajectoryRow*>> by_vehicle;
  for (const TrajectoryRow& r : rows) by_vehicle[r.vehicle].push_back(&r);
  int idx = 0;
  for (const auto& [vid, vrows] : by_vehicle) {
    const char* color = kPalette[idx % kPaletteSize];
    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.6\" points=\"";
    for (const TrajectoryRow* r : vrows) out << px(r->x) << ',' << py(r->y)
                                             << ' ';
    out << "\"/>\n";
    for (std::size_t i = 0; i < vrows.size(); i += 10) {
      const TrajectoryRow* r = vrows[i];
      const double sig =
          2.0 * std::sqrt(std::max(0.0, std::max(r->sigma_xx, r->sigma_yy)));
      if (sig > 1e-6)
        out << "<circle cx=\"" << px(r->x) << "\" cy=\"" << py(r->y)
            << "\" r=\"" << sig * scale << "\" fill=\"" << color
            << "\" fill-opacity=\"0.08\" stroke=\"none\"/>\n";
    }
    const TrajectoryRow* first = vrows.front();
    out << "<circle cx=\"" << px(first->x) << "\" cy=\"" << py(first->y)
        << "\" r=\"4\" fill=\"" << color << "\"/>\n"
        << "<text x=\"" << px(first->x) + 6 << "\" y=\"" << py(first->y) - 6
        << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << color
        << "\">" << vid << "</text>\n";
    ++idx;
  }
  out << "</svg>\n";
  return static_cast<bool>(out);
}

}  // namespace dtn
