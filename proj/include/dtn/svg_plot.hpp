#ifndef DTN_SVG_PLOT_HPP
#define DTN_SVG_PLOT_HPP

#include <string>
#include <vector>

#include "dtn/sim_harness.hpp"

namespace dtn {

/// One labelled curve of a line chart.
struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

/// Writes a self-contained SVG line chart. `log_y` plots log10(max(y, 1e-12))
/// with decade tick labels. Returns false on I/O failure or when every series
/// is empty.
bool svg_line_chart(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series, bool log_y = false);

/// Top-down trajectory overlay of one run: road bands, per-vehicle paths
/// colour-coded by id, spawn markers, and 2-sigma planned position circles
/// every second. Rows from several vehicles may be interleaved. Returns
/// false on I/O failure or when `rows` is empty.
bool svg_trajectories(const std::string& path,
                      const std::vector<TrajectoryRow>& rows,
                      double area = 80.0, double lane_width = 10.0);

}  // namespace dtn

#endif  // DTN_SVG_PLOT_HPP
