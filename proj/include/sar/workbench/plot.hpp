#pragma once

// Minimal SVG line charts from metrics CSV files.

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "sar/workbench/metrics.hpp"

namespace sar::workbench {

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

/// Plot area inside the canvas and the data range mapped onto it.
///   px = left + (x - xmin) / (xmax - xmin) * width
///   py = top + height - (y - ymin) / (ymax - ymin) * height
struct PlotFrame {
    double left = 70.0;
    double top = 30.0;
    double width = 480.0;
    double height = 300.0;
    double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;

    [[nodiscard]] double map_x(double x) const { return left + (x - xmin) / (xmax - xmin) * width; }
    [[nodiscard]] double map_y(double y) const { return top + height - (y - ymin) / (ymax - ymin) * height; }
};

/// Tight data range of all series; an empty or zero-width range becomes
/// [v - 0.5, v + 0.5] (or [0, 1] with no data).
[[nodiscard]] PlotFrame fit_frame(const std::vector<Series>& series);

struct PlotLabels {
    std::string title;
    std::string x;
    std::string y;
};

/// Axes, ticks, a legend and one polyline per series. Coordinates are
/// printed with three decimals.
[[nodiscard]] std::string render_svg(const std::vector<Series>& series, const PlotLabels& labels);

/// One series per distinct value of `group` (or a single series when
/// `group` is empty); rows with non-numeric x/y are skipped with a warning.
[[nodiscard]] std::vector<Series> series_from_csv(const CsvTable& table, const std::string& x, const std::string& y,
                                                  const std::string& group, std::ostream* warnings = nullptr);

/// Reads `csv_path` and writes the chart to `svg_path`.
void emit_plot(const std::string& csv_path, const std::string& svg_path, const std::string& x, const std::string& y,
               const std::string& group, const PlotLabels& labels, std::ostream* warnings = nullptr);

}  // namespace sar::workbench
