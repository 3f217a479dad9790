#include "sar/workbench/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "sar/errors.hpp"

namespace sar::workbench {

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string fmt_tick(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
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

bool parse_double(const std::string& s, double& v) {
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(v);
}

}  // namespace

PlotFrame fit_frame(const std::vector<Series>& series) {
    PlotFrame f;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (const Series& s : series) {
        for (const auto& [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (!std::isfinite(xmin)) return f;
    if (xmax == xmin) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (ymax == ymin) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    f.xmin = xmin;
    f.xmax = xmax;
    f.ymin = ymin;
    f.ymax = ymax;
    return f;
}

std::string render_svg(const std::vector<Series>& series, const PlotLabels& labels) {
    const PlotFrame f = fit_frame(series);
    const double W = f.left + f.width + 170.0;
    const double H = f.top + f.height + 50.0;
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt3(W) + "\" height=\"" + fmt3(H) + "\" viewBox=\"0 0 " +
         fmt3(W) + " " + fmt3(H) + "\">\n";
    s += "<rect x=\"0\" y=\"0\" width=\"" + fmt3(W) + "\" height=\"" + fmt3(H) + "\" fill=\"white\"/>\n";
    s += "<text x=\"" + fmt3(f.left + f.width / 2) + "\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         escape(labels.title) + "</text>\n";
    // Axes.
    const double x0 = f.left, y0 = f.top + f.height;
    s += "<g id=\"axes\" stroke=\"black\" stroke-width=\"1\">\n";
    s += "<line x1=\"" + fmt3(x0) + "\" y1=\"" + fmt3(y0) + "\" x2=\"" + fmt3(x0 + f.width) + "\" y2=\"" + fmt3(y0) + "\"/>\n";
    s += "<line x1=\"" + fmt3(x0) + "\" y1=\"" + fmt3(f.top) + "\" x2=\"" + fmt3(x0) + "\" y2=\"" + fmt3(y0) + "\"/>\n";
    s += "</g>\n";
    s += "<g id=\"ticks\" font-family=\"sans-serif\" font-size=\"10\">\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = f.xmin + (f.xmax - f.xmin) * i / 4.0;
        const double yv = f.ymin + (f.ymax - f.ymin) * i / 4.0;
        const double px = f.map_x(xv), py = f.map_y(yv);
        s += "<line x1=\"" + fmt3(px) + "\" y1=\"" + fmt3(y0) + "\" x2=\"" + fmt3(px) + "\" y2=\"" + fmt3(y0 + 4) +
             "\" stroke=\"black\"/>\n";
        s += "<text x=\"" + fmt3(px) + "\" y=\"" + fmt3(y0 + 16) + "\" text-anchor=\"middle\">" + fmt_tick(xv) + "</text>\n";
        s += "<line x1=\"" + fmt3(x0 - 4) + "\" y1=\"" + fmt3(py) + "\" x2=\"" + fmt3(x0) + "\" y2=\"" + fmt3(py) +
             "\" stroke=\"black\"/>\n";
        s += "<text x=\"" + fmt3(x0 - 6) + "\" y=\"" + fmt3(py + 3) + "\" text-anchor=\"end\">" + fmt_tick(yv) + "</text>\n";
    }
    s += "</g>\n";
    s += "<text x=\"" + fmt3(f.left + f.width / 2) + "\" y=\"" + fmt3(H - 8) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + escape(labels.x) + "</text>\n";
    s += "<text x=\"14\" y=\"" + fmt3(f.top + f.height / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 " +
         fmt3(f.top + f.height / 2) + ")\">" + escape(labels.y) + "</text>\n";
    // Series and legend.
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kPalette[i % (sizeof kPalette / sizeof kPalette[0])];
        std::string pts;
        for (const auto& [x, y] : series[i].points) pts += (pts.empty() ? "" : " ") + fmt3(f.map_x(x)) + "," + fmt3(f.map_y(y));
        s += "<polyline class=\"series\" data-name=\"" + escape(series[i].name) + "\" fill=\"none\" stroke=\"" + color +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        const double ly = f.top + 10 + 18.0 * static_cast<double>(i);
        const double lx = f.left + f.width + 15;
        s += "<line x1=\"" + fmt3(lx) + "\" y1=\"" + fmt3(ly) + "\" x2=\"" + fmt3(lx + 20) + "\" y2=\"" + fmt3(ly) +
             "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + fmt3(lx + 26) + "\" y=\"" + fmt3(ly + 4) + "\" font-family=\"sans-serif\" font-size=\"11\">" +
             escape(series[i].name) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

std::vector<Series> series_from_csv(const CsvTable& table, const std::string& x, const std::string& y,
                                    const std::string& group, std::ostream* warnings) {
    std::vector<Series> out;
    if (table.header.empty()) return out;
    const int xi = table.column(x), yi = table.column(y);
    const int gi = group.empty() ? -1 : table.column(group);
    if (xi < 0 || yi < 0 || (!group.empty() && gi < 0)) throw UsageError("plot: csv lacks the requested columns");
    for (const auto& row : table.rows) {
        double xv = 0, yv = 0;
        if (!parse_double(row[static_cast<std::size_t>(xi)], xv) || !parse_double(row[static_cast<std::size_t>(yi)], yv)) {
            if (warnings != nullptr) *warnings << "warning: skipping non-numeric csv row\n";
            continue;
        }
        const std::string name = gi >= 0 ? row[static_cast<std::size_t>(gi)] : y;
        auto it = std::find_if(out.begin(), out.end(), [&](const Series& s) { return s.name == name; });
        if (it == out.end()) {
            out.push_back({name, {}});
            it = out.end() - 1;
        }
        it->points.emplace_back(xv, yv);
    }
    return out;
}

void emit_plot(const std::string& csv_path, const std::string& svg_path, const std::string& x, const std::string& y,
               const std::string& group, const PlotLabels& labels, std::ostream* warnings) {
    const CsvTable table = read_csv(csv_path, warnings);
    const std::string svg = render_svg(series_from_csv(table, x, y, group, warnings), labels);
    std::ofstream out(svg_path, std::ios::trunc);
    if (!out) throw UsageError("cannot write '" + svg_path + "'");
    out << svg;
}

}  // namespace sar::workbench
