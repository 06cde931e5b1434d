#include "moelens/report.hpp"

#include "moelens/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace moelens {

std::string format_number(double value, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
    return buf;
}

std::string format_exact(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

std::string xml_escape(const std::string& text) {
    std::string out;
    for (char c : text) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&apos;"; break;
            default: out += c;
        }
    }
    return out;
}

namespace {

std::string num(double v) { return format_number(v, 2); }

}  // namespace

SvgWriter::SvgWriter(double width, double height) : width_(width), height_(height) {}

void SvgWriter::rect(double x, double y, double w, double h, const std::string& fill, double opacity,
                     const std::string& stroke) {
    body_ += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) + "\" height=\"" + num(h) +
             "\" fill=\"" + fill + "\" fill-opacity=\"" + format_number(opacity, 3) + "\"";
    if (!stroke.empty()) body_ += " stroke=\"" + stroke + "\"";
    body_ += "/>\n";
}

void SvgWriter::line(double x1, double y1, double x2, double y2, const std::string& stroke, double width, bool dashed) {
    body_ += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) +
             "\" stroke=\"" + stroke + "\" stroke-width=\"" + num(width) + "\"";
    if (dashed) body_ += " stroke-dasharray=\"6,4\"";
    body_ += "/>\n";
}

void SvgWriter::polyline(const std::vector<std::pair<double, double>>& points, const std::string& stroke, double width) {
    body_ += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"" + num(width) + "\" points=\"";
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (i) body_ += " ";
        body_ += num(points[i].first) + "," + num(points[i].second);
    }
    body_ += "\"/>\n";
}

void SvgWriter::circle(double cx, double cy, double r, const std::string& fill) {
    body_ += "<circle cx=\"" + num(cx) + "\" cy=\"" + num(cy) + "\" r=\"" + num(r) + "\" fill=\"" + fill + "\"/>\n";
}

void SvgWriter::text(double x, double y, const std::string& content, double size, const std::string& anchor) {
    body_ += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-family=\"monospace\" font-size=\"" + num(size) +
             "\" text-anchor=\"" + anchor + "\">" + xml_escape(content) + "</text>\n";
}

std::string SvgWriter::str() const {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width_) + "\" height=\"" + num(height_) +
           "\" viewBox=\"0 0 " + num(width_) + " " + num(height_) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n" +
           body_ + "</svg>\n";
}

std::string bar_chart_svg(const BarChart& chart) {
    const double left = 60, right = 20, top = 40, bottom = 50, plot_h = 220;
    const double bar_w = 24;
    const double plot_w = std::max(1.0, bar_w * static_cast<double>(chart.values.size()));
    SvgWriter svg(left + plot_w + right, top + plot_h + bottom);
    svg.text(left, 22, chart.title, 14, "start");
    const double y_max = chart.y_max > 0 ? chart.y_max : 1.0;
    auto y_of = [&](double v) { return top + plot_h - plot_h * std::clamp(v / y_max, 0.0, 1.0); };

    svg.line(left, top, left, top + plot_h, "#333333");
    svg.line(left, top + plot_h, left + plot_w, top + plot_h, "#333333");
    for (int tick = 0; tick <= 4; ++tick) {
        const double v = y_max * tick / 4.0;
        svg.text(left - 6, y_of(v) + 4, format_number(100.0 * v, 0) + "%", 10, "end");
    }
    svg.text(14, top + plot_h / 2, chart.y_label, 10, "start");
    for (std::size_t i = 0; i < chart.values.size(); ++i) {
        const double x = left + bar_w * static_cast<double>(i);
        const double y = y_of(chart.values[i]);
        svg.rect(x + 2, y, bar_w - 4, top + plot_h - y, "#4c72b0");
        svg.text(x + bar_w / 2, top + plot_h + 14, chart.labels[i], 9, "middle");
    }
    if (chart.baseline >= 0) svg.line(left, y_of(chart.baseline), left + plot_w, y_of(chart.baseline), "#d62728", 1.5, true);
    return svg.str();
}

std::string line_chart_svg(const LineChart& chart) {
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
    const double left = 70, top = 40, plot_w = 360, plot_h = 220, bottom = 50, legend_w = 120;
    double x_min = INFINITY, x_max = -INFINITY, y_min = INFINITY, y_max = -INFINITY;
    for (const auto& s : chart.series) {
        for (double v : s.x) x_min = std::min(x_min, v), x_max = std::max(x_max, v);
        for (double v : s.y) y_min = std::min(y_min, v), y_max = std::max(y_max, v);
    }
    if (!std::isfinite(x_min)) x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    if (x_max == x_min) x_max = x_min + 1;
    if (y_max - y_min < 1e-9) y_min -= 0.5, y_max += 0.5;
    const double pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;
    auto px = [&](double x) { return left + plot_w * (x - x_min) / (x_max - x_min); };
    auto py = [&](double y) { return top + plot_h - plot_h * (y - y_min) / (y_max - y_min); };

    SvgWriter svg(left + plot_w + legend_w, top + plot_h + bottom);
    svg.text(left, 22, chart.title, 14, "start");
    svg.line(left, top, left, top + plot_h, "#333333");
    svg.line(left, top + plot_h, left + plot_w, top + plot_h, "#333333");
    for (int tick = 0; tick <= 4; ++tick) {
        const double v = y_min + (y_max - y_min) * tick / 4.0;
        svg.text(left - 6, py(v) + 4, format_number(v, 3), 10, "end");
    }
    for (double x = std::ceil(x_min); x <= x_max; x += 1.0) svg.text(px(x), top + plot_h + 14, format_number(x, 0), 10, "middle");
    svg.text(left + plot_w / 2, top + plot_h + 34, chart.x_label, 11, "middle");
    svg.text(4, top - 10, chart.y_label, 11, "start");
    for (std::size_t s = 0; s < chart.series.size(); ++s) {
        const auto& series = chart.series[s];
        const char* color = palette[s % std::size(palette)];
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < series.x.size(); ++i) pts.emplace_back(px(series.x[i]), py(series.y[i]));
        svg.polyline(pts, color);
        for (const auto& [x, y] : pts) svg.circle(x, y, 3, color);
        const double ly = top + 16.0 * static_cast<double>(s);
        svg.line(left + plot_w + 10, ly, left + plot_w + 30, ly, color, 2.0);
        svg.text(left + plot_w + 34, ly + 4, series.name, 10, "start");
    }
    return svg.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    out << content;
    if (!out) throw InputError("failed writing '" + path.string() + "'");
}

}  // namespace moelens
