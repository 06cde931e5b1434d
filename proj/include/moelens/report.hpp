#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace moelens {

/// Fixed-point formatting with `decimals` digits.
std::string format_number(double value, int decimals);
/// Shortest text that parses back to exactly `value`.
std::string format_exact(double value);

std::string xml_escape(const std::string& text);

/// Minimal SVG document builder; element order is emission order, so output
/// is deterministic.
class SvgWriter {
public:
    SvgWriter(double width, double height);

    void rect(double x, double y, double w, double h, const std::string& fill, double opacity = 1.0,
              const std::string& stroke = "");
    void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0,
              bool dashed = false);
    void polyline(const std::vector<std::pair<double, double>>& points, const std::string& stroke, double width = 1.5);
    void circle(double cx, double cy, double r, const std::string& fill);
    void text(double x, double y, const std::string& content, double size, const std::string& anchor);

    std::string str() const;

private:
    double width_, height_;
    std::string body_;
};

struct BarChart {
    std::string title;
    std::string y_label;
    std::vector<std::string> labels;
    std::vector<double> values;
    /// Dashed horizontal reference line; skipped when negative.
    double baseline = -1.0;
    double y_max = 1.0;
};

std::string bar_chart_svg(const BarChart& chart);

struct LineSeries {
    std::string name;
    std::vector<double> x, y;
};

struct LineChart {
    std::string title, x_label, y_label;
    std::vector<LineSeries> series;
};

std::string line_chart_svg(const LineChart& chart);

void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace moelens
