#ifndef MELTCAL_PLOTS_HPP
#define MELTCAL_PLOTS_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "meltcal/error.hpp"
#include "meltcal/format.hpp"

namespace meltcal::plot {

inline std::string escape(const std::string& s) {
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

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    return colors[i % 6];
}

/// Minimal SVG document built from primitive shapes.
class Svg {
public:
    Svg(double width, double height) : width_(width), height_(height) {}

    void line(double x1, double y1, double x2, double y2, const std::string& stroke, double w = 1.0,
              const std::string& cls = "") {
        os_ << "<line" << attr_class(cls) << strprintf(" x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\"", x1, y1, x2, y2)
            << " stroke=\"" << stroke << "\"" << strprintf(" stroke-width=\"%.2f\"/>\n", w);
    }
    void rect(double x, double y, double w, double h, const std::string& fill, const std::string& stroke = "none",
              const std::string& cls = "") {
        os_ << "<rect" << attr_class(cls)
            << strprintf(" x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\"", x, y, std::max(0.0, w), std::max(0.0, h))
            << " fill=\"" << fill << "\" stroke=\"" << stroke << "\"/>\n";
    }
    void circle(double cx, double cy, double r, const std::string& fill, const std::string& cls = "") {
        os_ << "<circle" << attr_class(cls) << strprintf(" cx=\"%.2f\" cy=\"%.2f\" r=\"%.2f\"", cx, cy, r) << " fill=\""
            << fill << "\"/>\n";
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke, double w = 1.0,
                  const std::string& cls = "") {
        os_ << "<polyline" << attr_class(cls) << " fill=\"none\" stroke=\"" << stroke << "\""
            << strprintf(" stroke-width=\"%.2f\"", w) << " points=\"";
        for (const auto& [x, y] : pts) os_ << strprintf("%.2f,%.2f ", x, y);
        os_ << "\"/>\n";
    }
    void text(double x, double y, const std::string& s, double size = 11.0, const std::string& anchor = "middle") {
        os_ << strprintf("<text x=\"%.2f\" y=\"%.2f\" font-size=\"%.1f\"", x, y, size) << " text-anchor=\"" << anchor
            << "\" font-family=\"sans-serif\">" << escape(s) << "</text>\n";
    }
    void open_group(const std::string& cls, const std::string& title = "") {
        os_ << "<g" << attr_class(cls) << ">\n";
        if (!title.empty()) os_ << "<title>" << escape(title) << "</title>\n";
    }
    void close_group() { os_ << "</g>\n"; }

    std::string str() const {
        std::ostringstream doc;
        doc << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
            << strprintf("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                         width_, height_, width_, height_)
            << "<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
            << os_.str() << "</svg>\n";
        return doc.str();
    }

private:
    static std::string attr_class(const std::string& cls) { return cls.empty() ? "" : " class=\"" + cls + "\""; }

    double width_, height_;
    std::ostringstream os_;
};

/// Data-to-pixel mapping of one rectangular panel.
struct Axes {
    double left, top, width, height;
    double xmin, xmax, ymin, ymax;

    double px(double x) const { return left + (x - xmin) / (xmax - xmin) * width; }
    double py(double y) const { return top + height - (y - ymin) / (ymax - ymin) * height; }

    void draw(Svg& svg, const std::string& xlabel, const std::string& ylabel, bool ticks = true) const {
        svg.rect(left, top, width, height, "none", "#444444");
        if (!ticks) return;
        for (int k = 0; k <= 4; ++k) {
            double fx = xmin + (xmax - xmin) * k / 4.0, fy = ymin + (ymax - ymin) * k / 4.0;
            svg.line(px(fx), top + height, px(fx), top + height + 4, "#444444");
            svg.text(px(fx), top + height + 15, strprintf("%.3g", fx), 9);
            svg.line(left - 4, py(fy), left, py(fy), "#444444");
            svg.text(left - 6, py(fy) + 3, strprintf("%.3g", fy), 9, "end");
        }
        if (!xlabel.empty()) svg.text(left + width / 2, top + height + 30, xlabel, 11);
        if (!ylabel.empty()) svg.text(left - 45, top + height / 2, ylabel, 11);
    }
};

inline std::pair<double, double> padded_range(double lo, double hi) {
    if (!(hi > lo)) {
        double pad = std::abs(lo) > 0.0 ? 0.05 * std::abs(lo) : 1.0;
        return {lo - pad, hi + pad};
    }
    double pad = 0.05 * (hi - lo);
    return {lo - pad, hi + pad};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("write failed for " + path.string());
}

struct Series {
    std::string name;
    std::vector<double> values;
};

/// Prediction vs measurement with a y = x reference line over the data range.
inline std::vector<std::string> parity(const std::filesystem::path& dir, const std::string& stem,
                                       const std::string& title, const std::vector<double>& measured,
                                       const std::vector<Series>& predicted, const std::string& unit) {
    if (measured.empty()) throw PreconditionError("parity plot needs data");
    double lo = *std::min_element(measured.begin(), measured.end());
    double hi = *std::max_element(measured.begin(), measured.end());
    for (const auto& s : predicted) {
        if (s.values.size() != measured.size()) throw PreconditionError("parity series length mismatch");
        lo = std::min(lo, *std::min_element(s.values.begin(), s.values.end()));
        hi = std::max(hi, *std::max_element(s.values.begin(), s.values.end()));
    }
    auto [a, b] = padded_range(lo, hi);
    Svg svg(520, 480);
    Axes ax{80, 40, 400, 380, a, b, a, b};
    svg.text(260, 24, title, 13);
    ax.draw(svg, "measured (" + unit + ")", "");
    svg.text(20, 230, "predicted", 11);
    svg.line(ax.px(lo), ax.py(lo), ax.px(hi), ax.py(hi), "#777777", 1.0, "ref-line");
    for (std::size_t k = 0; k < predicted.size(); ++k) {
        svg.open_group("series", predicted[k].name);
        for (std::size_t i = 0; i < measured.size(); ++i)
            svg.circle(ax.px(measured[i]), ax.py(predicted[k].values[i]), 4, palette(k), "point");
        svg.close_group();
        svg.circle(100, 60 + 16 * static_cast<double>(k), 4, palette(k));
        svg.text(110, 64 + 16 * static_cast<double>(k), predicted[k].name, 10, "start");
    }
    std::ostringstream csv;
    csv << "measured_" << unit;
    for (const auto& s : predicted) csv << ',' << s.name << '_' << unit;
    csv << '\n';
    for (std::size_t i = 0; i < measured.size(); ++i) {
        csv << format_exact(measured[i]);
        for (const auto& s : predicted) csv << ',' << format_exact(s.values[i]);
        csv << '\n';
    }
    write_text(dir / (stem + ".svg"), svg.str());
    write_text(dir / (stem + ".csv"), csv.str());
    return {stem + ".svg", stem + ".csv"};
}

/// One line per series against a shared x vector.
inline std::vector<std::string> lines(const std::filesystem::path& dir, const std::string& stem, const std::string& title,
                                      const std::vector<double>& x, const std::vector<Series>& ys,
                                      const std::string& xlabel, const std::string& ylabel,
                                      const std::vector<double>& hlines = {}) {
    if (x.empty() || ys.empty()) throw PreconditionError("line plot needs data");
    double ylo = ys.front().values.front(), yhi = ylo;
    for (const auto& s : ys) {
        if (s.values.size() != x.size()) throw PreconditionError("line series length mismatch");
        ylo = std::min(ylo, *std::min_element(s.values.begin(), s.values.end()));
        yhi = std::max(yhi, *std::max_element(s.values.begin(), s.values.end()));
    }
    for (double h : hlines) {
        ylo = std::min(ylo, h);
        yhi = std::max(yhi, h);
    }
    auto [ya, yb] = padded_range(ylo, yhi);
    auto [xa, xb] = padded_range(x.front(), x.back());
    Svg svg(620, 360);
    Axes ax{80, 40, 500, 260, xa, xb, ya, yb};
    svg.text(330, 24, title, 13);
    ax.draw(svg, xlabel, ylabel);
    for (double h : hlines) svg.line(ax.left, ax.py(h), ax.left + ax.width, ax.py(h), "#999999", 1.0, "guide");
    // long series are decimated to at most 2000 vertices
    std::size_t stride = std::max<std::size_t>(1, x.size() / 2000);
    for (std::size_t k = 0; k < ys.size(); ++k) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < x.size(); i += stride) pts.emplace_back(ax.px(x[i]), ax.py(ys[k].values[i]));
        svg.polyline(pts, palette(k), 1.0, "series");
    }
    std::ostringstream csv;
    csv << xlabel;
    for (const auto& s : ys) csv << ',' << s.name;
    csv << '\n';
    for (std::size_t i = 0; i < x.size(); ++i) {
        csv << format_exact(x[i]);
        for (const auto& s : ys) csv << ',' << format_exact(s.values[i]);
        csv << '\n';
    }
    write_text(dir / (stem + ".svg"), svg.str());
    write_text(dir / (stem + ".csv"), csv.str());
    return {stem + ".svg", stem + ".csv"};
}

/// Grouped bar chart, one group per category.
inline std::vector<std::string> bars(const std::filesystem::path& dir, const std::string& stem, const std::string& title,
                                     const std::vector<std::string>& categories, const std::vector<Series>& series) {
    if (categories.empty() || series.empty()) throw PreconditionError("bar chart needs data");
    double lo = 0.0, hi = 0.0;
    for (const auto& s : series) {
        if (s.values.size() != categories.size()) throw PreconditionError("bar series length mismatch");
        lo = std::min(lo, *std::min_element(s.values.begin(), s.values.end()));
        hi = std::max(hi, *std::max_element(s.values.begin(), s.values.end()));
    }
    auto [ya, yb] = padded_range(lo, hi);
    Svg svg(680, 380);
    Axes ax{70, 40, 580, 280, 0.0, static_cast<double>(categories.size()), ya, yb};
    svg.text(360, 24, title, 13);
    ax.draw(svg, "", "", false);
    for (int k = 0; k <= 4; ++k) {
        double fy = ya + (yb - ya) * k / 4.0;
        svg.text(ax.left - 6, ax.py(fy) + 3, strprintf("%.3g", fy), 9, "end");
    }
    svg.line(ax.left, ax.py(0.0), ax.left + ax.width, ax.py(0.0), "#444444");
    double group = ax.width / static_cast<double>(categories.size());
    double bw = 0.8 * group / static_cast<double>(series.size());
    for (std::size_t c = 0; c < categories.size(); ++c) {
        for (std::size_t k = 0; k < series.size(); ++k) {
            double v = series[k].values[c];
            double x = ax.left + group * static_cast<double>(c) + 0.1 * group + bw * static_cast<double>(k);
            double y0 = ax.py(0.0), y1 = ax.py(v);
            svg.rect(x, std::min(y0, y1), bw, std::abs(y1 - y0), palette(k), "none", "bar");
        }
        svg.text(ax.left + group * (static_cast<double>(c) + 0.5), ax.top + ax.height + 16, categories[c], 10);
    }
    for (std::size_t k = 0; k < series.size(); ++k) {
        svg.rect(ax.left + 10 + 110 * static_cast<double>(k), 48, 10, 10, palette(k));
        svg.text(ax.left + 24 + 110 * static_cast<double>(k), 57, series[k].name, 10, "start");
    }
    std::ostringstream csv;
    csv << "category";
    for (const auto& s : series) csv << ',' << s.name;
    csv << '\n';
    for (std::size_t c = 0; c < categories.size(); ++c) {
        csv << categories[c];
        for (const auto& s : series) csv << ',' << format_exact(s.values[c]);
        csv << '\n';
    }
    write_text(dir / (stem + ".svg"), svg.str());
    write_text(dir / (stem + ".csv"), csv.str());
    return {stem + ".svg", stem + ".csv"};
}

/// Lower-triangular grid: marginal histograms on the diagonal, pairwise
/// scatter below it.
inline std::vector<std::string> pairs(const std::filesystem::path& dir, const std::string& stem,
                                      const Eigen::MatrixXd& samples, const std::vector<std::string>& names,
                                      int bins = 20, std::size_t max_points = 500) {
    if (samples.rows() == 0) throw PreconditionError("pairs plot needs a non-empty chain");
    const auto d = samples.cols();
    if (static_cast<std::size_t>(d) != names.size()) throw PreconditionError("pairs plot needs one name per column");
    const double cell = 110.0, margin = 60.0;
    Svg svg(margin + cell * static_cast<double>(d) + 20, margin + cell * static_cast<double>(d) + 20);
    std::vector<std::pair<double, double>> range(static_cast<std::size_t>(d));
    for (Eigen::Index j = 0; j < d; ++j) range[static_cast<std::size_t>(j)] = padded_range(samples.col(j).minCoeff(), samples.col(j).maxCoeff());
    std::size_t stride = std::max<std::size_t>(1, static_cast<std::size_t>(samples.rows()) / max_points);
    for (Eigen::Index r = 0; r < d; ++r) {
        for (Eigen::Index c = 0; c <= r; ++c) {
            double left = margin + cell * static_cast<double>(c), top = 20 + cell * static_cast<double>(r);
            const auto& xr = range[static_cast<std::size_t>(c)];
            if (r == c) {
                std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
                for (Eigen::Index i = 0; i < samples.rows(); ++i) {
                    int b = static_cast<int>((samples(i, c) - xr.first) / (xr.second - xr.first) * bins);
                    counts[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))] += 1.0;
                }
                double peak = *std::max_element(counts.begin(), counts.end());
                Axes ax{left + 4, top + 4, cell - 8, cell - 8, xr.first, xr.second, 0.0, peak * 1.05};
                svg.open_group("panel diag", names[static_cast<std::size_t>(r)]);
                ax.draw(svg, "", "", false);
                double bw = (cell - 8) / bins;
                for (int b = 0; b < bins; ++b)
                    svg.rect(ax.left + bw * b, ax.py(counts[static_cast<std::size_t>(b)]), bw,
                             ax.top + ax.height - ax.py(counts[static_cast<std::size_t>(b)]), "#1f77b4", "none", "bar");
                svg.close_group();
            } else {
                const auto& yr = range[static_cast<std::size_t>(r)];
                Axes ax{left + 4, top + 4, cell - 8, cell - 8, xr.first, xr.second, yr.first, yr.second};
                svg.open_group("panel offdiag", names[static_cast<std::size_t>(c)] + " vs " + names[static_cast<std::size_t>(r)]);
                ax.draw(svg, "", "", false);
                for (Eigen::Index i = 0; i < samples.rows(); i += static_cast<Eigen::Index>(stride))
                    svg.circle(ax.px(samples(i, c)), ax.py(samples(i, r)), 1.2, "#1f77b4");
                svg.close_group();
            }
        }
        svg.text(margin + cell * static_cast<double>(r) + cell / 2, margin + cell * static_cast<double>(d) + 10,
                 names[static_cast<std::size_t>(r)], 10);
        svg.text(margin - 6, 20 + cell * static_cast<double>(r) + cell / 2, names[static_cast<std::size_t>(r)], 10, "end");
    }
    std::ostringstream csv;
    for (std::size_t j = 0; j < names.size(); ++j) csv << (j ? "," : "") << names[j];
    csv << '\n';
    for (Eigen::Index i = 0; i < samples.rows(); ++i) {
        for (Eigen::Index j = 0; j < d; ++j) csv << (j ? "," : "") << format_exact(samples(i, j));
        csv << '\n';
    }
    write_text(dir / (stem + ".svg"), svg.str());
    write_text(dir / (stem + ".csv"), csv.str());
    return {stem + ".svg", stem + ".csv"};
}

} // namespace meltcal::plot

#endif // MELTCAL_PLOTS_HPP
