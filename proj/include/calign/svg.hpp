#pragma once

// Minimal deterministic SVG emitters for line charts, heatmaps and bar charts.
// Coordinates are printed with two decimals so output is stable byte-for-byte.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "calign/errors.hpp"

namespace calign::svg {

struct Series {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

struct Heatmap {
  std::string title;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::optional<double>> cells;  // row-major, nullopt = missing
};

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<std::string> labels;
  std::vector<double> means;
  std::vector<double> stds;
  std::optional<double> parity;  // dashed reference line
};

namespace detail {

inline std::string num(double x) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  std::string s = buf;
  return s == "-0.00" ? "0.00" : s;
}

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

inline void check_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw NumericError(std::string("svg: non-finite ") + what);
}

inline std::string open(double w, double h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) +
         "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
}

inline std::string text(double x, double y, const std::string& s, const char* anchor = "middle",
                        const std::string& extra = "") {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\"" + extra + ">" + escape(s) +
         "</text>\n";
}

inline std::string line(double x1, double y1, double x2, double y2, const std::string& style) {
  return "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) + "\" " + style +
         "/>\n";
}

// Padded [lo, hi] covering the data; a flat range is widened to unit height.
inline std::pair<double, double> range(double lo, double hi) {
  if (hi - lo < 1e-12) return {lo - 0.5, hi + 0.5};
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

}  // namespace detail

inline std::string render(const LineChart& c) {
  using namespace detail;
  if (c.series.empty()) throw UsageError("svg: line chart has no series");
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const Series& s : c.series) {
    if (s.xs.empty() || s.xs.size() != s.ys.size()) throw UsageError("svg: series '" + s.name + "' is empty or ragged");
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      check_finite(s.xs[i], "x value");
      check_finite(s.ys[i], "y value");
      x0 = std::min(x0, s.xs[i]);
      x1 = std::max(x1, s.xs[i]);
      y0 = std::min(y0, s.ys[i]);
      y1 = std::max(y1, s.ys[i]);
    }
  }
  std::tie(x0, x1) = range(x0, x1);
  std::tie(y0, y1) = range(y0, y1);
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::string out = open(W, H);
  out += text(W / 2, 24, c.title);
  out += line(L, H - B, W - R, H - B, "stroke=\"#000\"");
  out += line(L, T, L, H - B, "stroke=\"#000\"");
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    out += text(px(xv), H - B + 16, num(xv));
    out += text(L - 6, py(yv) + 4, num(yv), "end");
  }
  out += text((L + W - R) / 2, H - 12, c.x_label);
  out += text(18, (T + H - B) / 2, c.y_label, "middle", " transform=\"rotate(-90 18 " + num((T + H - B) / 2) + ")\"");
  for (std::size_t k = 0; k < c.series.size(); ++k) {
    const Series& s = c.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.xs.size(); ++i) out += (i ? " " : "") + num(px(s.xs[i])) + "," + num(py(s.ys[i]));
    out += "\"/>\n";
    const double ly = T + 16.0 * static_cast<double>(k);
    out += line(W - R + 10, ly, W - R + 30, ly, "stroke=\"" + std::string(color) + "\" stroke-width=\"2\"");
    out += text(W - R + 36, ly + 4, s.name, "start");
  }
  return out + "</svg>\n";
}

inline std::string render(const Heatmap& h) {
  using namespace detail;
  const std::size_t n = h.row_labels.size(), m = h.col_labels.size();
  if (n == 0 || m == 0) throw UsageError("svg: heatmap has no rows or columns");
  if (h.cells.size() != n * m) throw UsageError("svg: heatmap cell count does not match labels");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& c : h.cells) {
    if (!c) continue;
    check_finite(*c, "cell");
    lo = std::min(lo, *c);
    hi = std::max(hi, *c);
  }
  const double cell = 64, L = 140, T = 110;
  const double W = L + cell * static_cast<double>(m) + 20, H = T + cell * static_cast<double>(n) + 20;
  std::string out = open(W, H);
  out += text(W / 2, 24, h.title);
  for (std::size_t j = 0; j < m; ++j) {
    const double x = L + cell * (static_cast<double>(j) + 0.5);
    out += text(x, T - 8, h.col_labels[j], "start", " transform=\"rotate(-45 " + num(x) + " " + num(T - 8) + ")\"");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double y = T + cell * static_cast<double>(i);
    out += text(L - 8, y + cell / 2 + 4, h.row_labels[i], "end");
    for (std::size_t j = 0; j < m; ++j) {
      const double x = L + cell * static_cast<double>(j);
      const auto& c = h.cells[i * m + j];
      std::string fill = "#dddddd";
      if (c) {
        const double t = hi > lo ? (*c - lo) / (hi - lo) : 0.5;
        const int r = static_cast<int>(std::lround(255 - 224 * t)), g = static_cast<int>(std::lround(255 - 136 * t)),
                  b = static_cast<int>(std::lround(255 - 75 * t));
        char buf[8];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
        fill = buf;
      }
      out += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(cell) + "\" height=\"" + num(cell) +
             "\" fill=\"" + fill + "\" stroke=\"#ffffff\"/>\n";
      out += text(x + cell / 2, y + cell / 2 + 4, c ? num(*c) : "-");
    }
  }
  return out + "</svg>\n";
}

inline std::string render(const BarChart& b) {
  using namespace detail;
  const std::size_t n = b.labels.size();
  if (n == 0) throw UsageError("svg: bar chart has no bars");
  if (b.means.size() != n || b.stds.size() != n) throw UsageError("svg: bar chart series lengths differ");
  double hi = b.parity.value_or(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    check_finite(b.means[i], "bar");
    check_finite(b.stds[i], "error bar");
    if (b.stds[i] < 0.0) throw UsageError("svg: negative standard deviation");
    hi = std::max(hi, b.means[i] + b.stds[i]);
  }
  hi = hi > 0.0 ? 1.1 * hi : 1.0;
  const double slot = 90, L = 70, T = 40, B = 60, H = 400;
  const double W = L + slot * static_cast<double>(n) + 30;
  auto py = [&](double y) { return H - B - std::max(0.0, y) / hi * (H - T - B); };
  std::string out = open(W, H);
  out += text(W / 2, 24, b.title);
  out += line(L, H - B, W - 20, H - B, "stroke=\"#000\"");
  out += line(L, T, L, H - B, "stroke=\"#000\"");
  for (int i = 0; i <= 4; ++i) out += text(L - 6, py(hi * i / 4.0) + 4, num(hi * i / 4.0), "end");
  out += text(18, (T + H - B) / 2, b.y_label, "middle", " transform=\"rotate(-90 18 " + num((T + H - B) / 2) + ")\"");
  for (std::size_t i = 0; i < n; ++i) {
    const double x = L + slot * static_cast<double>(i) + 20, w = slot - 40, cx = x + w / 2;
    out += "<rect x=\"" + num(x) + "\" y=\"" + num(py(b.means[i])) + "\" width=\"" + num(w) + "\" height=\"" +
           num(H - B - py(b.means[i])) + "\" fill=\"#1f77b4\"/>\n";
    const double top = py(b.means[i] + b.stds[i]), bot = py(b.means[i] - b.stds[i]);
    out += line(cx, top, cx, bot, "stroke=\"#000\"");
    out += line(cx - 8, top, cx + 8, top, "stroke=\"#000\"");
    out += line(cx - 8, bot, cx + 8, bot, "stroke=\"#000\"");
    out += text(cx, H - B + 16, b.labels[i]);
  }
  if (b.parity) {
    out += line(L, py(*b.parity), W - 20, py(*b.parity), "stroke=\"#d62728\" stroke-dasharray=\"6 4\"");
  }
  return out + "</svg>\n";
}

}  // namespace calign::svg
