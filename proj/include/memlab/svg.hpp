#pragma once

// Minimal SVG line plots. Output depends only on the data, so reruns are
// byte-identical.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace memlab {

struct Series {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

/// Dashed horizontal reference line.
struct Baseline {
  std::string label;
  double y = 0.0;
};

struct PlotSpec {
  std::string title;
  std::string xlabel = "epoch";
  std::string ylabel;
  std::vector<Series> series;
  std::vector<Baseline> baselines;
  int width = 640;
  int height = 400;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % 8];
}

}  // namespace detail

inline std::string svg_line_plot(const PlotSpec& spec) {
  const double W = spec.width, H = spec.height;
  const double left = 64, right = 150, top = 36, bottom = 48;
  const double pw = W - left - right, ph = H - top - bottom;

  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : spec.series)
    for (std::size_t i = 0; i < s.xs.size() && i < s.ys.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      xmin = std::min(xmin, s.xs[i]);
      xmax = std::max(xmax, s.xs[i]);
      ymin = std::min(ymin, s.ys[i]);
      ymax = std::max(ymax, s.ys[i]);
    }
  for (const auto& b : spec.baselines) {
    ymin = std::min(ymin, b.y);
    ymax = std::max(ymax, b.y);
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1;
  if (!std::isfinite(ymin)) ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  auto X = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto Y = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };
  using detail::fmt;

  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(spec.width) + "\" height=\"" +
       std::to_string(spec.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + fmt(left + pw / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
       detail::xml_escape(spec.title) + "</text>\n";
  o += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(pw) + "\" height=\"" + fmt(ph) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmin + (xmax - xmin) * t / 4.0, yv = ymin + (ymax - ymin) * t / 4.0;
    o += "<text x=\"" + fmt(X(xv)) + "\" y=\"" + fmt(top + ph + 16) + "\" text-anchor=\"middle\">" +
         detail::tick_label(xv) + "</text>\n";
    o += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(Y(yv) + 4) + "\" text-anchor=\"end\">" +
         detail::tick_label(yv) + "</text>\n";
  }
  o += "<text x=\"" + fmt(left + pw / 2) + "\" y=\"" + fmt(H - 10) + "\" text-anchor=\"middle\">" +
       detail::xml_escape(spec.xlabel) + "</text>\n";
  o += "<text x=\"16\" y=\"" + fmt(top + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       fmt(top + ph / 2) + ")\">" + detail::xml_escape(spec.ylabel) + "</text>\n";

  double ly = top + 10;
  for (const auto& b : spec.baselines) {
    o += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(Y(b.y)) + "\" x2=\"" + fmt(left + pw) + "\" y2=\"" + fmt(Y(b.y)) +
         "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
    o += "<text x=\"" + fmt(left + pw + 8) + "\" y=\"" + fmt(ly) + "\" fill=\"gray\">-- " + detail::xml_escape(b.label) +
         "</text>\n";
    ly += 16;
  }
  for (std::size_t k = 0; k < spec.series.size(); ++k) {
    const auto& s = spec.series[k];
    std::string pts;
    bool pen = false;
    for (std::size_t i = 0; i < s.xs.size() && i < s.ys.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) {
        pen = false;
        continue;
      }
      pts += (pen ? " L" : " M") + fmt(X(s.xs[i])) + " " + fmt(Y(s.ys[i]));
      pen = true;
    }
    if (!pts.empty())
      o += "<path d=\"" + pts.substr(1) + "\" fill=\"none\" stroke=\"" + detail::palette(k) + "\" stroke-width=\"1.5\"/>\n";
    o += "<text x=\"" + fmt(left + pw + 8) + "\" y=\"" + fmt(ly) + "\" fill=\"" + detail::palette(k) + "\">" +
         detail::xml_escape(s.name) + "</text>\n";
    ly += 16;
  }
  o += "</svg>\n";
  return o;
}

}  // namespace memlab
