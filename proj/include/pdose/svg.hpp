#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pdose/error.hpp"

// Minimal static SVG charts: line charts with shaded bands and heatmaps.

namespace pdose::plot {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::string colour = "#1f77b4";
  bool dashed = false;
};

struct Band {
  std::string label;
  std::vector<double> x, lo, hi;
  std::string colour = "#1f77b4";
  double opacity = 0.2;
};

/// Step outline of a histogram given bin edges and per-bin heights.
inline Series step_series(std::string label, const std::vector<double>& edges, const std::vector<double>& heights,
                          std::string colour) {
  Series s{std::move(label), {}, {}, std::move(colour), false};
  for (std::size_t i = 0; i < heights.size(); ++i) {
    s.x.push_back(edges[i]);
    s.y.push_back(heights[i]);
    s.x.push_back(edges[i + 1]);
    s.y.push_back(heights[i]);
  }
  return s;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

inline std::array<double, 3> viridis(double t) {
  static constexpr std::array<std::array<double, 3>, 6> anchors{{{0.267, 0.005, 0.329},
                                                                  {0.254, 0.265, 0.530},
                                                                  {0.164, 0.471, 0.558},
                                                                  {0.135, 0.659, 0.518},
                                                                  {0.478, 0.821, 0.318},
                                                                  {0.993, 0.906, 0.144}}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * (anchors.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), anchors.size() - 2);
  const double f = t - static_cast<double>(i);
  std::array<double, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = anchors[i][k] * (1 - f) + anchors[i + 1][k] * f;
  return c;
}

inline std::string rgb(const std::array<double, 3>& c) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(c[0] * 255 + 0.5), static_cast<int>(c[1] * 255 + 0.5),
                static_cast<int>(c[2] * 255 + 0.5));
  return buf;
}

inline std::vector<double> ticks(double lo, double hi, int target = 5) {
  std::vector<double> t;
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
  return t;
}

inline void save(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

}  // namespace detail

struct LineChart {
  std::string title, xlabel, ylabel;
  bool logx = false, logy = false;
  std::vector<Band> bands;
  std::vector<Series> series;
  int width = 720, height = 440;

  std::string svg() const {
    const double ml = 70, mr = 20, mt = 36, mb = 52;
    auto tx = [&](double v) { return logx ? std::log10(v) : v; };
    auto ty = [&](double v) { return logy ? std::log10(v) : v; };
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    auto extend = [&](const std::vector<double>& xs, const std::vector<double>& ys) {
      for (std::size_t i = 0; i < xs.size() && i < ys.size(); ++i) {
        const double a = tx(xs[i]), b = ty(ys[i]);
        if (!std::isfinite(a) || !std::isfinite(b)) continue;
        x0 = std::min(x0, a), x1 = std::max(x1, a), y0 = std::min(y0, b), y1 = std::max(y1, b);
      }
    };
    for (const auto& b : bands) extend(b.x, b.lo), extend(b.x, b.hi);
    for (const auto& s : series) extend(s.x, s.y);
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    const double pad = 0.04 * (y1 - y0);
    y0 -= pad, y1 += pad;
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto px = [&](double v) { return ml + (tx(v) - x0) / (x1 - x0) * pw; };
    auto py = [&](double v) { return mt + ph - (ty(v) - y0) / (y1 - y0) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << detail::escape(title)
      << "</text>\n";
    o << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double t : detail::ticks(x0, x1)) {
      const double X = ml + (t - x0) / (x1 - x0) * pw;
      o << "<line x1=\"" << X << "\" y1=\"" << mt + ph << "\" x2=\"" << X << "\" y2=\"" << mt + ph + 5
        << "\" stroke=\"black\"/><text x=\"" << X << "\" y=\"" << mt + ph + 18 << "\" text-anchor=\"middle\">"
        << detail::fmt(logx ? std::pow(10.0, t) : t) << "</text>\n";
    }
    for (double t : detail::ticks(y0, y1)) {
      const double Y = mt + ph - (t - y0) / (y1 - y0) * ph;
      o << "<line x1=\"" << ml - 5 << "\" y1=\"" << Y << "\" x2=\"" << ml << "\" y2=\"" << Y
        << "\" stroke=\"black\"/><text x=\"" << ml - 8 << "\" y=\"" << Y + 4 << "\" text-anchor=\"end\">"
        << detail::fmt(logy ? std::pow(10.0, t) : t) << "</text>\n";
    }
    o << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\">"
      << detail::escape(xlabel) << "</text>\n";
    o << "<text transform=\"translate(16," << mt + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << detail::escape(ylabel) << "</text>\n";

    auto finite = [&](double a, double b) { return std::isfinite(tx(a)) && std::isfinite(ty(b)); };
    for (const auto& b : bands) {
      o << "<path fill=\"" << b.colour << "\" fill-opacity=\"" << b.opacity << "\" stroke=\"none\" d=\"";
      bool first = true;
      for (std::size_t i = 0; i < b.x.size(); ++i) {
        if (!finite(b.x[i], b.hi[i])) continue;
        o << (first ? 'M' : 'L') << px(b.x[i]) << ',' << py(b.hi[i]) << ' ';
        first = false;
      }
      for (std::size_t i = b.x.size(); i-- > 0;) {
        if (!finite(b.x[i], b.lo[i])) continue;
        o << 'L' << px(b.x[i]) << ',' << py(b.lo[i]) << ' ';
      }
      o << "Z\"/>\n";
    }
    for (const auto& s : series) {
      o << "<path fill=\"none\" stroke=\"" << s.colour << "\" stroke-width=\"1.6\""
        << (s.dashed ? " stroke-dasharray=\"6,4\"" : "") << " d=\"";
      bool pen = false;
      for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
        if (!finite(s.x[i], s.y[i])) {
          pen = false;
          continue;
        }
        o << (pen ? 'L' : 'M') << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
        pen = true;
      }
      o << "\"/>\n";
    }
    double ly = mt + 14;
    std::vector<std::pair<std::string, std::string>> legend;
    for (const auto& b : bands)
      if (!b.label.empty()) legend.emplace_back(b.label, b.colour);
    for (const auto& s : series)
      if (!s.label.empty()) legend.emplace_back(s.label, s.colour);
    for (const auto& [label, colour] : legend) {
      o << "<rect x=\"" << ml + pw - 170 << "\" y=\"" << ly - 9 << "\" width=\"14\" height=\"10\" fill=\"" << colour
        << "\"/><text x=\"" << ml + pw - 150 << "\" y=\"" << ly << "\">" << detail::escape(label) << "</text>\n";
      ly += 16;
    }
    o << "</svg>\n";
    return o.str();
  }

  void write(const std::filesystem::path& path) const { detail::save(path, svg()); }
};

/// values[ix + nx * iy]; iy = 0 is drawn at the bottom.
struct Heatmap {
  std::string title, xlabel, ylabel;
  std::size_t nx = 0, ny = 0;
  std::vector<double> values;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  std::optional<double> vmin, vmax;
  int width = 760;

  std::string svg() const {
    if (values.size() != nx * ny || nx == 0 || ny == 0) throw ShapeError("heatmap: value count mismatch");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : values)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    if (vmin) lo = *vmin;
    if (vmax) hi = *vmax;
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (!(hi > lo)) hi = lo + 1;
    const double ml = 60, mr = 90, mt = 36, mb = 48;
    const double pw = width - ml - mr;
    const double ph = std::clamp(pw * (y1 - y0) / (x1 - x0), 80.0, 600.0);
    const int height = static_cast<int>(mt + ph + mb);
    const double cw = pw / static_cast<double>(nx), ch = ph / static_cast<double>(ny);

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\" shape-rendering=\"crispEdges\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << detail::escape(title)
      << "</text>\n";
    for (std::size_t iy = 0; iy < ny; ++iy)
      for (std::size_t ix = 0; ix < nx; ++ix) {
        const double v = values[ix + nx * iy];
        o << "<rect x=\"" << ml + ix * cw << "\" y=\"" << mt + ph - (iy + 1) * ch << "\" width=\"" << cw + 0.05
          << "\" height=\"" << ch + 0.05 << "\" fill=\"" << detail::rgb(detail::viridis((v - lo) / (hi - lo)))
          << "\"/>";
      }
    o << "\n<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double t : detail::ticks(x0, x1)) {
      const double X = ml + (t - x0) / (x1 - x0) * pw;
      o << "<text x=\"" << X << "\" y=\"" << mt + ph + 16 << "\" text-anchor=\"middle\">" << detail::fmt(t) << "</text>";
    }
    for (double t : detail::ticks(y0, y1, 4)) {
      const double Y = mt + ph - (t - y0) / (y1 - y0) * ph;
      o << "<text x=\"" << ml - 6 << "\" y=\"" << Y + 4 << "\" text-anchor=\"end\">" << detail::fmt(t) << "</text>";
    }
    o << "\n<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">"
      << detail::escape(xlabel) << "</text>\n";
    o << "<text transform=\"translate(14," << mt + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << detail::escape(ylabel) << "</text>\n";
    const int steps = 32;
    const double bx = ml + pw + 20, bh = ph / steps;
    for (int s = 0; s < steps; ++s)
      o << "<rect x=\"" << bx << "\" y=\"" << mt + ph - (s + 1) * bh << "\" width=\"16\" height=\"" << bh + 0.05
        << "\" fill=\"" << detail::rgb(detail::viridis((s + 0.5) / steps)) << "\"/>";
    o << "\n<text x=\"" << bx + 20 << "\" y=\"" << mt + 10 << "\">" << detail::fmt(hi) << "</text>";
    o << "<text x=\"" << bx + 20 << "\" y=\"" << mt + ph << "\">" << detail::fmt(lo) << "</text>\n";
    o << "</svg>\n";
    return o.str();
  }

  void write(const std::filesystem::path& path) const { detail::save(path, svg()); }
};

}  // namespace pdose::plot
