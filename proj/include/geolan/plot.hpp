// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal SVG line plots (metric vs layer).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "geolan/io.hpp"

namespace geolan {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

inline std::string svg_line_plot(const std::string& title, const std::vector<Series>& series, int width = 480,
                                 int height = 320) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double ml = 60, mr = 20, mt = 30, mb = 40;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (width - ml - mr); };
  auto py = [&](double y) { return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb); };
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n",
                width, height);
  out += buf;
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"18\">%s</text>\n", ml, title.c_str());
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n"
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n",
                ml, height - mb, width - mr, height - mb, ml, mt, ml, height - mb);
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\">%.4g</text>\n<text x=\"%g\" y=\"%g\">%.4g</text>\n"
                "<text x=\"%g\" y=\"%g\">%.4g</text>\n<text x=\"%g\" y=\"%g\">%.4g</text>\n",
                4.0, py(y0), y0, 4.0, py(y1) + 4, y1, ml, height - mb + 16, x0, width - mr - 20.0, height - mb + 16,
                x1);
  out += buf;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(s.x[i]), py(s.y[i]));
      pts += buf;
    }
    const char* c = colors[k % 6];
    out += "<polyline fill=\"none\" stroke=\"" + std::string(c) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" fill=\"%s\">%s</text>\n", width - mr - 120.0,
                  mt + 14.0 * static_cast<double>(k), c, s.label.c_str());
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

inline void write_svg(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series) {
  detail::write_file(path, svg_line_plot(title, series));
}

}  // namespace geolan
