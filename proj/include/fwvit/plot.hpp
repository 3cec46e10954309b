#pragma once

// Self-contained SVG line charts with byte-deterministic output.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fwvit/analysis.hpp"

namespace fwvit {

struct PlotLine {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y), drawn in order
  bool dashed = false;
  std::size_t color = 0;  // palette index
};

struct PlotLayout {
  std::string title;
  std::string x_label = "epoch";
  std::string y_label;
};

// One polyline per line; a line with a single point also gets a marker.
std::string render_svg(const std::vector<PlotLine>& lines, const PlotLayout& layout);

enum class Grouping { layer, noise };

struct PlotRequest {
  std::string metric;
  Grouping grouping = Grouping::layer;
  double noise = -1.0;  // the fixed noise when grouping by layer
  int layer = -1;       // the fixed layer when grouping by noise
};

// Metric value against epoch, one line per group.
std::vector<PlotLine> series_lines(const MetricSeries& series, const PlotRequest& request);

// Throws DataError when no row matches.
void emit_svg_lineplot(const MetricSeries& series, const PlotRequest& request, const std::filesystem::path& path);

// Two lines per group: `a` solid, `b` dashed, same color.
void emit_svg_overlay(const MetricSeries& a, const std::string& label_a, const MetricSeries& b,
                      const std::string& label_b, const PlotRequest& request, const std::filesystem::path& path);

}  // namespace fwvit
