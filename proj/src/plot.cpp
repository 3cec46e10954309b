#include "fwvit/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>

#include "fwvit/container.hpp"
#include "fwvit/errors.hpp"
#include "fwvit/text.hpp"

namespace fwvit {

namespace {

constexpr double kWidth = 720, kHeight = 440;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 55;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fixed(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
  std::string s(buf, r.ptr);
  return s == "-0.00" ? "0.00" : s;
}

std::string tick_label(double v) {
  if (std::abs(v) < 1e-12) return "0";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 4);
  return std::string(buf, r.ptr);
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

std::pair<double, double> padded_range(double lo, double hi) {
  if (hi - lo < 1e-12) {
    const double pad = std::max(std::abs(lo) * 0.05, 0.5);
    return {lo - pad, hi + pad};
  }
  const double pad = (hi - lo) * 0.05;
  return {lo - pad, hi + pad};
}

std::string group_label(const PlotRequest& request, const MetricRow& r) {
  if (request.grouping == Grouping::layer) return r.layer < 0 ? "all" : "layer " + std::to_string(r.layer);
  return r.noise < 0 ? "noisy mean" : "noise " + format_number(r.noise);
}

}  // namespace

std::string render_svg(const std::vector<PlotLine>& lines, const PlotLayout& layout) {
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  bool any = false;
  for (const auto& line : lines) {
    for (const auto& [x, y] : line.points) {
      if (!any) {
        x0 = x1 = x;
        y0 = y1 = y;
        any = true;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!any) throw DataError("render_svg: nothing to plot");
  std::tie(x0, x1) = padded_range(x0, x1);
  std::tie(y0, y1) = padded_range(y0, y1);
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(kWidth) + "\" height=\"" + fixed(kHeight) +
       "\" viewBox=\"0 0 " + fixed(kWidth) + " " + fixed(kHeight) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + fixed(kLeft) + "\" y=\"24\" font-size=\"14\">" + escape(layout.title) + "</text>\n";
  s += "<rect x=\"" + fixed(kLeft) + "\" y=\"" + fixed(kTop) + "\" width=\"" + fixed(pw) + "\" height=\"" + fixed(ph) +
       "\" fill=\"none\" stroke=\"black\"/>\n";

  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    const double xv = x0 + (x1 - x0) * i / kTicks, yv = y0 + (y1 - y0) * i / kTicks;
    const double px = sx(xv), py = sy(yv);
    s += "<line class=\"tick\" x1=\"" + fixed(px) + "\" y1=\"" + fixed(kTop + ph) + "\" x2=\"" + fixed(px) +
         "\" y2=\"" + fixed(kTop + ph + 5) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + fixed(px) + "\" y=\"" + fixed(kTop + ph + 18) + "\" text-anchor=\"middle\">" +
         tick_label(xv) + "</text>\n";
    s += "<line class=\"tick\" x1=\"" + fixed(kLeft - 5) + "\" y1=\"" + fixed(py) + "\" x2=\"" + fixed(kLeft) +
         "\" y2=\"" + fixed(py) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + fixed(kLeft - 8) + "\" y=\"" + fixed(py + 4) + "\" text-anchor=\"end\">" + tick_label(yv) +
         "</text>\n";
  }
  s += "<text x=\"" + fixed(kLeft + pw / 2) + "\" y=\"" + fixed(kHeight - 12) + "\" text-anchor=\"middle\">" +
       escape(layout.x_label) + "</text>\n";
  s += "<text x=\"16\" y=\"" + fixed(kTop + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       fixed(kTop + ph / 2) + ")\">" + escape(layout.y_label) + "</text>\n";

  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    const std::string color = kPalette[line.color % std::size(kPalette)];
    std::string pts;
    for (const auto& [x, y] : line.points) {
      if (!pts.empty()) pts += ' ';
      pts += fixed(sx(x)) + "," + fixed(sy(y));
    }
    s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"" +
         (line.dashed ? " stroke-dasharray=\"5,3\"" : "") + " points=\"" + pts + "\"/>\n";
    if (line.points.size() == 1) {
      s += "<circle cx=\"" + fixed(sx(line.points[0].first)) + "\" cy=\"" + fixed(sy(line.points[0].second)) +
           "\" r=\"3\" fill=\"" + color + "\"/>\n";
    }
    const double ly = kTop + 10 + 16.0 * static_cast<double>(i);
    const double lx = kLeft + pw + 12;
    s += "<line x1=\"" + fixed(lx) + "\" y1=\"" + fixed(ly) + "\" x2=\"" + fixed(lx + 20) + "\" y2=\"" + fixed(ly) +
         "\" stroke=\"" + color + "\" stroke-width=\"1.5\"" + (line.dashed ? " stroke-dasharray=\"5,3\"" : "") +
         "/>\n";
    s += "<text x=\"" + fixed(lx + 26) + "\" y=\"" + fixed(ly + 4) + "\">" + escape(line.label) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::vector<PlotLine> series_lines(const MetricSeries& series, const PlotRequest& request) {
  MetricSeries sel = series.select(request.metric);
  sel.sort();
  // Group key -> line, in canonical order of the group value.
  std::map<double, PlotLine> groups;
  for (const auto& r : sel.rows) {
    double key = 0;
    if (request.grouping == Grouping::layer) {
      if (r.noise != request.noise) continue;
      key = r.layer;
    } else {
      if (r.layer != request.layer) continue;
      key = r.noise;
    }
    auto& line = groups[key];
    line.label = group_label(request, r);
    line.points.emplace_back(static_cast<double>(r.epoch), r.value);
  }
  std::vector<PlotLine> out;
  for (auto& [key, line] : groups) {
    line.color = out.size();
    std::sort(line.points.begin(), line.points.end());
    out.push_back(std::move(line));
  }
  return out;
}

void emit_svg_lineplot(const MetricSeries& series, const PlotRequest& request, const std::filesystem::path& path) {
  const auto lines = series_lines(series, request);
  if (lines.empty()) throw DataError("no rows for metric '" + request.metric + "'");
  write_file_atomic(path, render_svg(lines, {.title = request.metric, .x_label = "epoch", .y_label = request.metric}));
}

void emit_svg_overlay(const MetricSeries& a, const std::string& label_a, const MetricSeries& b,
                      const std::string& label_b, const PlotRequest& request, const std::filesystem::path& path) {
  auto la = series_lines(a, request);
  auto lb = series_lines(b, request);
  if (la.empty() && lb.empty()) throw DataError("no rows for metric '" + request.metric + "'");
  std::vector<PlotLine> lines;
  for (std::size_t i = 0; i < std::max(la.size(), lb.size()); ++i) {
    if (i < la.size()) {
      la[i].label += " " + label_a;
      lines.push_back(la[i]);
    }
    if (i < lb.size()) {
      lb[i].label += " " + label_b;
      lb[i].dashed = true;
      lines.push_back(lb[i]);
    }
  }
  write_file_atomic(path, render_svg(lines, {.title = request.metric + ": " + label_a + " vs " + label_b,
                                             .x_label = "epoch",
                                             .y_label = request.metric}));
}

}  // namespace fwvit
