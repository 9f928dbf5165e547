#include "iclprobe/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <vector>

#include "iclprobe/errors.hpp"

namespace iclprobe {

std::string_view to_string(PlotKind kind) {
  switch (kind) {
    case PlotKind::curve: return "curve";
    case PlotKind::heatmap: return "heatmap";
    case PlotKind::separation: return "separation";
  }
  return "curve";
}

PlotKind parse_plot_kind(std::string_view s) {
  if (s == "curve") return PlotKind::curve;
  if (s == "heatmap") return PlotKind::heatmap;
  if (s == "separation") return PlotKind::separation;
  throw ConfigError("unknown plot kind \"" + std::string(s) + "\" (expected curve, heatmap or separation)");
}

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 64, kRight = 160, kTop = 40, kBottom = 52;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s(buf);
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string escape(const std::string& s) {
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

double parse_number(const std::string& cell, const std::string& column, std::size_t row) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("column " + column + " is not numeric: \"" + cell + "\"", static_cast<int>(row) + 2);
  }
}

void require_columns(const CsvTable& t, PlotKind kind, std::initializer_list<const char*> names) {
  if (t.header.empty() && t.rows.empty()) return;  // empty file
  for (const char* n : names) {
    if (t.column(n) < 0) {
      throw ConfigError("csv is missing column \"" + std::string(n) + "\" required by the " +
                        std::string(to_string(kind)) + " plot");
    }
  }
}

struct Svg {
  std::string body;

  void open(const std::string& title) {
    body += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    body += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) +
            "\" viewBox=\"0 0 " + num(kWidth) + " " + num(kHeight) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    body += "<rect x=\"0\" y=\"0\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) + "\" fill=\"white\"/>\n";
    if (!title.empty()) text(kWidth / 2, 22, title, "middle", 13);
  }
  void close() { body += "</svg>\n"; }
  void text(double x, double y, const std::string& s, const char* anchor = "start", int size = 11) {
    body += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\" font-size=\"" +
            std::to_string(size) + "\">" + escape(s) + "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2, const char* stroke = "black", double width = 1) {
    body += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) +
            "\" stroke=\"" + stroke + "\" stroke-width=\"" + num(width) + "\"/>\n";
  }
};

struct Axes {
  double x0, x1, y0, y1;  // data ranges
  double px0 = kLeft, px1 = kWidth - kRight, py0 = kHeight - kBottom, py1 = kTop;

  double sx(double x) const { return x1 == x0 ? (px0 + px1) / 2 : px0 + (x - x0) / (x1 - x0) * (px1 - px0); }
  double sy(double y) const { return y1 == y0 ? (py0 + py1) / 2 : py0 + (y - y0) / (y1 - y0) * (py1 - py0); }

  void draw(Svg& svg, const std::string& xlabel, const std::string& ylabel) const {
    svg.line(px0, py0, px1, py0);
    svg.line(px0, py0, px0, py1);
    for (int i = 0; i <= 4; ++i) {
      const double fx = x0 + (x1 - x0) * i / 4.0;
      const double fy = y0 + (y1 - y0) * i / 4.0;
      const double px = px0 + (px1 - px0) * i / 4.0;
      const double py = py0 + (py1 - py0) * i / 4.0;
      svg.line(px, py0, px, py0 + 4);
      svg.text(px, py0 + 16, num(fx), "middle");
      svg.line(px0 - 4, py, px0, py);
      svg.text(px0 - 6, py + 4, num(fy), "end");
    }
    svg.text((px0 + px1) / 2, kHeight - 12, xlabel, "middle");
    svg.body += "<text x=\"14\" y=\"" + num((py0 + py1) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
                num((py0 + py1) / 2) + ")\">" + escape(ylabel) + "</text>\n";
  }
};

// Series keyed by label, each a list of (x, y) sorted by x.
using Series = std::map<std::string, std::vector<std::pair<double, double>>>;

std::string line_chart(const Series& series, const std::string& title, const std::string& xlabel,
                       const std::string& ylabel, double ymin_hint, double ymax_hint) {
  double x0 = 0, x1 = 1, y0 = ymin_hint, y1 = ymax_hint;
  bool any = false;
  for (const auto& [label, pts] : series) {
    for (const auto& [x, y] : pts) {
      if (!any) {
        x0 = x1 = x;
        any = true;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x0 == x1) x1 = x0 + 1;
  if (y0 == y1) y1 = y0 + 1;
  const Axes axes{x0, x1, y0, y1};
  Svg svg;
  svg.open(title);
  axes.draw(svg, xlabel, ylabel);
  std::size_t idx = 0;
  for (const auto& [label, pts] : series) {
    const char* color = kPalette[idx % std::size(kPalette)];
    std::string d;
    for (const auto& [x, y] : pts) d += (d.empty() ? "M" : " L") + num(axes.sx(x)) + " " + num(axes.sy(y));
    svg.body += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.50\"/>\n";
    for (const auto& [x, y] : pts) {
      svg.body += "<circle cx=\"" + num(axes.sx(x)) + "\" cy=\"" + num(axes.sy(y)) + "\" r=\"2.50\" fill=\"" + color +
                  "\"/>\n";
    }
    const double ly = kTop + 14.0 * static_cast<double>(idx);
    svg.line(kWidth - kRight + 12, ly, kWidth - kRight + 28, ly, color, 2);
    svg.text(kWidth - kRight + 32, ly + 4, label);
    ++idx;
  }
  svg.close();
  return svg.body;
}

Series collect_series(const CsvTable& t, const std::string& xcol, const std::string& ycol,
                      const std::vector<std::string>& key_cols) {
  Series series;
  if (t.rows.empty()) return series;
  const int xi = t.column(xcol), yi = t.column(ycol);
  std::vector<int> keys;
  for (const auto& k : key_cols) {
    if (t.column(k) >= 0) keys.push_back(t.column(k));
  }
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    std::string label;
    for (int k : keys) {
      if (!label.empty()) label += ' ';
      label += t.header[static_cast<std::size_t>(k)] + "=" + row[static_cast<std::size_t>(k)];
    }
    if (label.empty()) label = ycol;
    series[label].emplace_back(parse_number(row[static_cast<std::size_t>(xi)], xcol, r),
                               parse_number(row[static_cast<std::size_t>(yi)], ycol, r));
  }
  for (auto& [label, pts] : series) std::stable_sort(pts.begin(), pts.end());
  return series;
}

std::string heatmap(const CsvTable& t, const std::string& title) {
  Svg svg;
  svg.open(title);
  if (t.rows.empty()) {
    const Axes axes{0, 1, 0, 1};
    axes.draw(svg, "key position", "query position");
    svg.close();
    return svg.body;
  }
  const int li = t.column("layer"), ri = t.column("row"), ci = t.column("col"), vi = t.column("value");
  struct Cell {
    int layer, row, col;
    double value;
  };
  std::vector<Cell> cells;
  std::set<int> layers;
  std::map<int, int> extent;  // layer -> max(row, col) + 1
  double vmax = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    Cell c{static_cast<int>(parse_number(row[static_cast<std::size_t>(li)], "layer", r)),
           static_cast<int>(parse_number(row[static_cast<std::size_t>(ri)], "row", r)),
           static_cast<int>(parse_number(row[static_cast<std::size_t>(ci)], "col", r)),
           parse_number(row[static_cast<std::size_t>(vi)], "value", r)};
    cells.push_back(c);
    layers.insert(c.layer);
    extent[c.layer] = std::max({extent[c.layer], c.row + 1, c.col + 1});
    vmax = std::max(vmax, std::abs(c.value));
  }
  const int panels = static_cast<int>(layers.size());
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(panels))));
  const int rows = (panels + cols - 1) / cols;
  const double area_w = kWidth - 40, area_h = kHeight - kTop - 20;
  const double panel = std::min(area_w / cols, area_h / rows) - 16;
  std::map<int, std::pair<double, double>> origin;
  int p = 0;
  for (int layer : layers) {
    const double ox = 20 + (p % cols) * (panel + 16);
    const double oy = kTop + 14 + (p / cols) * (panel + 16);
    origin[layer] = {ox, oy};
    svg.text(ox, oy - 3, "layer " + std::to_string(layer), "start", 9);
    ++p;
  }
  for (const auto& c : cells) {
    const double n = extent[c.layer];
    const double size = panel / n;
    const auto [ox, oy] = origin[c.layer];
    const double shade = vmax > 0 ? std::abs(c.value) / vmax : 0.0;
    const int level = static_cast<int>(std::lround(255.0 * (1.0 - shade)));
    char color[16];
    std::snprintf(color, sizeof color, "#%02x%02xff", level, level);
    svg.body += "<rect class=\"cell\" x=\"" + num(ox + c.col * size) + "\" y=\"" + num(oy + c.row * size) +
                "\" width=\"" + num(size) + "\" height=\"" + num(size) + "\" fill=\"" + color + "\"/>\n";
  }
  svg.close();
  return svg.body;
}

}  // namespace

std::string render_plot(const CsvTable& table, PlotKind kind, const std::string& title) {
  switch (kind) {
    case PlotKind::curve:
      require_columns(table, kind, {"layer", "accuracy"});
      return line_chart(collect_series(table, "layer", "accuracy", {"protocol", "family", "J", "m", "variable", "d"}),
                        title, "layer", "accuracy", 0.0, 1.0);
    case PlotKind::heatmap:
      require_columns(table, kind, {"layer", "row", "col", "value"});
      return heatmap(table, title);
    case PlotKind::separation:
      require_columns(table, kind, {"layer", "variable", "distance"});
      return line_chart(collect_series(table, "layer", "distance", {"variable"}), title, "layer",
                        "Mahalanobis distance", 0.0, 0.0);
  }
  throw ConfigError("unknown plot kind");
}

void emit_plots(const std::filesystem::path& csv, PlotKind kind, const std::filesystem::path& out) {
  const auto table = read_csv(csv);
  write_text_file(out, render_plot(table, kind, csv.stem().string()));
}

}  // namespace iclprobe
