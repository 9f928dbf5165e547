#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "iclprobe/csv.hpp"

namespace iclprobe {

// curve:      columns layer, accuracy; one line per distinct value of the other key columns
// heatmap:    columns layer, row, col, value; one panel per layer, one cell per CSV row
// separation: columns layer, variable, distance; one line per variable
enum class PlotKind { curve, heatmap, separation };

std::string_view to_string(PlotKind kind);
PlotKind parse_plot_kind(std::string_view s);  // throws ConfigError

// SVG text for the table. Throws ConfigError when the header lacks the kind's columns.
std::string render_plot(const CsvTable& table, PlotKind kind, const std::string& title = {});

// Reads `csv`, renders it and writes the SVG to `out`. A CSV with no rows (or no bytes)
// yields empty axes.
void emit_plots(const std::filesystem::path& csv, PlotKind kind, const std::filesystem::path& out);

}  // namespace iclprobe
