#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace iclprobe {

// A small comma-separated table. Cells never contain commas or quotes in this project, so
// there is no quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row);  // throws RangeError on a width mismatch
  int column(const std::string& name) const;   // -1 when absent
  std::string str() const;
};

// Fixed six-decimal formatting; negative zero prints as zero.
std::string fmt(double value);
std::string fmt(long long value);
inline std::string fmt(int value) { return fmt(static_cast<long long>(value)); }

CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

// Writes bytes atomically enough for a single writer: temp file then rename.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace iclprobe
