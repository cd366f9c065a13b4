#pragma once

#include <string>
#include <vector>

#include "flowalign/util.hpp"

namespace flowalign {

// Minimal CSV model: comment lines ('#' prefix) are preserved verbatim ahead
// of the header. All numeric cells are written through util::fmt_sci so
// repeated runs produce byte-identical files.
struct CsvTable {
  std::vector<std::string> comments;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_string() const;
};

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

CsvTable read_csv(const std::string& path);
int csv_column(const CsvTable& table, const std::string& name);

// Fixed-width text rendering of a CSV-like table for terminal output.
std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows);

// Self-contained SVG line chart. Output is a pure function of the inputs with
// fixed-precision coordinates.
struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<ChartSeries>& series);

}  // namespace flowalign
