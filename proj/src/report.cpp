#include "flowalign/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace flowalign {

std::string CsvTable::to_string() const {
  std::ostringstream os;
  for (const auto& c : comments) os << "# " << c << "\n";
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << "\n";
  }
  return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

namespace {
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}
}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  CsvTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string c = line.substr(1);
      if (!c.empty() && c[0] == ' ') c.erase(0, 1);
      t.comments.push_back(c);
      continue;
    }
    if (!have_header) {
      t.header = split_csv_line(line);
      have_header = true;
    } else {
      t.rows.push_back(split_csv_line(line));
    }
  }
  if (!have_header) throw std::runtime_error("csv has no header: " + path);
  return t;
}

int csv_column(const CsvTable& table, const std::string& name) {
  for (std::size_t i = 0; i < table.header.size(); ++i)
    if (table.header[i] == name) return static_cast<int>(i);
  throw std::runtime_error("csv column not found: " + name);
}

std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size() && i < width.size(); ++i)
      width[i] = std::max(width[i], row[i].size());

  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < width.size(); ++i) {
      const std::string& s = (i < cells.size()) ? cells[i] : std::string();
      os << s << std::string(width[i] - s.size() + 2, ' ');
    }
    os << "\n";
  };
  emit(header);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  os << std::string(total, '-') << "\n";
  for (const auto& row : rows) emit(row);
  return os.str();
}

namespace {

const char* kPalette[] = {"#1f6fb2", "#d1495b", "#3e8e5a", "#9467bd", "#e08e29", "#4a4a4a"};

std::string fmt_coord(double v) { return util::fmt_fixed(v, 2); }

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<ChartSeries>& series) {
  const double w = 720, h = 480;
  const double ml = 72, mr = 24, mt = 48, mb = 56;
  const double pw = w - ml - mr, ph = h - mt - mb;

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (!(xmin < xmax)) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (!(ymin < ymax)) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) { return ml + pw * (x - xmin) / (xmax - xmin); };
  auto py = [&](double y) { return mt + ph * (1.0 - (y - ymin) / (ymax - ymin)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"480\" "
        "viewBox=\"0 0 720 480\">\n";
  os << "<rect width=\"720\" height=\"480\" fill=\"white\"/>\n";
  os << "<text x=\"360\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"16\">"
     << title << "</text>\n";

  os << "<rect x=\"" << fmt_coord(ml) << "\" y=\"" << fmt_coord(mt) << "\" width=\""
     << fmt_coord(pw) << "\" height=\"" << fmt_coord(ph)
     << "\" fill=\"none\" stroke=\"#333333\"/>\n";

  const int n_ticks = 5;
  for (int i = 0; i <= n_ticks; ++i) {
    const double fx = xmin + (xmax - xmin) * i / n_ticks;
    const double fy = ymin + (ymax - ymin) * i / n_ticks;
    const double cx = px(fx), cy = py(fy);
    os << "<line x1=\"" << fmt_coord(cx) << "\" y1=\"" << fmt_coord(mt + ph) << "\" x2=\""
       << fmt_coord(cx) << "\" y2=\"" << fmt_coord(mt + ph + 5)
       << "\" stroke=\"#333333\"/>\n";
    os << "<text x=\"" << fmt_coord(cx) << "\" y=\"" << fmt_coord(mt + ph + 20)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
       << fmt_tick(fx) << "</text>\n";
    os << "<line x1=\"" << fmt_coord(ml - 5) << "\" y1=\"" << fmt_coord(cy) << "\" x2=\""
       << fmt_coord(ml) << "\" y2=\"" << fmt_coord(cy) << "\" stroke=\"#333333\"/>\n";
    os << "<text x=\"" << fmt_coord(ml - 8) << "\" y=\"" << fmt_coord(cy + 4)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt_tick(fy)
       << "</text>\n";
  }

  os << "<text x=\"" << fmt_coord(ml + pw / 2) << "\" y=\"" << fmt_coord(h - 12)
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << x_label
     << "</text>\n";
  os << "<text x=\"18\" y=\"" << fmt_coord(mt + ph / 2)
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
        "transform=\"rotate(-90 18 "
     << fmt_coord(mt + ph / 2) << ")\">" << y_label << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (i) os << " ";
      os << fmt_coord(px(s.x[i])) << "," << fmt_coord(py(s.y[i]));
    }
    os << "\"/>\n";
    os << "<text x=\"" << fmt_coord(ml + 10) << "\" y=\""
       << fmt_coord(mt + 16 + 16 * static_cast<double>(si))
       << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">" << s.name
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace flowalign
