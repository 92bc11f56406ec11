#include "charflow/io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "charflow/errors.hpp"

namespace charflow {

namespace {

void put_double(std::ostream& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out << buf;
}

double parse_double(std::string_view text, std::size_t line_no) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\r')) text.remove_suffix(1);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size())
    throw ParseError("csv line " + std::to_string(line_no) + ": bad number '" + std::string(text) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  return out;
}

}  // namespace

std::string_view version() { return CHARFLOW_VERSION; }

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string provenance_line(std::uint64_t seed, std::string_view config_text) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(config_text)));
  return "# charflow " + std::string(version()) + " seed=" + std::to_string(seed) + " config=" + hash;
}

void write_points_csv(std::ostream& out, const PointSet& points, std::string_view provenance) {
  if (!provenance.empty()) out << provenance << '\n';
  for (std::size_t k = 0; k < points.dim(); ++k) out << (k ? ",x" : "x") << k;
  out << '\n';
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t k = 0; k < points.dim(); ++k) {
      if (k) out << ',';
      put_double(out, points(i, k));
    }
    out << '\n';
  }
}

PointSet read_points_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  bool header = false;
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split(line);
    if (!header) {
      header = true;
      dim = fields.size();
      continue;
    }
    if (fields.size() != dim)
      throw ParseError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(dim) + " fields");
    for (std::string_view f : fields) values.push_back(parse_double(f, line_no));
    ++rows;
  }
  if (!header) throw ParseError("csv: missing header line");
  return PointSet(rows, dim, std::move(values));
}

void save_points_csv(const std::string& path, const PointSet& points, std::string_view provenance) {
  std::ofstream out = open_out(path);
  write_points_csv(out, points, provenance);
}

PointSet load_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return read_points_csv(in);
}

void write_columns_csv(std::ostream& out, const std::vector<std::string>& names,
                       const std::vector<std::vector<double>>& columns, std::string_view provenance) {
  if (names.size() != columns.size()) throw ContractError("write_columns_csv: one name per column");
  const std::size_t rows = columns.empty() ? 0 : columns.front().size();
  for (const auto& c : columns)
    if (c.size() != rows) throw ContractError("write_columns_csv: columns differ in length");
  if (!provenance.empty()) out << provenance << '\n';
  for (std::size_t k = 0; k < names.size(); ++k) out << (k ? "," : "") << names[k];
  out << '\n';
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < columns.size(); ++k) {
      if (k) out << ',';
      put_double(out, columns[k][i]);
    }
    out << '\n';
  }
}

void save_columns_csv(const std::string& path, const std::vector<std::string>& names,
                      const std::vector<std::vector<double>>& columns, std::string_view provenance) {
  std::ofstream out = open_out(path);
  write_columns_csv(out, names, columns, provenance);
}

}  // namespace charflow
