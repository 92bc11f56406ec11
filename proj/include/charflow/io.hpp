#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "charflow/points.hpp"

namespace charflow {

std::string_view version();

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view text);

/// "# charflow <version> seed=<seed> config=<16 hex digits of fnv1a(config_text)>"
std::string provenance_line(std::uint64_t seed, std::string_view config_text);

/// Points as CSV: optional provenance line, header x0,...,x{d-1}, one row per point,
/// values printed with 17 significant digits so reading back is exact.
void write_points_csv(std::ostream& out, const PointSet& points, std::string_view provenance = {});
/// Skips lines starting with '#'; the first remaining line is the header.
PointSet read_points_csv(std::istream& in);
void save_points_csv(const std::string& path, const PointSet& points, std::string_view provenance = {});
PointSet load_points_csv(const std::string& path);

/// Named columns of equal length as CSV, e.g. loss curves.
void write_columns_csv(std::ostream& out, const std::vector<std::string>& names,
                       const std::vector<std::vector<double>>& columns, std::string_view provenance = {});
void save_columns_csv(const std::string& path, const std::vector<std::string>& names,
                      const std::vector<std::vector<double>>& columns, std::string_view provenance = {});

}  // namespace charflow
