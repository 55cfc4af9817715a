#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "csf/common.hpp"

namespace csf {

struct SurvivalSample {
  std::vector<double> x;
  double u = 0.0;
  int delta = 0;
  int w = 0;
};

struct SurvivalDataset {
  std::vector<SurvivalSample> samples;
  int p = 0;
  double t_max = 0.0;

  int n() const { return static_cast<int>(samples.size()); }
};

// Discretization support for the hazard and remaining-life integrals.  Points
// are strictly increasing times in (0, t_max]; an observed time u is mapped to
// the largest grid point at or below it (index -1 means "before the first
// point", where every survival curve is 1).
struct TimeGrid {
  std::vector<double> points;

  int size() const { return static_cast<int>(points.size()); }

  int lookup(double u) const {
    auto it = std::upper_bound(points.begin(), points.end(), u);
    return static_cast<int>(it - points.begin()) - 1;
  }
};

struct DiagnosticsReport {
  double propensity_min = 0.0;
  double propensity_max = 0.0;
  double censoring_floor = 0.0;
  double event_rate = 0.0;
  double horizon_mass = 0.0;
  std::vector<std::string> warnings;
};

struct CsvSchema {
  std::string u = "u";
  std::string delta = "delta";
  std::string w = "w";
  // Empty means: every column not named above is a feature, in file order.
  std::vector<std::string> features;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t b = 0;
    while (b < cell.size() && cell[b] == ' ') ++b;
    out.push_back(cell.substr(b));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_cell(const std::string& cell, int row, const std::string& col) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(cell, &pos);
    while (pos < cell.size() && cell[pos] == ' ') ++pos;
    if (pos != cell.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw parse_error("row " + std::to_string(row) + ": non-numeric value '" + cell +
                      "' in column '" + col + "'");
  }
}

inline int parse_binary(const std::string& cell, int row, const std::string& col) {
  const double v = parse_cell(cell, row, col);
  if (v == 0.0) return 0;
  if (v == 1.0) return 1;
  throw parse_error("row " + std::to_string(row) + ": column '" + col + "' must be 0 or 1, got " + cell);
}

}  // namespace detail

inline SurvivalDataset load_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw parse_error("empty file (no header): " + path);
  const auto header = detail::split_csv_line(line);

  auto find_col = [&](const std::string& name) {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<int>(j);
    throw parse_error("missing required column '" + name + "' in " + path);
  };
  const int cu = find_col(schema.u);
  const int cdelta = find_col(schema.delta);
  const int cw = find_col(schema.w);

  std::vector<int> feat_cols;
  std::vector<std::string> feat_names;
  if (schema.features.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) {
      const int ji = static_cast<int>(j);
      if (ji != cu && ji != cdelta && ji != cw) {
        feat_cols.push_back(ji);
        feat_names.push_back(header[j]);
      }
    }
  } else {
    for (const auto& name : schema.features) {
      feat_cols.push_back(find_col(name));
      feat_names.push_back(name);
    }
  }
  if (feat_cols.empty()) throw parse_error("schema selects no feature columns in " + path);

  SurvivalDataset ds;
  ds.p = static_cast<int>(feat_cols.size());
  int row = 0;
  double max_u = 0.0;
  while (std::getline(in, line)) {
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw parse_error("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                        " cells, got " + std::to_string(cells.size()));
    SurvivalSample s;
    s.u = detail::parse_cell(cells[cu], row, schema.u);
    if (!(s.u >= 0.0) || !std::isfinite(s.u))
      throw parse_error("row " + std::to_string(row) + ": u must be finite and >= 0, got " + cells[cu]);
    s.delta = detail::parse_binary(cells[cdelta], row, schema.delta);
    s.w = detail::parse_binary(cells[cw], row, schema.w);
    s.x.resize(feat_cols.size());
    for (std::size_t k = 0; k < feat_cols.size(); ++k) {
      s.x[k] = detail::parse_cell(cells[feat_cols[k]], row, feat_names[k]);
      if (!std::isfinite(s.x[k]))
        throw parse_error("row " + std::to_string(row) + ": non-finite feature in column '" +
                          feat_names[k] + "'");
    }
    max_u = std::max(max_u, s.u);
    ds.samples.push_back(std::move(s));
  }
  ds.t_max = max_u;
  return ds;
}

inline void save_csv(const SurvivalDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open file for writing: " + path);
  for (int j = 0; j < ds.p; ++j) out << "x" << (j + 1) << ",";
  out << "w,u,delta\n";
  for (const auto& s : ds.samples) {
    for (int j = 0; j < ds.p; ++j) out << format_double(s.x[j]) << ",";
    out << s.w << "," << format_double(s.u) << "," << s.delta << "\n";
  }
}

// Caps observation times at the horizon.  Anything surviving to t_max is a
// known failure-at-horizon on the restricted time scale, so it is recoded as
// uncensored; this removes the censoring positivity problem at the boundary.
inline SurvivalDataset truncate_and_recode(SurvivalDataset ds, double t_max) {
  if (!(t_max > 0.0)) throw parse_error("t_max must be positive");
  for (auto& s : ds.samples) {
    if (s.u > t_max) s.u = t_max;
    if (s.u == t_max) s.delta = 1;
  }
  ds.t_max = t_max;
  return ds;
}

inline TimeGrid build_time_grid(const SurvivalDataset& ds, int cap = 512) {
  if (ds.n() == 0) throw fit_error("cannot build time grid on empty dataset");
  if (cap < 2) throw parse_error("grid cap must be >= 2");
  std::vector<double> vals;
  vals.reserve(ds.samples.size());
  for (const auto& s : ds.samples)
    if (s.u > 0.0) vals.push_back(s.u);
  if (vals.empty()) throw fit_error("degenerate time grid: all observed times are zero");
  std::sort(vals.begin(), vals.end());
  vals.erase(std::unique(vals.begin(), vals.end()), vals.end());

  TimeGrid grid;
  const int m = static_cast<int>(vals.size());
  if (m <= cap) {
    grid.points = std::move(vals);
  } else {
    grid.points.reserve(cap);
    for (int j = 0; j < cap; ++j) {
      const auto idx = static_cast<std::size_t>(
          std::llround(static_cast<double>(j) * (m - 1) / static_cast<double>(cap - 1)));
      grid.points.push_back(vals[idx]);
    }
    grid.points.erase(std::unique(grid.points.begin(), grid.points.end()), grid.points.end());
  }
  if (ds.t_max > 0.0) {
    if (grid.points.back() < ds.t_max)
      grid.points.push_back(ds.t_max);
    else if (grid.points.back() > ds.t_max)
      throw fit_error("observed time exceeds t_max; run truncate_and_recode first");
  }
  return grid;
}

}  // namespace csf
