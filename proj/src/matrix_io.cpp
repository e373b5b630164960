#include "icl/matrix.hpp"

#include "icl/errors.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace icl {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void dump_matrix(const std::filesystem::path& csv_path, const Matrix& m,
                 const std::string& name) {
  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot write " + csv_path.string());
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      if (c) csv << ',';
      csv << format_double(m(r, c));
    }
    csv << '\n';
  }
  auto sidecar = csv_path;
  sidecar.replace_extension(".json");
  std::ofstream js(sidecar);
  js << nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"name", name}}.dump(2) << '\n';
}

Matrix load_matrix(const std::filesystem::path& csv_path) {
  std::ifstream csv(csv_path);
  if (!csv) throw ConfigError("cannot read " + csv_path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  Index n_rows = static_cast<Index>(rows.size());
  Index n_cols = rows.empty() ? 0 : static_cast<Index>(rows.front().size());

  auto sidecar = csv_path;
  sidecar.replace_extension(".json");
  if (std::filesystem::exists(sidecar)) {
    std::ifstream js(sidecar);
    const auto meta = nlohmann::json::parse(js);
    const Index want_rows = meta.at("rows").get<Index>();
    const Index want_cols = meta.at("cols").get<Index>();
    if (n_rows == 0 && (want_rows == 0 || want_cols == 0)) return Matrix(want_rows, want_cols);
    if (want_rows != n_rows || want_cols != n_cols)
      throw ShapeError("matrix sidecar shape disagrees with " + csv_path.string());
  }
  Matrix m(n_rows, n_cols);
  for (Index r = 0; r < n_rows; ++r) {
    if (static_cast<Index>(rows[r].size()) != n_cols)
      throw ShapeError("ragged CSV in " + csv_path.string());
    for (Index c = 0; c < n_cols; ++c) m(r, c) = rows[r][c];
  }
  return m;
}

}  // namespace icl
