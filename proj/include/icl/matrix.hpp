#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

namespace icl {

// Dense double-precision storage used everywhere. Tokens are stored as
// columns: a sequence of T tokens of width d is a d x T matrix.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Ordered parameter set; the order is defined by whoever flattens it.
using ParamList = std::vector<Matrix>;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Writes `m` as CSV (17 significant digits) plus a `<stem>.json` sidecar
/// holding {rows, cols, name}.
void dump_matrix(const std::filesystem::path& csv_path, const Matrix& m,
                 const std::string& name);

/// Reads a matrix written by dump_matrix. Shape is taken from the sidecar
/// when present and cross-checked against the CSV body.
Matrix load_matrix(const std::filesystem::path& csv_path);

std::string format_double(double v);

}  // namespace icl
