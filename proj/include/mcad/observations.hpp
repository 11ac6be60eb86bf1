#pragma once

#include <vector>

#include <Eigen/Dense>

#include "mcad/error.hpp"

namespace mcad {

struct Observation {
  int row = 0;
  int col = 0;
  double value = 0.0;
};

// Sparse observed entries of an m x n matrix (the interaction values Y).
struct Observations {
  std::vector<Observation> entries;
  int rows = 0;
  int cols = 0;

  std::size_t size() const noexcept { return entries.size(); }

  Eigen::MatrixXd to_dense() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(rows, cols);
    for (const auto& e : entries) out(e.row, e.col) = e.value;
    return out;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.value * e.value;
    return s;
  }
};

}  // namespace mcad
