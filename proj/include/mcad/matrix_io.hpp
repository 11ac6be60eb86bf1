#pragma once

// Completed-matrix container: a short text header followed by raw
// little-endian float64 data in row-major order.
//
//   MCADMAT 1
//   rows <m>
//   cols <n>
//   lambda_n <v>
//   lambda_d <v>
//   eta <v>
//   iterations <k>
//   objective <v>
//   end_header
//   <m*n doubles>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "mcad/error.hpp"

namespace mcad {

struct MatrixHeader {
  int rows = 0;
  int cols = 0;
  double lambda_n = 0.0;
  double lambda_d = 0.0;
  double eta = 0.0;
  int iterations = 0;
  double objective = 0.0;
};

struct StoredMatrix {
  MatrixHeader header;
  Eigen::MatrixXd Z;
};

static_assert(std::endian::native == std::endian::little, "matrix container assumes little-endian hosts");

inline void save_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& z, MatrixHeader h) {
  h.rows = static_cast<int>(z.rows());
  h.cols = static_cast<int>(z.cols());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "MCADMAT 1\n"
      << "rows " << h.rows << '\n'
      << "cols " << h.cols << '\n'
      << "lambda_n " << num(h.lambda_n) << '\n'
      << "lambda_d " << num(h.lambda_d) << '\n'
      << "eta " << num(h.eta) << '\n'
      << "iterations " << h.iterations << '\n'
      << "objective " << num(h.objective) << '\n'
      << "end_header\n";
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = z;
  out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  if (!out) throw Error("write failed: " + path.string());
}

inline StoredMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string file = path.string();
  std::string line;
  int lineno = 1;
  if (!std::getline(in, line) || line != "MCADMAT 1") throw ParseError(file, lineno, "not a matrix container");
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    ++lineno;
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key >> value)) throw ParseError(file, lineno, "bad header line '" + line + "'");
    kv[key] = value;
  }
  if (line != "end_header") throw ParseError(file, lineno, "missing end_header");
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(file, lineno, std::string("missing header field ") + key);
    return it->second;
  };
  StoredMatrix s;
  try {
    s.header.rows = std::stoi(get("rows"));
    s.header.cols = std::stoi(get("cols"));
    s.header.lambda_n = std::stod(get("lambda_n"));
    s.header.lambda_d = std::stod(get("lambda_d"));
    s.header.eta = std::stod(get("eta"));
    s.header.iterations = std::stoi(get("iterations"));
    s.header.objective = std::stod(get("objective"));
  } catch (const std::logic_error&) {
    throw ParseError(file, lineno, "non-numeric header value");
  }
  if (s.header.rows < 0 || s.header.cols < 0) throw ParseError(file, lineno, "negative shape");
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(s.header.rows, s.header.cols);
  const auto bytes = static_cast<std::streamsize>(rm.size() * sizeof(double));
  in.read(reinterpret_cast<char*>(rm.data()), bytes);
  if (in.gcount() != bytes) throw ParseError(file, lineno, "truncated matrix data");
  s.Z = rm;
  return s;
}

}  // namespace mcad
