#pragma once

// Global mean + user/item bias model fitted by SGD, and the conversion between
// raw ratings and the interaction residuals the matrix-completion solvers see.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcad/dataset.hpp"
#include "mcad/error.hpp"
#include "mcad/observations.hpp"

namespace mcad {

struct BiasConfig {
  double delta = 0.02;          // L2 weight on both bias vectors
  double learning_rate = 0.005;
  int epochs = 30;
  std::uint64_t seed = 0;       // visiting order of the shuffled epochs
};

struct BiasModel {
  double mean_g = 0.0;
  Eigen::VectorXd b_user;
  Eigen::VectorXd b_item;
  BiasConfig config;
  std::vector<double> objective_trace;  // one value per epoch

  int num_users() const noexcept { return static_cast<int>(b_user.size()); }
  int num_items() const noexcept { return static_cast<int>(b_item.size()); }

  double baseline(int user, int item) const { return mean_g + b_user(user) + b_item(item); }
};

// Sum of squared residuals plus delta * (|b_u|^2 + |b_i|^2).
inline double bias_objective(const RatingTriples& train, const BiasModel& model) {
  double s = 0.0;
  for (const auto& r : train.entries) {
    double e = r.value - model.baseline(r.user, r.item);
    s += e * e;
  }
  return s + model.config.delta * (model.b_user.squaredNorm() + model.b_item.squaredNorm());
}

// In-place SGD over shuffled ratings: b <- (b + lr * e) / (1 + lr * delta / count).
inline BiasModel fit_biases(const RatingTriples& train, const BiasConfig& config = {}) {
  if (train.empty()) throw ValidationError("fit_biases: empty training set");
  if (!(config.learning_rate > 0.0) || !(config.delta >= 0.0) || config.epochs < 0)
    throw ValidationError("fit_biases: need learning_rate > 0, delta >= 0, epochs >= 0");

  BiasModel model;
  model.config = config;
  model.mean_g = train.mean();
  model.b_user = Eigen::VectorXd::Zero(train.num_users);
  model.b_item = Eigen::VectorXd::Zero(train.num_items);

  std::vector<std::size_t> order(train.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::mt19937_64 rng(config.seed);
  const double lr = config.learning_rate;
  // A bias is visited once per rating it appears in, so each visit carries
  // delta / count of its penalty. The implicit form stays stable for any delta.
  std::vector<int> user_n(static_cast<std::size_t>(train.num_users), 0);
  const auto item_n = train.item_counts();
  for (const auto& r : train.entries) ++user_n[r.user];
  std::vector<double> user_shrink(user_n.size()), item_shrink(item_n.size());
  for (std::size_t u = 0; u < user_n.size(); ++u)
    user_shrink[u] = user_n[u] ? 1.0 / (1.0 + lr * config.delta / user_n[u]) : 1.0;
  for (std::size_t i = 0; i < item_n.size(); ++i)
    item_shrink[i] = item_n[i] ? 1.0 / (1.0 + lr * config.delta / item_n[i]) : 1.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    detail::portable_shuffle(order, rng);
    for (auto k : order) {
      const auto& r = train.entries[k];
      double& bu = model.b_user(r.user);
      double& bi = model.b_item(r.item);
      const double e = r.value - model.mean_g - bu - bi;
      bu = (bu + lr * e) * user_shrink[r.user];
      bi = (bi + lr * e) * item_shrink[r.item];
    }
    double obj = bias_objective(train, model);
    if (!std::isfinite(obj)) throw DivergenceError("bias SGD diverged", epoch);
    model.objective_trace.push_back(obj);
  }
  return model;
}

// Y_{u,i} = R_{u,i} - b_u - b_i - mean_g on the training support.
inline Observations to_interactions(const RatingTriples& train, const BiasModel& model) {
  if (train.num_users != model.num_users() || train.num_items != model.num_items())
    throw ValidationError("to_interactions: rating and bias index spaces differ");
  Observations y;
  y.rows = train.num_users;
  y.cols = train.num_items;
  y.entries.reserve(train.size());
  for (const auto& r : train.entries)
    y.entries.push_back({r.user, r.item, r.value - model.baseline(r.user, r.item)});
  return y;
}

// Adds the baseline back. With clip = true the result is limited to [lo, hi].
inline Eigen::MatrixXd from_interactions(const Eigen::MatrixXd& z, const BiasModel& model,
                                         bool clip = true, double lo = 1.0, double hi = 5.0) {
  if (z.rows() != model.num_users() || z.cols() != model.num_items())
    throw ValidationError("from_interactions: shape mismatch");
  Eigen::MatrixXd r = z;
  r.colwise() += model.b_user;
  r.rowwise() += model.b_item.transpose();
  r.array() += model.mean_g;
  if (clip) r = r.cwiseMax(lo).cwiseMin(hi);
  return r;
}

// Flat text: "mean_g <v>", "users <m>", one "u <index> <bias>" line per user,
// "items <n>", one "i <index> <bias>" line per item. Values use shortest
// round-trip formatting.
inline void save_bias_model(const std::filesystem::path& path, const BiasModel& model) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  auto fmt = [](double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  out << "mean_g " << fmt(model.mean_g) << '\n';
  out << "users " << model.num_users() << '\n';
  for (int u = 0; u < model.num_users(); ++u) out << "u " << u << ' ' << fmt(model.b_user(u)) << '\n';
  out << "items " << model.num_items() << '\n';
  for (int i = 0; i < model.num_items(); ++i) out << "i " << i << ' ' << fmt(model.b_item(i)) << '\n';
}

inline BiasModel load_bias_model(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  const auto file = path.string();
  BiasModel model;
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> std::vector<std::string_view> {
    if (!std::getline(in, line)) throw ParseError(file, lineno + 1, "unexpected end of file");
    ++lineno;
    detail::strip_cr(line);
    return detail::split(line, " ");
  };
  auto expect_count = [&](const char* tag) {
    auto f = next();
    int n = 0;
    if (f.size() != 2 || f[0] != tag || !detail::parse_number(f[1], n) || n < 0)
      throw ParseError(file, lineno, std::string("expected '") + tag + " <count>'");
    return n;
  };
  auto read_vector = [&](const char* tag, Eigen::VectorXd& v) {
    for (Eigen::Index k = 0; k < v.size(); ++k) {
      auto f = next();
      Eigen::Index idx = 0;
      double b = 0.0;
      if (f.size() != 3 || f[0] != tag || !detail::parse_number(f[1], idx) || idx != k ||
          !detail::parse_number(f[2], b))
        throw ParseError(file, lineno, std::string("expected '") + tag + " <index> <bias>'");
      v(k) = b;
    }
  };
  auto head = next();
  if (head.size() != 2 || head[0] != "mean_g" || !detail::parse_number(head[1], model.mean_g))
    throw ParseError(file, lineno, "expected 'mean_g <value>'");
  model.b_user.resize(expect_count("users"));
  read_vector("u", model.b_user);
  model.b_item.resize(expect_count("items"));
  read_vector("i", model.b_item);
  return model;
}

}  // namespace mcad
