#pragma once

// Experiment orchestration: configuration, per-fold pipeline
// (biases -> solve -> rank -> evaluate), resumable grid sweeps, and the
// matched-precision-loss comparison table.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mcad/baseline.hpp"
#include "mcad/dataset.hpp"
#include "mcad/error.hpp"
#include "mcad/log.hpp"
#include "mcad/matrix_io.hpp"
#include "mcad/metrics.hpp"
#include "mcad/ranking.hpp"
#include "mcad/solver.hpp"

namespace mcad {

namespace fs = std::filesystem;

enum class DiversityTarget { interactions, ratings };

// Flat "key = value" configuration. Lists are comma separated; '#' starts a comment.
struct ExperimentConfig {
  std::string dataset = "ml100k";
  fs::path data_dir = "data/ml-100k";
  fs::path fold_cache;  // optional: read folds written by `ingest`
  int folds = 5;
  std::vector<int> fold_ids;  // empty: all folds
  std::uint64_t seed = 42;
  int replications = 1;

  std::vector<int> N{5};
  std::vector<double> lambda_n{2, 5, 10, 20};
  std::vector<double> ratios{0, 0.1, 0.3, 1, 3, 10, 30};
  std::optional<double> eta = 1.0;  // nullopt: eta = lambda_n
  DiversityTarget diversity_target = DiversityTarget::interactions;
  int max_iter = 500;
  double tol = 1e-7;
  double rel_tol = 1e-7;
  WSolveMode inner_solver = WSolveMode::direct;

  BiasConfig bias;

  std::vector<std::string> strategies{"MC", "MCAD", "MC-IA", "MC-RPRV"};
  std::vector<double> thresholds{3.5, 3.75, 4.0, 4.25, 4.5};
  std::vector<CandidatePolicy> policies{CandidatePolicy::test_only, CandidatePolicy::all_unrated};
  double relevance_threshold = 4.0;
  std::vector<double> loss_targets{3, 3.5, 4, 4.5, 5, 5.5, 6, 6.5};

  fs::path output = "out";
  int jobs = 1;
  bool save_matrices = false;

  bool wants(std::string_view s) const {
    return std::find(strategies.begin(), strategies.end(), s) != strategies.end();
  }
  bool needs_mc() const { return wants("MC") || wants("MC-IA") || wants("MC-RPRV"); }

  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string dump() const;

  static ExperimentConfig from_file(const fs::path& path) {
    ExperimentConfig c;
    c.load(path);
    return c;
  }
  void load(const fs::path& path);
};

namespace detail {

inline std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  for (auto part : split(v, ",")) {
    auto t = trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& s) {
  double v = 0;
  if (!parse_number(s, v)) throw ValidationError("config: " + key + ": '" + s + "' is not a number");
  return v;
}

inline long long to_int(const std::string& key, const std::string& s) {
  long long v = 0;
  if (!parse_number(s, v)) throw ValidationError("config: " + key + ": '" + s + "' is not an integer");
  return v;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (k) s += ',';
    if constexpr (std::is_same_v<T, double>) s += fmt_num(v[k]);
    else if constexpr (std::is_same_v<T, std::string>) s += v[k];
    else if constexpr (std::is_same_v<T, CandidatePolicy>) s += to_string(v[k]);
    else s += std::to_string(v[k]);
  }
  return s;
}

}  // namespace detail

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  using namespace detail;
  auto doubles = [&] {
    std::vector<double> out;
    for (auto& s : split_list(value)) out.push_back(to_double(key, s));
    return out;
  };
  auto ints = [&] {
    std::vector<int> out;
    for (auto& s : split_list(value)) out.push_back(static_cast<int>(to_int(key, s)));
    return out;
  };
  if (key == "dataset") dataset = value;
  else if (key == "data_dir") data_dir = value;
  else if (key == "fold_cache") fold_cache = value;
  else if (key == "folds") folds = static_cast<int>(to_int(key, value));
  else if (key == "fold_ids") fold_ids = ints();
  else if (key == "seed") seed = static_cast<std::uint64_t>(to_int(key, value));
  else if (key == "replications") replications = static_cast<int>(to_int(key, value));
  else if (key == "N") N = ints();
  else if (key == "lambda_n") lambda_n = doubles();
  else if (key == "ratio") ratios = doubles();
  else if (key == "eta") {
    if (value == "lambda_n") eta.reset();
    else eta = to_double(key, value);
  } else if (key == "diversity_target") {
    if (value == "interactions") diversity_target = DiversityTarget::interactions;
    else if (value == "ratings") diversity_target = DiversityTarget::ratings;
    else throw ValidationError("config: diversity_target must be interactions or ratings");
  } else if (key == "max_iter") max_iter = static_cast<int>(to_int(key, value));
  else if (key == "tol") tol = to_double(key, value);
  else if (key == "rel_tol") rel_tol = to_double(key, value);
  else if (key == "inner_solver") {
    if (value == "direct") inner_solver = WSolveMode::direct;
    else if (value == "iterative") inner_solver = WSolveMode::iterative;
    else throw ValidationError("config: inner_solver must be direct or iterative");
  } else if (key == "bias_delta") bias.delta = to_double(key, value);
  else if (key == "bias_learning_rate") bias.learning_rate = to_double(key, value);
  else if (key == "bias_epochs") bias.epochs = static_cast<int>(to_int(key, value));
  else if (key == "strategies") strategies = split_list(value);
  else if (key == "T_R") thresholds = doubles();
  else if (key == "candidate_policies") {
    policies.clear();
    for (auto& s : split_list(value)) policies.push_back(parse_candidate_policy(s));
  } else if (key == "relevance_threshold") relevance_threshold = to_double(key, value);
  else if (key == "loss_targets") loss_targets = doubles();
  else if (key == "output") output = value;
  else if (key == "jobs") jobs = static_cast<int>(to_int(key, value));
  else if (key == "save_matrices") {
    if (value == "true" || value == "1") save_matrices = true;
    else if (value == "false" || value == "0") save_matrices = false;
    else throw ValidationError("config: save_matrices must be true or false");
  } else throw ValidationError("config: unknown key '" + key + "'");
}

inline void ExperimentConfig::load(const fs::path& path) {
  auto in = detail::open_input(path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto t = detail::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string_view::npos) throw ParseError(path.string(), lineno, "expected key = value");
    try {
      set(std::string(detail::trim(t.substr(0, eq))), std::string(detail::trim(t.substr(eq + 1))));
    } catch (const ValidationError& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
}

inline void ExperimentConfig::validate() const {
  if (dataset != "ml100k" && dataset != "ml1m") throw ValidationError("config: dataset must be ml100k or ml1m");
  if (folds < 2) throw ValidationError("config: folds must be >= 2");
  for (int f : fold_ids)
    if (f < 0 || f >= folds) throw ValidationError("config: fold_ids entry out of range");
  if (replications < 1) throw ValidationError("config: replications must be >= 1");
  if (N.empty()) throw ValidationError("config: N must list at least one value");
  for (int n : N)
    if (n < 1 || n > 50) throw ValidationError("config: N values must lie in 1..50");
  if (strategies.empty()) throw ValidationError("config: no strategies requested");
  for (const auto& s : strategies)
    if (s != "MC" && s != "MCAD" && s != "MC-IA" && s != "MC-RPRV")
      throw ValidationError("config: unknown strategy '" + s + "'");
  if (lambda_n.empty()) throw ValidationError("config: lambda_n grid is empty");
  for (double l : lambda_n)
    if (!(l >= 0.0)) throw ValidationError("config: lambda_n values must be >= 0");
  for (double r : ratios)
    if (!(r >= 0.0)) throw ValidationError("config: ratio values must be >= 0");
  if (wants("MCAD") && std::none_of(ratios.begin(), ratios.end(), [](double r) { return r > 0.0; }))
    throw ValidationError("config: MCAD needs at least one ratio > 0");
  if ((wants("MC-IA") || wants("MC-RPRV")) && thresholds.empty())
    throw ValidationError("config: T_R grid is empty");
  if (!std::is_sorted(thresholds.begin(), thresholds.end()))
    throw ValidationError("config: T_R grid must be ascending");
  if (policies.empty()) throw ValidationError("config: no candidate policy");
  if (eta && !(*eta > 0.0)) throw ValidationError("config: eta must be > 0");
  if (!eta && std::any_of(lambda_n.begin(), lambda_n.end(), [](double l) { return l == 0.0; }))
    throw ValidationError("config: eta = lambda_n needs every lambda_n > 0");
  if (jobs < 1) throw ValidationError("config: jobs must be >= 1");
  if (max_iter < 1 || !(tol > 0.0) || !(rel_tol >= 0.0)) throw ValidationError("config: bad solver limits");
}

inline std::string ExperimentConfig::dump() const {
  using detail::join;
  std::ostringstream o;
  o << "dataset = " << dataset << '\n'
    << "data_dir = " << data_dir.string() << '\n';
  if (!fold_cache.empty()) o << "fold_cache = " << fold_cache.string() << '\n';
  o << "folds = " << folds << '\n';
  if (!fold_ids.empty()) o << "fold_ids = " << join(fold_ids) << '\n';
  o << "seed = " << seed << '\n'
    << "replications = " << replications << '\n'
    << "N = " << join(N) << '\n'
    << "lambda_n = " << join(lambda_n) << '\n'
    << "ratio = " << join(ratios) << '\n'
    << "eta = " << (eta ? detail::fmt_num(*eta) : std::string("lambda_n")) << '\n'
    << "diversity_target = " << (diversity_target == DiversityTarget::ratings ? "ratings" : "interactions") << '\n'
    << "max_iter = " << max_iter << '\n'
    << "tol = " << detail::fmt_num(tol) << '\n'
    << "rel_tol = " << detail::fmt_num(rel_tol) << '\n'
    << "inner_solver = " << (inner_solver == WSolveMode::direct ? "direct" : "iterative") << '\n'
    << "bias_delta = " << detail::fmt_num(bias.delta) << '\n'
    << "bias_learning_rate = " << detail::fmt_num(bias.learning_rate) << '\n'
    << "bias_epochs = " << bias.epochs << '\n'
    << "strategies = " << join(strategies) << '\n'
    << "T_R = " << join(thresholds) << '\n'
    << "candidate_policies = " << join(policies) << '\n'
    << "relevance_threshold = " << detail::fmt_num(relevance_threshold) << '\n'
    << "loss_targets = " << join(loss_targets) << '\n'
    << "output = " << output.string() << '\n'
    << "jobs = " << jobs << '\n'
    << "save_matrices = " << (save_matrices ? "true" : "false") << '\n';
  return o.str();
}

// ---------------------------------------------------------------------------
// Data

inline Dataset load_dataset(const std::string& name, const fs::path& dir) {
  if (name == "ml100k") return parse_movielens_100k(dir / "u.data", dir / "u.item");
  if (name == "ml1m") return parse_movielens_1m(dir / "ratings.dat", dir / "movies.dat");
  throw ValidationError("unknown dataset '" + name + "'");
}

// Folds from the cache directory when configured, else parsed and split now.
inline FoldCache load_folds(const ExperimentConfig& cfg) {
  if (!cfg.fold_cache.empty()) {
    auto cache = read_fold_cache(cfg.fold_cache);
    if (static_cast<int>(cache.folds.size()) != cfg.folds)
      throw ValidationError("fold cache holds " + std::to_string(cache.folds.size()) +
                            " folds, config asks for " + std::to_string(cfg.folds));
    return cache;
  }
  Dataset ds = load_dataset(cfg.dataset, cfg.data_dir);
  FoldCache c;
  c.folds = make_folds(ds.ratings, cfg.folds, cfg.seed);
  c.ids = std::move(ds.ids);
  c.genres = std::move(ds.genres);
  return c;
}

inline std::vector<int> selected_folds(const ExperimentConfig& cfg) {
  if (!cfg.fold_ids.empty()) return cfg.fold_ids;
  std::vector<int> all(static_cast<std::size_t>(cfg.folds));
  for (int f = 0; f < cfg.folds; ++f) all[static_cast<std::size_t>(f)] = f;
  return all;
}

// Everything a solve needs for one fold and replication; read-only once built.
struct FoldContext {
  int fold = 0;
  int replication = 0;
  const FoldSplit* split = nullptr;
  const GenreMatrix* genres = nullptr;
  const IdMap* ids = nullptr;
  BiasModel bias;
  Observations y;
  MaskOperator mask;
  DiversityOperator divop;
  std::map<CandidatePolicy, CandidatePool> pools;
};

inline BiasConfig bias_config_for(const ExperimentConfig& cfg, int replication) {
  BiasConfig b = cfg.bias;
  b.seed = cfg.seed + static_cast<std::uint64_t>(replication);
  return b;
}

inline FoldContext make_context(const ExperimentConfig& cfg, const FoldCache& data, int fold,
                                int replication, const BiasModel* bias = nullptr) {
  FoldContext c;
  c.fold = fold;
  c.replication = replication;
  c.split = &data.folds.at(static_cast<std::size_t>(fold));
  c.genres = &data.genres;
  c.ids = &data.ids;
  c.bias = bias ? *bias : fit_biases(c.split->train, bias_config_for(cfg, replication));
  if (c.bias.num_users() != c.split->train.num_users || c.bias.num_items() != c.split->train.num_items)
    throw ValidationError("bias model does not match the fold's index space");
  c.y = to_interactions(c.split->train, c.bias);
  c.mask = MaskOperator::from(c.y);
  c.divop = build_diversity_operator(data.genres);
  if (cfg.diversity_target == DiversityTarget::ratings) c.divop = with_item_offset(c.divop, c.bias.b_item);
  for (auto p : cfg.policies) c.pools.emplace(p, CandidatePool::build(c.split->train, &c.split->test, p));
  return c;
}

// ---------------------------------------------------------------------------
// Cells

struct CellSpec {
  int fold = 0;
  int replication = 0;
  bool mcad = false;
  double lambda_n = 0.0;
  double ratio = 0.0;

  double lambda_d() const { return mcad ? ratio * lambda_n : 0.0; }

  std::string id() const {
    std::string s = "f" + std::to_string(fold) + "_r" + std::to_string(replication) +
                    (mcad ? "_MCAD" : "_MC") + "_ln" + detail::fmt_num(lambda_n);
    if (mcad) s += "_ratio" + detail::fmt_num(ratio);
    return s;
  }
};

// Solve cells in a fixed order: fold, replication, lambda_n, then MC before MCAD ratios.
inline std::vector<CellSpec> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<CellSpec> cells;
  for (int f : selected_folds(cfg))
    for (int r = 0; r < cfg.replications; ++r)
      for (double ln : cfg.lambda_n) {
        if (cfg.needs_mc()) cells.push_back({f, r, false, ln, 0.0});
        if (cfg.wants("MCAD"))
          for (double ratio : cfg.ratios)
            if (ratio > 0.0) cells.push_back({f, r, true, ln, ratio});
      }
  return cells;
}

inline SolverConfig solver_config_for(const ExperimentConfig& cfg, const CellSpec& cell) {
  SolverConfig s;
  s.lambda_n = cell.lambda_n;
  s.lambda_d = cell.lambda_d();
  s.eta = cfg.eta ? *cfg.eta : cell.lambda_n;
  s.max_iter = cfg.max_iter;
  s.tol = cfg.tol;
  s.rel_tol = cfg.rel_tol;
  s.inner_linear_solver = cfg.inner_solver;
  s.seed = cfg.seed;
  return s;
}

inline SolveResult solve_cell(const ExperimentConfig& cfg, const FoldContext& ctx, const CellSpec& cell,
                              const IterationCallback& on_iter = {}) {
  auto sc = solver_config_for(cfg, cell);
  if (!cell.mcad) return solve_mc(ctx.y, ctx.mask, sc, on_iter);
  return solve_mcad(ctx.y, ctx.mask, ctx.divop, sc, on_iter);
}

struct FrequencyOutput {
  std::string name;  // file stem suffix
  FrequencyDistribution dist;
};

struct CellEvaluation {
  std::vector<EvalReport> rows;
  std::vector<FrequencyOutput> frequencies;
};

// Ranks and scores one completed interaction matrix. MC cells also produce
// the IA/RPRV re-ranked variants when requested. Frequency distributions are
// kept for the all-unrated pool (or the first configured pool).
inline CellEvaluation evaluate_cell(const ExperimentConfig& cfg, const FoldContext& ctx,
                                    const CellSpec& cell, const Eigen::MatrixXd& z) {
  const auto scores = from_interactions(z, ctx.bias, false);
  const auto clipped = from_interactions(z, ctx.bias, true);
  const auto& train = ctx.split->train;
  const auto& test = ctx.split->test;
  const CandidatePolicy freq_policy =
      ctx.pools.count(CandidatePolicy::all_unrated) ? CandidatePolicy::all_unrated : cfg.policies.front();

  CellEvaluation out;
  auto add = [&](const RecommendationLists& lists, const std::string& strategy, double threshold, int n,
                 CandidatePolicy policy) {
    EvalReport r = evaluate_lists(lists, clipped, train, test, *ctx.genres, cfg.relevance_threshold);
    r.dataset = cfg.dataset;
    r.fold = ctx.fold;
    r.strategy = strategy;
    r.lambda_n = cell.lambda_n;
    r.lambda_d = cell.lambda_d();
    r.threshold = threshold;
    r.N = n;
    r.policy = policy;
    out.rows.push_back(r);
    if (policy == freq_policy) {
      std::string name = strategy;
      if (!std::isnan(threshold)) name += "_T" + detail::fmt_num(threshold);
      name += "_N" + std::to_string(n);
      out.frequencies.push_back({name, frequency_distribution(lists, train.num_items)});
    }
  };

  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int n : cfg.N)
    for (auto policy : cfg.policies) {
      const auto& pool = ctx.pools.at(policy);
      if (cell.mcad) {
        add(rank_standard(scores, pool, n), "MCAD", nan, n, policy);
        continue;
      }
      if (cfg.wants("MC")) add(rank_standard(scores, pool, n), "MC", nan, n, policy);
      for (auto [name, strategy] : {std::pair{"MC-IA", Strategy::IA}, std::pair{"MC-RPRV", Strategy::RPRV}}) {
        if (!cfg.wants(name)) continue;
        for (const auto& run : sweep_threshold(scores, pool, train, strategy, cfg.thresholds, n))
          add(run.lists, name, run.threshold, n, policy);
      }
    }
  return out;
}

// Solver summary kept next to each cell's rows.
struct CellSummary {
  std::string cell;
  int iterations = 0;
  bool converged = false;
  int rank = 0;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  double proxy_gap = 0.0;
  double seconds = 0.0;
  std::vector<double> trace;
};

inline void write_trace_csv(const fs::path& path, const std::vector<double>& trace) {
  std::ofstream out(path);
  out << "iteration,objective\n";
  char buf[64];
  for (std::size_t k = 0; k < trace.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", trace[k]);
    out << (k + 1) << ',' << buf << '\n';
  }
}

inline std::vector<double> read_trace_csv(const fs::path& path) {
  auto in = detail::open_input(path);
  std::string line;
  std::getline(in, line);
  std::vector<double> t;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    auto f = detail::split(line, ",");
    double v = 0;
    if (f.size() != 2 || !detail::parse_number(f[1], v)) throw ParseError(path.string(), lineno, "bad trace row");
    t.push_back(v);
  }
  return t;
}

inline void write_freqdist_csv(const fs::path& path, const FrequencyDistribution& d, const IdMap& ids) {
  std::ofstream out(path);
  out << "item_id,count\n";
  for (const auto& c : d.histogram) out << ids.item_id(c.item) << ',' << c.count << '\n';
}

inline void write_summary(const fs::path& path, const CellSummary& s) {
  nlohmann::ordered_json j;
  j["cell"] = s.cell;
  j["iterations"] = s.iterations;
  j["converged"] = s.converged;
  j["rank"] = s.rank;
  j["initial_objective"] = s.initial_objective;
  j["final_objective"] = s.final_objective;
  j["proxy_gap"] = s.proxy_gap;
  j["seconds"] = s.seconds;
  std::ofstream(path) << j.dump(2) << '\n';
}

inline CellSummary read_summary(const fs::path& path) {
  auto in = detail::open_input(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  CellSummary s;
  s.cell = j.at("cell").get<std::string>();
  s.iterations = j.at("iterations").get<int>();
  s.converged = j.at("converged").get<bool>();
  s.rank = j.at("rank").get<int>();
  s.initial_objective = j.at("initial_objective").get<double>();
  s.final_objective = j.at("final_objective").get<double>();
  s.proxy_gap = j.at("proxy_gap").get<double>();
  s.seconds = j.at("seconds").get<double>();
  return s;
}

// ---------------------------------------------------------------------------
// run_experiment

struct ExperimentResult {
  int cells = 0;
  int completed = 0;  // including cells skipped because already done
  int skipped = 0;
  int failed = 0;
  std::vector<CellSummary> summaries;  // in cell order, completed cells only
  fs::path reports;
};

inline fs::path cell_dir(const ExperimentConfig& cfg) { return cfg.output / "cells"; }

inline void write_reports_file(const fs::path& path, const std::vector<EvalReport>& rows) {
  std::ofstream out(path);
  out << kReportHeader << '\n';
  for (const auto& r : rows) write_report_row(out, r);
}

inline std::vector<EvalReport> read_reports(const fs::path& path) {
  auto in = detail::open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "empty reports file");
  detail::strip_cr(line);
  if (line != kReportHeader) throw ParseError(path.string(), 1, "unexpected reports header");
  std::vector<EvalReport> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto f = detail::split(line, ",");
    if (f.size() != 16) throw ParseError(path.string(), lineno, "expected 16 fields");
    EvalReport r;
    auto num = [&](std::string_view s) {
      double v = 0;
      if (!detail::parse_number(s, v)) throw ParseError(path.string(), lineno, "bad number '" + std::string(s) + "'");
      return v;
    };
    r.dataset = std::string(f[0]);
    r.fold = static_cast<int>(num(f[1]));
    r.strategy = std::string(f[2]);
    r.lambda_n = num(f[3]);
    r.lambda_d = num(f[4]);
    r.threshold = f[5].empty() ? std::numeric_limits<double>::quiet_NaN() : num(f[5]);
    r.N = static_cast<int>(num(f[6]));
    try {
      r.policy = parse_candidate_policy(f[7]);
    } catch (const ValidationError& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    r.precision = num(f[8]);
    r.recall = num(f[9]);
    r.mae = num(f[10]);
    r.rmse = num(f[11]);
    r.individual_diversity = num(f[12]);
    r.aggregate_diversity = static_cast<int>(num(f[13]));
    r.novelty = num(f[14]);
    r.gini = num(f[15]);
    rows.push_back(r);
  }
  return rows;
}

// Defined with the table code below.
inline void write_tradeoff_for(const ExperimentConfig& cfg, const fs::path& reports);

namespace detail {

inline void append_error(const fs::path& path, std::mutex& m, const std::string& cell, const std::string& stage,
                         const std::string& message) {
  std::lock_guard lock(m);
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (fresh) out << "cell,stage,message\n";
  std::string msg = message;
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  std::string quoted = "\"";
  for (char c : msg) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
  quoted += '"';
  out << cell << ',' << stage << ',' << quoted << '\n';
}

}  // namespace detail

// Runs every cell not yet marked done, then rebuilds reports.csv from all
// completed cells in cell order (so reruns and --jobs give identical bytes).
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const auto cells = enumerate_cells(cfg);
  const fs::path dir = cell_dir(cfg);
  fs::create_directories(dir);
  std::ofstream(cfg.output / "config.txt") << cfg.dump();
  const fs::path errors_path = cfg.output / "errors.csv";
  fs::remove(errors_path);

  ExperimentResult result;
  result.cells = static_cast<int>(cells.size());

  std::vector<std::size_t> todo;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (fs::exists(dir / (cells[k].id() + ".done"))) ++result.skipped;
    else todo.push_back(k);
  }

  std::mutex io_mutex;
  std::optional<FoldCache> data;
  if (!todo.empty()) data = load_folds(cfg);

  // Bias models per (fold, replication), fitted once and shared read-only.
  std::map<std::pair<int, int>, FoldContext> contexts;
  std::set<std::pair<int, int>> failed_contexts;
  for (auto k : todo) {
    const auto key = std::pair{cells[k].fold, cells[k].replication};
    if (contexts.count(key) || failed_contexts.count(key)) continue;
    try {
      contexts.emplace(key, make_context(cfg, *data, key.first, key.second));
      const auto bias_path = dir / ("bias_f" + std::to_string(key.first) + "_r" + std::to_string(key.second) + ".txt");
      save_bias_model(bias_path, contexts.at(key).bias);
    } catch (const std::exception& e) {
      failed_contexts.insert(key);
      detail::append_error(errors_path, io_mutex, "f" + std::to_string(key.first) + "_r" + std::to_string(key.second),
                           "prepare", e.what());
    }
  }

  std::atomic<std::size_t> next{0};
  std::atomic<int> failed{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t slot = next.fetch_add(1);
      if (slot >= todo.size()) return;
      const CellSpec& cell = cells[todo[slot]];
      const std::string id = cell.id();
      auto it = contexts.find({cell.fold, cell.replication});
      if (it == contexts.end()) {
        ++failed;
        detail::append_error(errors_path, io_mutex, id, "prepare", "fold preparation failed");
        continue;
      }
      const FoldContext& ctx = it->second;
      std::string stage = "solve";
      try {
        const auto t0 = std::chrono::steady_clock::now();
        SolveResult res = solve_cell(cfg, ctx, cell);
        const auto t1 = std::chrono::steady_clock::now();
        stage = "evaluate";
        CellEvaluation ev = evaluate_cell(cfg, ctx, cell, res.Z);
        stage = "write";
        write_trace_csv(cfg.output / ("trace_" + id + ".csv"), res.state.objective_trace);
        for (const auto& fq : ev.frequencies)
          write_freqdist_csv(cfg.output / ("freqdist_" + id + "_" + fq.name + ".csv"), fq.dist, *ctx.ids);
        if (cfg.save_matrices) {
          MatrixHeader h;
          h.lambda_n = res.state.lambda_n;
          h.lambda_d = res.state.lambda_d;
          h.eta = res.state.eta;
          h.iterations = res.state.iter;
          h.objective = res.state.final_objective();
          save_matrix(cfg.output / ("Z_" + id + ".bin"), res.Z, h);
        }
        {
          std::ofstream rows(dir / (id + ".rows.csv"));
          for (const auto& r : ev.rows) write_report_row(rows, r);
        }
        CellSummary s;
        s.cell = id;
        s.iterations = res.state.iter;
        s.converged = res.state.converged;
        s.rank = res.state.rank;
        s.initial_objective = res.state.initial_objective;
        s.final_objective = res.state.final_objective();
        s.proxy_gap = res.state.relative_proxy_gap();
        s.seconds = std::chrono::duration<double>(t1 - t0).count();
        write_summary(dir / (id + ".json"), s);
        std::ofstream(dir / (id + ".done")) << "ok\n";
        if (progress) {
          std::lock_guard lock(io_mutex);
          *progress << id << ": " << s.iterations << " iterations, " << (s.converged ? "converged" : "max_iter")
                    << ", " << detail::fmt_num(s.seconds) << " s" << std::endl;
        }
      } catch (const std::exception& e) {
        ++failed;
        detail::append_error(errors_path, io_mutex, id, stage, e.what());
      }
    }
  };
  const int threads = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(todo.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  result.failed = failed.load();

  // Assemble reports.csv from completed cells in order.
  result.reports = cfg.output / "reports.csv";
  std::ofstream out(result.reports);
  out << kReportHeader << '\n';
  for (const auto& cell : cells) {
    const std::string id = cell.id();
    if (!fs::exists(dir / (id + ".done"))) continue;
    std::ifstream rows(dir / (id + ".rows.csv"));
    out << rows.rdbuf();
    auto s = read_summary(dir / (id + ".json"));
    s.trace = read_trace_csv(cfg.output / ("trace_" + id + ".csv"));
    result.summaries.push_back(std::move(s));
    ++result.completed;
  }
  out.close();
  write_tradeoff_for(cfg, result.reports);
  return result;
}

// ---------------------------------------------------------------------------
// Matched-precision-loss table

// Fold-averaged metrics for one grid point of one strategy.
struct GridPoint {
  std::string strategy;
  double lambda_n = 0.0;
  double lambda_d = 0.0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  int N = 0;
  CandidatePolicy policy = CandidatePolicy::all_unrated;
  int runs = 0;
  double precision = 0.0, recall = 0.0, mae = 0.0, rmse = 0.0;
  double individual_diversity = 0.0, aggregate_diversity = 0.0, novelty = 0.0, gini = 0.0;
};

inline std::vector<GridPoint> average_over_folds(const std::vector<EvalReport>& rows) {
  using Key = std::tuple<std::string, double, double, double, int, int>;
  std::map<Key, GridPoint> acc;
  std::vector<Key> order;
  for (const auto& r : rows) {
    // NaN does not order; map it to -inf inside the key.
    const double t = std::isnan(r.threshold) ? -std::numeric_limits<double>::infinity() : r.threshold;
    Key key{r.strategy, r.lambda_n, r.lambda_d, t, r.N, static_cast<int>(r.policy)};
    auto [it, fresh] = acc.try_emplace(key);
    auto& p = it->second;
    if (fresh) {
      order.push_back(key);
      p.strategy = r.strategy;
      p.lambda_n = r.lambda_n;
      p.lambda_d = r.lambda_d;
      p.threshold = r.threshold;
      p.N = r.N;
      p.policy = r.policy;
    }
    ++p.runs;
    p.precision += r.precision;
    p.recall += r.recall;
    p.mae += r.mae;
    p.rmse += r.rmse;
    p.individual_diversity += r.individual_diversity;
    p.aggregate_diversity += r.aggregate_diversity;
    p.novelty += r.novelty;
    p.gini += r.gini;
  }
  std::vector<GridPoint> out;
  for (const auto& k : order) {
    auto p = acc.at(k);
    const double n = p.runs;
    p.precision /= n;
    p.recall /= n;
    p.mae /= n;
    p.rmse /= n;
    p.individual_diversity /= n;
    p.aggregate_diversity /= n;
    p.novelty /= n;
    p.gini /= n;
    out.push_back(p);
  }
  return out;
}

// A grid point with precision taken from one candidate policy and the
// diversity measures from another, expressed relative to the baseline.
struct Comparison {
  std::string strategy;
  double lambda_n = 0.0;
  double lambda_d = 0.0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  int N = 0;
  double precision = 0.0;
  double precision_loss = 0.0;  // percent of baseline precision
  double ad_change = 0.0;       // percent changes
  double id_change = 0.0;
  double nv_change = 0.0;
  double gc_change = 0.0;
};

struct TradeoffOptions {
  std::string baseline = "MC";
  CandidatePolicy precision_policy = CandidatePolicy::test_only;
  CandidatePolicy diversity_policy = CandidatePolicy::all_unrated;
  std::vector<double> targets{3, 3.5, 4, 4.5, 5, 5.5, 6, 6.5};
  double window = 1.0;  // accepted |loss - target|, percentage points
};

// Every non-baseline grid point compared with the baseline at the same
// lambda_n and N. Falls back to the other policy when only one is present.
inline std::vector<Comparison> compare_to_baseline(const std::vector<EvalReport>& rows,
                                                   const TradeoffOptions& opt = {}) {
  const auto points = average_over_folds(rows);
  std::set<CandidatePolicy> present;
  for (const auto& p : points) present.insert(p.policy);
  const auto prec_policy = present.count(opt.precision_policy) ? opt.precision_policy : *present.begin();
  const auto div_policy = present.count(opt.diversity_policy) ? opt.diversity_policy : *present.begin();

  auto find = [&](const std::string& s, double ln, double ld, double t, int n, CandidatePolicy pol) -> const GridPoint* {
    for (const auto& p : points) {
      const bool same_t = (std::isnan(p.threshold) && std::isnan(t)) || p.threshold == t;
      if (p.strategy == s && p.lambda_n == ln && p.lambda_d == ld && same_t && p.N == n && p.policy == pol) return &p;
    }
    return nullptr;
  };
  auto pct = [](double v, double base) { return base != 0.0 ? 100.0 * (v - base) / base : 0.0; };

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<Comparison> out;
  for (const auto& p : points) {
    if (p.policy != prec_policy) continue;
    const GridPoint* div = find(p.strategy, p.lambda_n, p.lambda_d, p.threshold, p.N, div_policy);
    const GridPoint* base_p = find(opt.baseline, p.lambda_n, 0.0, nan, p.N, prec_policy);
    const GridPoint* base_d = find(opt.baseline, p.lambda_n, 0.0, nan, p.N, div_policy);
    if (!div || !base_p || !base_d) continue;
    Comparison c;
    c.strategy = p.strategy;
    c.lambda_n = p.lambda_n;
    c.lambda_d = p.lambda_d;
    c.threshold = p.threshold;
    c.N = p.N;
    c.precision = p.precision;
    c.precision_loss = base_p->precision != 0.0 ? 100.0 * (base_p->precision - p.precision) / base_p->precision : 0.0;
    c.ad_change = pct(div->aggregate_diversity, base_d->aggregate_diversity);
    c.id_change = pct(div->individual_diversity, base_d->individual_diversity);
    c.nv_change = pct(div->novelty, base_d->novelty);
    c.gc_change = pct(div->gini, base_d->gini);
    out.push_back(c);
  }
  return out;
}

struct TradeoffRow {
  int N = 0;
  double target = 0.0;
  std::string strategy;
  std::optional<Comparison> match;  // empty: nothing within the window
};

// For each N, target loss and non-baseline strategy, the grid point whose
// precision loss is nearest the target (first in grid order on ties).
inline std::vector<TradeoffRow> tradeoff_table(const std::vector<EvalReport>& rows, const TradeoffOptions& opt = {}) {
  const auto comps = compare_to_baseline(rows, opt);
  std::vector<int> ns;
  std::vector<std::string> strategies;
  for (const auto& c : comps) {
    if (std::find(ns.begin(), ns.end(), c.N) == ns.end()) ns.push_back(c.N);
    if (c.strategy != opt.baseline && std::find(strategies.begin(), strategies.end(), c.strategy) == strategies.end())
      strategies.push_back(c.strategy);
  }
  std::sort(ns.begin(), ns.end());
  std::vector<TradeoffRow> out;
  for (int n : ns)
    for (double target : opt.targets)
      for (const auto& s : strategies) {
        TradeoffRow row{n, target, s, std::nullopt};
        double best = std::numeric_limits<double>::infinity();
        for (const auto& c : comps) {
          if (c.N != n || c.strategy != s) continue;
          const double gap = std::abs(c.precision_loss - target);
          if (gap <= opt.window && gap < best) {
            best = gap;
            row.match = c;
          }
        }
        out.push_back(row);
      }
  return out;
}

inline constexpr const char* kTradeoffHeader =
    "N,target_loss,strategy,lambda_n,lambda_d,T_R,precision_loss,ad_change,id_change,nv_change,gc_change";

inline void write_tradeoff_csv(std::ostream& out, const std::vector<TradeoffRow>& rows) {
  using detail::fmt_num;
  out << kTradeoffHeader << '\n';
  for (const auto& r : rows) {
    out << r.N << ',' << fmt_num(r.target) << ',' << r.strategy << ',';
    if (!r.match) {
      out << ",,,,,,,\n";
      continue;
    }
    const auto& c = *r.match;
    out << fmt_num(c.lambda_n) << ',' << fmt_num(c.lambda_d) << ','
        << (std::isnan(c.threshold) ? std::string() : fmt_num(c.threshold)) << ',' << fmt_num(c.precision_loss)
        << ',' << fmt_num(c.ad_change) << ',' << fmt_num(c.id_change) << ',' << fmt_num(c.nv_change) << ','
        << fmt_num(c.gc_change) << '\n';
  }
}

// tradeoff.csv next to the reports when they hold baseline rows.
inline void write_tradeoff_for(const ExperimentConfig& cfg, const fs::path& reports) {
  const auto rows = read_reports(reports);
  if (std::none_of(rows.begin(), rows.end(), [](const EvalReport& r) { return r.strategy == "MC"; })) return;
  TradeoffOptions opt;
  opt.targets = cfg.loss_targets;
  std::ofstream out(reports.parent_path() / "tradeoff.csv");
  write_tradeoff_csv(out, tradeoff_table(rows, opt));
}

}  // namespace mcad
