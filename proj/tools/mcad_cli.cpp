// mcad: command-line front end.
//
//   mcad ingest   --dataset ml100k --data-dir data/ml-100k --out cache/
//   mcad fit      [--config f] --fold 0 --lambda-n 20 --ratio 3 --out Z.bin
//   mcad evaluate [--config f] --fold 0 --matrix Z.bin --bias Z.bin.bias.txt
//   mcad sweep    --config f [--jobs 4] [--dry-run]
//   mcad report   --reports out/reports.csv [--out out/tradeoff.csv]

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcad/mcad.hpp"

namespace {

constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::string> dataset, data_dir, output, fold_cache;
  std::optional<int> folds, jobs;
  std::optional<std::uint64_t> seed;
  bool large = false;
};

void add_common(CLI::App* app, CommonOptions& o, bool config_required = false) {
  auto* c = app->add_option("-c,--config", o.config, "flat key = value config file");
  if (config_required) c->required();
  app->add_option("--set", o.sets, "override a config key (key=value), repeatable");
  app->add_option("--dataset", o.dataset, "ml100k or ml1m");
  app->add_option("--data-dir", o.data_dir, "directory with the raw dataset files");
  app->add_option("--fold-cache", o.fold_cache, "fold cache written by `ingest`");
  app->add_option("--folds", o.folds, "number of folds");
  app->add_option("--seed", o.seed, "split / SGD seed");
  app->add_option("--output", o.output, "output directory");
  app->add_option("--jobs", o.jobs, "worker threads for grid cells");
  app->add_flag("--large", o.large, "allow the MovieLens 1M dataset");
}

mcad::ExperimentConfig resolve(const CommonOptions& o) {
  mcad::ExperimentConfig cfg;
  if (!o.config.empty()) {
    if (!std::filesystem::exists(o.config)) throw UsageError("config file not found: " + o.config);
    try {
      cfg.load(o.config);
    } catch (const mcad::ParseError& e) {
      throw UsageError(e.what());
    }
  }
  try {
    if (o.dataset) cfg.set("dataset", *o.dataset);
    if (o.data_dir) cfg.set("data_dir", *o.data_dir);
    if (o.fold_cache) cfg.set("fold_cache", *o.fold_cache);
    if (o.output) cfg.set("output", *o.output);
    if (o.folds) cfg.folds = *o.folds;
    if (o.jobs) cfg.jobs = *o.jobs;
    if (o.seed) cfg.seed = *o.seed;
    for (const auto& kv : o.sets) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      cfg.set(std::string(mcad::detail::trim(kv.substr(0, eq))), std::string(mcad::detail::trim(kv.substr(eq + 1))));
    }
    cfg.validate();
  } catch (const mcad::ValidationError& e) {
    throw UsageError(e.what());
  }
  if (cfg.dataset == "ml1m" && !o.large) throw UsageError("the ml1m dataset is slow; pass --large to run it");
  return cfg;
}

void print_trace_row(int k, double obj) { std::printf("%d,%.17g\n", k, obj); }

int cmd_ingest(const CommonOptions& o, const std::string& out) {
  auto cfg = resolve(o);
  auto ds = mcad::load_dataset(cfg.dataset, cfg.data_dir);
  auto folds = mcad::make_folds(ds.ratings, cfg.folds, cfg.seed);
  mcad::write_fold_cache(out, ds, folds);
  std::cout << "users " << ds.ratings.num_users << ", items " << ds.ratings.num_items << ", ratings "
            << ds.ratings.size() << ", genres " << ds.genres.num_genres() << ", folds " << folds.size() << " -> "
            << out << '\n';
  return 0;
}

mcad::CellSpec cell_from(int fold, int replication, double lambda_n, double ratio) {
  mcad::CellSpec c;
  c.fold = fold;
  c.replication = replication;
  c.mcad = ratio > 0.0;
  c.lambda_n = lambda_n;
  c.ratio = ratio;
  return c;
}

int cmd_fit(const CommonOptions& o, int fold, int replication, double lambda_n, double ratio, const std::string& out,
            std::string bias_out) {
  auto cfg = resolve(o);
  if (fold < 0 || fold >= cfg.folds) throw UsageError("--fold out of range");
  auto data = mcad::load_folds(cfg);
  auto ctx = mcad::make_context(cfg, data, fold, replication);
  auto cell = cell_from(fold, replication, lambda_n, ratio);
  std::printf("iteration,objective\n");
  auto res = mcad::solve_cell(cfg, ctx, cell, print_trace_row);
  mcad::MatrixHeader h;
  h.lambda_n = res.state.lambda_n;
  h.lambda_d = res.state.lambda_d;
  h.eta = res.state.eta;
  h.iterations = res.state.iter;
  h.objective = res.state.final_objective();
  mcad::save_matrix(out, res.Z, h);
  if (bias_out.empty()) bias_out = out + ".bias.txt";
  mcad::save_bias_model(bias_out, ctx.bias);
  std::cerr << cell.id() << ": " << res.state.iter << " iterations, "
            << (res.state.converged ? "converged" : "stopped at max_iter") << ", rank " << res.state.rank
            << ", objective " << h.objective << "\n";
  return 0;
}

int cmd_evaluate(const CommonOptions& o, int fold, int replication, const std::string& matrix,
                 const std::string& bias_path, const std::string& out) {
  auto cfg = resolve(o);
  if (fold < 0 || fold >= cfg.folds) throw UsageError("--fold out of range");
  auto data = mcad::load_folds(cfg);
  auto stored = mcad::load_matrix(matrix);
  auto bias = mcad::load_bias_model(bias_path);
  auto ctx = mcad::make_context(cfg, data, fold, replication, &bias);
  const double ln = stored.header.lambda_n;
  auto cell = cell_from(fold, replication, ln, ln > 0.0 ? stored.header.lambda_d / ln : 0.0);
  auto ev = mcad::evaluate_cell(cfg, ctx, cell, stored.Z);
  std::ofstream file;
  if (!out.empty()) {
    file.open(out);
    if (!file) throw mcad::Error("cannot write " + out);
  }
  std::ostream& os = out.empty() ? std::cout : file;
  os << mcad::kReportHeader << '\n';
  for (const auto& r : ev.rows) mcad::write_report_row(os, r);
  return 0;
}

int cmd_sweep(const CommonOptions& o, bool dry_run) {
  auto cfg = resolve(o);
  const auto cells = mcad::enumerate_cells(cfg);
  if (dry_run) {
    std::cout << cfg.dump() << "cells = " << cells.size() << '\n';
    for (const auto& c : cells) std::cout << "  " << c.id() << '\n';
    return 0;
  }
  auto res = mcad::run_experiment(cfg, &std::cerr);
  std::cerr << res.completed << "/" << res.cells << " cells complete (" << res.skipped << " reused, " << res.failed
            << " failed) -> " << res.reports.string() << '\n';
  if (res.cells > 0 && res.completed == 0) return 1;
  return 0;
}

int cmd_report(const std::string& reports, std::string out, const std::string& baseline,
               const std::vector<double>& targets, double window) {
  mcad::TradeoffOptions opt;
  opt.baseline = baseline;
  if (!targets.empty()) opt.targets = targets;
  opt.window = window;
  auto rows = mcad::read_reports(reports);
  auto table = mcad::tradeoff_table(rows, opt);
  if (out.empty()) out = (std::filesystem::path(reports).parent_path() / "tradeoff.csv").string();
  std::ofstream file(out);
  if (!file) throw mcad::Error("cannot write " + out);
  mcad::write_tradeoff_csv(file, table);
  std::cerr << table.size() << " rows -> " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Matrix completion with a genre-diversity regularizer: experiments and evaluation"};
  app.require_subcommand(1);

  CommonOptions ingest_o, fit_o, eval_o, sweep_o;

  auto* ingest = app.add_subcommand("ingest", "parse a dataset and write its fold cache");
  add_common(ingest, ingest_o);
  std::string ingest_out;
  ingest->add_option("--out", ingest_out, "cache directory")->required();

  auto* fit = app.add_subcommand("fit", "solve one fold and save the completed matrix");
  add_common(fit, fit_o);
  int fit_fold = 0, fit_rep = 0;
  double fit_ln = 10.0, fit_ratio = 0.0;
  std::string fit_out, fit_bias;
  fit->add_option("--fold", fit_fold, "fold index");
  fit->add_option("--replication", fit_rep, "replication index (SGD seed offset)");
  fit->add_option("--lambda-n", fit_ln, "nuclear-norm weight");
  fit->add_option("--ratio", fit_ratio, "lambda_d / lambda_n (0 = plain completion)");
  fit->add_option("--out", fit_out, "matrix file")->required();
  fit->add_option("--bias-out", fit_bias, "bias model file (default <out>.bias.txt)");

  auto* evaluate = app.add_subcommand("evaluate", "rank and score a saved matrix");
  add_common(evaluate, eval_o);
  int eval_fold = 0, eval_rep = 0;
  std::string eval_matrix, eval_bias, eval_out;
  evaluate->add_option("--fold", eval_fold, "fold index");
  evaluate->add_option("--replication", eval_rep, "replication index");
  evaluate->add_option("--matrix", eval_matrix, "matrix written by fit")->required();
  evaluate->add_option("--bias", eval_bias, "bias model written by fit")->required();
  evaluate->add_option("--out", eval_out, "report CSV (default stdout)");

  auto* sweep = app.add_subcommand("sweep", "run the configured grid over all folds");
  add_common(sweep, sweep_o, true);
  bool dry_run = false;
  sweep->add_flag("--dry-run", dry_run, "print the resolved grid and exit");

  auto* report = app.add_subcommand("report", "matched-precision-loss comparison table");
  std::string rep_in, rep_out, rep_base = "MC";
  std::vector<double> rep_targets;
  double rep_window = 1.0;
  report->add_option("--reports", rep_in, "reports.csv from sweep")->required();
  report->add_option("--out", rep_out, "output CSV (default tradeoff.csv next to the reports)");
  report->add_option("--baseline", rep_base, "baseline strategy");
  report->add_option("--targets", rep_targets, "precision-loss targets in percent")->delimiter(',');
  report->add_option("--window", rep_window, "accepted distance from a target, percentage points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*ingest) return cmd_ingest(ingest_o, ingest_out);
    if (*fit) return cmd_fit(fit_o, fit_fold, fit_rep, fit_ln, fit_ratio, fit_out, fit_bias);
    if (*evaluate) return cmd_evaluate(eval_o, eval_fold, eval_rep, eval_matrix, eval_bias, eval_out);
    if (*sweep) return cmd_sweep(sweep_o, dry_run);
    if (*report) return cmd_report(rep_in, rep_out, rep_base, rep_targets, rep_window);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsage;
}
