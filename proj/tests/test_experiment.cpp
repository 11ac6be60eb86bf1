#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mcad/experiment.hpp"
#include "mcad/matrix_io.hpp"
#include "test_util.hpp"

using namespace mcad;
using mcad::testing::QuietLog;
using mcad::testing::TempDir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// A small MovieLens-100K-shaped dataset: rank-2 taste plus noise, rounded to 1..5.
void write_synthetic_ml100k(const fs::path& dir, int users = 40, int items = 60, int per_user = 24) {
  fs::create_directories(dir);
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::array<double, 2>> pu(static_cast<std::size_t>(users)), qi(static_cast<std::size_t>(items));
  for (auto& v : pu) v = {nd(rng), nd(rng)};
  for (auto& v : qi) v = {nd(rng), nd(rng)};

  std::ofstream data(dir / "u.data");
  std::vector<int> order(static_cast<std::size_t>(items));
  for (int u = 0; u < users; ++u) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int k = 0; k < per_user; ++k) {
      const int i = order[static_cast<std::size_t>(k)];
      const auto& a = pu[static_cast<std::size_t>(u)];
      const auto& b = qi[static_cast<std::size_t>(i)];
      double r = 3.4 + 0.8 * (a[0] * b[0] + a[1] * b[1]) + 0.4 * nd(rng);
      r = std::clamp(std::round(r), 1.0, 5.0);
      data << (u + 1) << '\t' << (i + 1) << '\t' << static_cast<int>(r) << '\t' << 880000000 + u * 100 + k << '\n';
    }
  }

  std::ofstream item(dir / "u.item");
  std::uniform_int_distribution<int> genre(1, 6);
  std::bernoulli_distribution second(0.4);
  for (int i = 0; i < items; ++i) {
    std::array<int, 19> flags{};
    flags[static_cast<std::size_t>(genre(rng))] = 1;
    if (second(rng)) flags[static_cast<std::size_t>(genre(rng))] = 1;
    item << (i + 1) << "|Movie " << i << " (1995)|01-Jan-1995||http://example.org";
    for (int f : flags) item << '|' << f;
    item << '\n';
  }
}

class ExperimentTest : public ::testing::Test {
 protected:
  void SetUp() override { write_synthetic_ml100k(tmp.path() / "data"); }

  ExperimentConfig base_config(const std::string& out = "out") const {
    ExperimentConfig c;
    c.dataset = "ml100k";
    c.data_dir = tmp.path() / "data";
    c.folds = 3;
    c.fold_ids = {0};
    c.lambda_n = {2.0};
    c.ratios = {0.0};
    c.strategies = {"MC"};
    c.policies = {CandidatePolicy::test_only};
    c.thresholds = {3.5, 4.0};
    c.max_iter = 300;
    c.tol = 1e-9;
    c.rel_tol = 0.0;
    c.output = tmp.path() / out;
    return c;
  }

  TempDir tmp;
  QuietLog quiet;
};

}  // namespace

TEST(ExperimentConfig, LoadsFlatKeyValueFile) {
  TempDir dir;
  auto p = dir.write("cfg.txt",
                     "# grid\n"
                     "dataset = ml100k\n"
                     "lambda_n = 2, 5 # two points\n"
                     "ratio = 0, 1.5\n"
                     "N = 5,10\n"
                     "strategies = MC, MCAD\n"
                     "candidate_policies = test-only\n"
                     "eta = lambda_n\n"
                     "\n"
                     "jobs = 3\n");
  auto c = ExperimentConfig::from_file(p);
  EXPECT_EQ(c.lambda_n, (std::vector<double>{2, 5}));
  EXPECT_EQ(c.ratios, (std::vector<double>{0, 1.5}));
  EXPECT_EQ(c.N, (std::vector<int>{5, 10}));
  EXPECT_EQ(c.strategies, (std::vector<std::string>{"MC", "MCAD"}));
  EXPECT_EQ(c.policies, (std::vector<CandidatePolicy>{CandidatePolicy::test_only}));
  EXPECT_FALSE(c.eta.has_value());
  EXPECT_EQ(c.jobs, 3);
  EXPECT_NO_THROW(c.validate());
}

TEST(ExperimentConfig, UnknownKeyReportsLine) {
  TempDir dir;
  auto p = dir.write("cfg.txt", "dataset = ml100k\nlambda = 3\n");
  try {
    ExperimentConfig::from_file(p);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("lambda"), std::string::npos);
  }
  EXPECT_THROW(ExperimentConfig::from_file(dir.write("b.txt", "no equals sign\n")), ParseError);
  EXPECT_THROW(ExperimentConfig::from_file(dir.write("c.txt", "N = five\n")), ParseError);
}

TEST(ExperimentConfig, DumpLoadsBackToSameDump) {
  TempDir dir;
  ExperimentConfig c;
  c.set("lambda_n", "1.5, 20");
  c.set("ratio", "0, 0.3");
  c.set("T_R", "3.5, 4.25");
  c.set("diversity_target", "ratings");
  c.set("save_matrices", "true");
  const auto text = c.dump();
  auto back = ExperimentConfig::from_file(dir.write("d.txt", text));
  EXPECT_EQ(back.dump(), text);
}

TEST(ExperimentConfig, ValidationRejectsBadGrids) {
  auto bad = [](const std::string& key, const std::string& value) {
    ExperimentConfig c;
    c.set(key, value);
    return c;
  };
  EXPECT_THROW(bad("N", "0").validate(), ValidationError);
  EXPECT_THROW(bad("N", "51").validate(), ValidationError);
  EXPECT_NO_THROW(bad("N", "50").validate());
  EXPECT_THROW(bad("lambda_n", "-1").validate(), ValidationError);
  EXPECT_THROW(bad("ratio", "0").validate(), ValidationError);  // MCAD requested
  EXPECT_NO_THROW(
      [] {
        ExperimentConfig c;
        c.set("ratio", "0");
        c.set("strategies", "MC");
        return c;
      }()
          .validate());
  EXPECT_THROW(bad("strategies", "MF").validate(), ValidationError);
  EXPECT_THROW(bad("T_R", "4, 3.5").validate(), ValidationError);
  EXPECT_THROW(bad("folds", "1").validate(), ValidationError);
  EXPECT_THROW(bad("fold_ids", "5").validate(), ValidationError);
  EXPECT_THROW(bad("jobs", "0").validate(), ValidationError);
  EXPECT_THROW(bad("inner_solver", "magic"), ValidationError);
  EXPECT_THROW(bad("candidate_policies", "everything"), ValidationError);
}

TEST(EnumerateCells, OneMcCellPerLambdaAndOneMcadCellPerPositiveRatio) {
  ExperimentConfig c;
  c.fold_ids = {0, 3};
  c.lambda_n = {1, 2};
  c.ratios = {0, 1, 3};
  c.strategies = {"MC", "MCAD"};
  auto cells = enumerate_cells(c);
  ASSERT_EQ(cells.size(), 2u * 2u * 3u);
  std::set<std::string> ids;
  for (const auto& cell : cells) ids.insert(cell.id());
  EXPECT_EQ(ids.size(), cells.size());
  EXPECT_TRUE(ids.count("f3_r0_MC_ln2"));
  EXPECT_TRUE(ids.count("f0_r0_MCAD_ln1_ratio3"));
  EXPECT_FALSE(ids.count("f0_r0_MCAD_ln1_ratio0"));

  c.strategies = {"MCAD"};
  EXPECT_EQ(enumerate_cells(c).size(), 2u * 2u * 2u);
  c.strategies = {"MC-IA"};
  c.replications = 2;
  EXPECT_EQ(enumerate_cells(c).size(), 2u * 2u * 2u);
}

TEST_F(ExperimentTest, SingleMcCellGivesExactlyOneRow) {
  auto cfg = base_config();
  auto res = run_experiment(cfg);
  EXPECT_EQ(res.cells, 1);
  EXPECT_EQ(res.completed, 1);
  EXPECT_EQ(res.failed, 0);
  auto rows = read_reports(res.reports);
  ASSERT_EQ(rows.size(), 1u);
  const auto& r = rows[0];
  EXPECT_EQ(r.dataset, "ml100k");
  EXPECT_EQ(r.fold, 0);
  EXPECT_EQ(r.strategy, "MC");
  EXPECT_EQ(r.lambda_n, 2.0);
  EXPECT_EQ(r.lambda_d, 0.0);
  EXPECT_TRUE(std::isnan(r.threshold));
  EXPECT_EQ(r.N, 5);
  EXPECT_EQ(r.policy, CandidatePolicy::test_only);
  EXPECT_GE(r.precision, 0.0);
  EXPECT_LE(r.precision, 1.0);
  EXPECT_GT(r.aggregate_diversity, 0);

  ASSERT_EQ(res.summaries.size(), 1u);
  const auto& s = res.summaries[0];
  EXPECT_EQ(s.cell, "f0_r0_MC_ln2");
  EXPECT_EQ(static_cast<int>(s.trace.size()), s.iterations);
  EXPECT_TRUE(fs::exists(cfg.output / "config.txt"));
  EXPECT_TRUE(fs::exists(cfg.output / "trace_f0_r0_MC_ln2.csv"));
  EXPECT_TRUE(fs::exists(cfg.output / "tradeoff.csv"));
  EXPECT_FALSE(fs::exists(cfg.output / "errors.csv"));
}

TEST_F(ExperimentTest, RowsCoverEveryStrategyThresholdAndPolicy) {
  auto cfg = base_config();
  cfg.strategies = {"MC", "MCAD", "MC-IA", "MC-RPRV"};
  cfg.ratios = {0.0, 1.0};
  cfg.N = {3, 5};
  cfg.policies = {CandidatePolicy::test_only, CandidatePolicy::all_unrated};
  auto res = run_experiment(cfg);
  EXPECT_EQ(res.cells, 2);
  auto rows = read_reports(res.reports);
  // Per N and policy: MC, 2 IA, 2 RPRV from the MC cell and one MCAD row.
  EXPECT_EQ(rows.size(), 2u * 2u * (1u + 2u + 2u + 1u));
  std::map<std::string, int> by_strategy;
  for (const auto& r : rows) ++by_strategy[r.strategy];
  EXPECT_EQ(by_strategy["MC"], 4);
  EXPECT_EQ(by_strategy["MC-IA"], 8);
  EXPECT_EQ(by_strategy["MC-RPRV"], 8);
  EXPECT_EQ(by_strategy["MCAD"], 4);
  for (const auto& r : rows) {
    if (r.strategy == "MCAD") EXPECT_EQ(r.lambda_d, 2.0);
    else EXPECT_EQ(r.lambda_d, 0.0);
  }
}

TEST_F(ExperimentTest, RerunReusesFinishedCellsAndReproducesBytes) {
  auto cfg = base_config();
  cfg.strategies = {"MC", "MCAD"};
  cfg.ratios = {0.0, 1.0};
  auto first = run_experiment(cfg);
  ASSERT_EQ(first.completed, 2);
  const auto reports = slurp(first.reports);
  const auto tradeoff = slurp(cfg.output / "tradeoff.csv");

  auto second = run_experiment(cfg);
  EXPECT_EQ(second.skipped, 2);
  EXPECT_EQ(second.completed, 2);
  EXPECT_EQ(slurp(second.reports), reports);
  EXPECT_EQ(slurp(cfg.output / "tradeoff.csv"), tradeoff);

  // An interrupted cell is recomputed to the same bytes.
  fs::remove(cell_dir(cfg) / "f0_r0_MCAD_ln2_ratio1.done");
  auto third = run_experiment(cfg);
  EXPECT_EQ(third.skipped, 1);
  EXPECT_EQ(slurp(third.reports), reports);
}

TEST_F(ExperimentTest, ParallelWorkersMatchSerialRun) {
  auto serial = base_config("serial");
  serial.strategies = {"MC", "MCAD"};
  serial.ratios = {0.0, 0.5, 2.0};
  serial.fold_ids = {0, 1};
  auto parallel = serial;
  parallel.output = tmp.path() / "parallel";
  parallel.jobs = 2;
  auto a = run_experiment(serial);
  auto b = run_experiment(parallel);
  EXPECT_EQ(a.completed, 6);
  EXPECT_EQ(b.completed, 6);
  EXPECT_EQ(slurp(a.reports), slurp(b.reports));
  EXPECT_EQ(slurp(serial.output / "trace_f1_r0_MCAD_ln2_ratio2.csv"),
            slurp(parallel.output / "trace_f1_r0_MCAD_ln2_ratio2.csv"));
}

TEST_F(ExperimentTest, FitThenEvaluateMatchesOneShotRows) {
  auto cfg = base_config();
  cfg.strategies = {"MCAD"};
  cfg.ratios = {1.5};
  cfg.fold_ids = {1};
  cfg.policies = {CandidatePolicy::test_only, CandidatePolicy::all_unrated};
  auto res = run_experiment(cfg);
  ASSERT_EQ(res.completed, 1);
  const auto oneshot = slurp(cell_dir(cfg) / "f1_r0_MCAD_ln2_ratio1.5.rows.csv");

  // Separate fit: solve, save both artifacts, then evaluate from the files alone.
  auto data = load_folds(cfg);
  auto ctx = make_context(cfg, data, 1, 0);
  CellSpec cell{1, 0, true, 2.0, 1.5};
  auto sol = solve_cell(cfg, ctx, cell);
  save_matrix(tmp / "Z.bin", sol.Z, MatrixHeader{0, 0, 2.0, 3.0, 1.0, sol.state.iter, 0.0});
  save_bias_model(tmp / "bias.txt", ctx.bias);

  auto stored = load_matrix(tmp / "Z.bin");
  auto bias = load_bias_model(tmp / "bias.txt");
  auto ctx2 = make_context(cfg, data, 1, 0, &bias);
  auto ev = evaluate_cell(cfg, ctx2, cell, stored.Z);
  std::ostringstream rows;
  for (const auto& r : ev.rows) write_report_row(rows, r);
  EXPECT_EQ(rows.str(), oneshot);
}

TEST_F(ExperimentTest, MissingDataFailsBeforeAnyCell) {
  auto cfg = base_config();
  cfg.data_dir = tmp.path() / "nowhere";
  EXPECT_THROW(run_experiment(cfg), Error);
}

TEST(MatrixIo, RoundTripIsExact) {
  TempDir dir;
  std::mt19937_64 rng(3);
  Eigen::MatrixXd z = mcad::testing::random_matrix(7, 5, rng) * 1e3;
  z(0, 0) = 1.0 / 3.0;
  z(6, 4) = -0.0;
  MatrixHeader h;
  h.lambda_n = 20;
  h.lambda_d = 0.1 / 3.0;
  h.eta = 1;
  h.iterations = 77;
  h.objective = 12345.678901234567;
  save_matrix(dir / "z.bin", z, h);
  auto s = load_matrix(dir / "z.bin");
  EXPECT_EQ(s.header.rows, 7);
  EXPECT_EQ(s.header.cols, 5);
  EXPECT_EQ(s.header.lambda_d, h.lambda_d);
  EXPECT_EQ(s.header.iterations, 77);
  EXPECT_EQ(s.header.objective, h.objective);
  EXPECT_EQ(s.Z, z);
}

TEST(MatrixIo, RejectsDamagedFiles) {
  TempDir dir;
  Eigen::MatrixXd z = Eigen::MatrixXd::Constant(4, 4, 2.5);
  save_matrix(dir / "z.bin", z, {});
  auto bytes = slurp(dir / "z.bin");
  dir.write("short.bin", bytes.substr(0, bytes.size() - 8));
  EXPECT_THROW(load_matrix(dir / "short.bin"), ParseError);
  dir.write("magic.bin", "MCADMAT 2\n" + bytes.substr(10));
  EXPECT_THROW(load_matrix(dir / "magic.bin"), ParseError);
  dir.write("nohdr.bin", "MCADMAT 1\nrows 4\n");
  EXPECT_THROW(load_matrix(dir / "nohdr.bin"), ParseError);
  EXPECT_THROW(load_matrix(dir / "absent.bin"), Error);
}

namespace {

EvalReport report(const std::string& strategy, int fold, double ld, double t, CandidatePolicy pol, double precision,
                  int ad, double id, double nv, double gini) {
  EvalReport r;
  r.dataset = "ml100k";
  r.fold = fold;
  r.strategy = strategy;
  r.lambda_n = 10;
  r.lambda_d = ld;
  r.threshold = t;
  r.N = 5;
  r.policy = pol;
  r.precision = precision;
  r.aggregate_diversity = ad;
  r.individual_diversity = id;
  r.novelty = nv;
  r.gini = gini;
  return r;
}

std::vector<EvalReport> synthetic_reports() {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const auto T = CandidatePolicy::test_only;
  const auto A = CandidatePolicy::all_unrated;
  std::vector<EvalReport> rows;
  for (int f = 0; f < 2; ++f) {
    rows.push_back(report("MC", f, 0, nan, T, 0.8, 0, 0, 0, 0));
    rows.push_back(report("MC", f, 0, nan, A, 0.1, 100, 0.5, 2.0, 0.8));
    // Fold average 0.776: 3% loss; diversity +20% AD, +10% ID, +50% NV, -25% GC.
    rows.push_back(report("MCAD", f, 5, nan, T, f == 0 ? 0.78 : 0.772, 0, 0, 0, 0));
    rows.push_back(report("MCAD", f, 5, nan, A, 0.1, f == 0 ? 110 : 130, 0.55, 3.0, 0.6));
    // 5% loss.
    rows.push_back(report("MCAD", f, 50, nan, T, 0.76, 0, 0, 0, 0));
    rows.push_back(report("MCAD", f, 50, nan, A, 0.1, 150, 0.6, 4.0, 0.4));
    // Identical to the baseline.
    rows.push_back(report("MC-IA", f, 0, 4.5, T, 0.8, 0, 0, 0, 0));
    rows.push_back(report("MC-IA", f, 0, 4.5, A, 0.1, 100, 0.5, 2.0, 0.8));
  }
  return rows;
}

}  // namespace

TEST(Tradeoff, ComparisonsAgainstHandComputedChanges) {
  auto comps = compare_to_baseline(synthetic_reports());
  // MC against itself is included with zero change.
  ASSERT_EQ(comps.size(), 4u);
  const auto& small = comps[1];
  EXPECT_EQ(small.strategy, "MCAD");
  EXPECT_EQ(small.lambda_d, 5);
  EXPECT_NEAR(small.precision_loss, 3.0, 1e-9);
  EXPECT_NEAR(small.ad_change, 20.0, 1e-9);
  EXPECT_NEAR(small.id_change, 10.0, 1e-9);
  EXPECT_NEAR(small.nv_change, 50.0, 1e-9);
  EXPECT_NEAR(small.gc_change, -25.0, 1e-9);
  const auto& big = comps[2];
  EXPECT_NEAR(big.precision_loss, 5.0, 1e-9);
  EXPECT_NEAR(big.ad_change, 50.0, 1e-9);
  const auto& same = comps[3];
  EXPECT_EQ(same.strategy, "MC-IA");
  EXPECT_EQ(same.precision_loss, 0.0);
  EXPECT_EQ(same.ad_change, 0.0);
  EXPECT_EQ(same.id_change, 0.0);
  EXPECT_EQ(same.nv_change, 0.0);
  EXPECT_EQ(same.gc_change, 0.0);
}

TEST(Tradeoff, NearestWithinWindowElseMissing) {
  TradeoffOptions opt;
  opt.targets = {0, 3, 4, 6, 6.5};
  auto table = tradeoff_table(synthetic_reports(), opt);
  auto find = [&](double target, const std::string& s) -> const TradeoffRow& {
    for (const auto& r : table)
      if (r.target == target && r.strategy == s) return r;
    throw std::runtime_error("row not found");
  };
  EXPECT_EQ(table.size(), 5u * 2u);
  ASSERT_TRUE(find(0, "MC-IA").match);
  EXPECT_EQ(find(0, "MC-IA").match->precision_loss, 0.0);
  EXPECT_EQ(find(0, "MC-IA").match->ad_change, 0.0);
  EXPECT_FALSE(find(3, "MC-IA").match);
  ASSERT_TRUE(find(3, "MCAD").match);
  EXPECT_EQ(find(3, "MCAD").match->lambda_d, 5);
  // 4% is equally far from both points; the first in grid order wins.
  ASSERT_TRUE(find(4, "MCAD").match);
  EXPECT_EQ(find(4, "MCAD").match->lambda_d, 5);
  ASSERT_TRUE(find(6, "MCAD").match);
  EXPECT_EQ(find(6, "MCAD").match->lambda_d, 50);
  EXPECT_FALSE(find(6.5, "MCAD").match);

  std::ostringstream csv;
  write_tradeoff_csv(csv, table);
  std::istringstream lines(csv.str());
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  EXPECT_EQ(header, kTradeoffHeader);
  EXPECT_EQ(first, "5,0,MCAD,,,,,,,,");
}
