#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "mcad/ranking.hpp"
#include "test_util.hpp"

using namespace mcad;
using mcad::testing::QuietLog;

namespace {

RatingTriples empty_train(int users, int items) {
  RatingTriples t;
  t.num_users = users;
  t.num_items = items;
  return t;
}

Eigen::MatrixXd row(std::initializer_list<double> v) {
  Eigen::MatrixXd m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) m(0, k++) = x;
  return m;
}

RatingTriples random_train(int users, int items, std::mt19937_64& rng) {
  RatingTriples t = empty_train(users, items);
  std::bernoulli_distribution keep(0.3);
  std::uniform_int_distribution<int> val(1, 5);
  for (int u = 0; u < users; ++u)
    for (int i = 0; i < items; ++i)
      if (keep(rng)) t.entries.push_back({u, i, double(val(rng)), 0});
  return t;
}

}  // namespace

TEST(RankStandard, TieGoesToLowerIndex) {
  auto train = empty_train(1, 4);
  auto pool = CandidatePool::build(train, nullptr, CandidatePolicy::all_unrated);
  auto lists = rank_standard(row({4.2, 3.9, 3.9, 2.0}), pool, 2);
  ASSERT_EQ(lists.size(), 1u);
  EXPECT_EQ(lists[0].items, (std::vector<int>{0, 1}));
  EXPECT_FALSE(lists[0].short_list);
}

TEST(RankStandard, ShortPoolFlagged) {
  RatingTriples train = empty_train(1, 4);
  train.entries = {{0, 0, 3, 0}, {0, 2, 4, 0}};
  auto pool = CandidatePool::build(train, nullptr, CandidatePolicy::all_unrated);
  auto lists = rank_standard(row({9, 1, 9, 2}), pool, 5);
  EXPECT_EQ(lists[0].items, (std::vector<int>{3, 1}));
  EXPECT_TRUE(lists[0].short_list);
}

TEST(RankStandard, ExcludesTrainingItemsAndSortsScores) {
  std::mt19937_64 rng(1);
  auto train = random_train(12, 30, rng);
  Eigen::MatrixXd scores = Eigen::MatrixXd::Random(12, 30);
  auto pool = CandidatePool::build(train, nullptr, CandidatePolicy::all_unrated);
  auto lists = rank_standard(scores, pool, 6);
  std::set<std::pair<int, int>> rated;
  for (const auto& r : train.entries) rated.insert({r.user, r.item});
  for (const auto& l : lists) {
    for (int i : l.items) EXPECT_FALSE(rated.count({l.user, i}));
    for (std::size_t k = 1; k < l.scores.size(); ++k) EXPECT_GE(l.scores[k - 1], l.scores[k]);
  }
}

TEST(RankStandard, SelectedSetInvariantUnderItemPermutation) {
  std::mt19937_64 rng(2);
  const int n = 25;
  Eigen::MatrixXd scores = Eigen::MatrixXd::Random(5, n);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd permuted(5, n);
  for (int i = 0; i < n; ++i) permuted.col(perm[i]) = scores.col(i);
  auto train = empty_train(5, n);
  auto pool = CandidatePool::build(train, nullptr, CandidatePolicy::all_unrated);
  auto a = rank_standard(scores, pool, 4);
  auto b = rank_standard(permuted, pool, 4);
  for (int u = 0; u < 5; ++u) {
    std::set<int> sa, sb;
    for (int i : a[u].items) sa.insert(perm[i]);
    sb.insert(b[u].items.begin(), b[u].items.end());
    EXPECT_EQ(sa, sb);
  }
}

TEST(RankStandard, InvariantUnderPositiveAffineMap) {
  Eigen::MatrixXd scores = Eigen::MatrixXd::Random(6, 20);
  auto pool = CandidatePool::build(empty_train(6, 20), nullptr, CandidatePolicy::all_unrated);
  auto a = rank_standard(scores, pool, 5);
  auto b = rank_standard((3.0 * scores.array() + 7.0).matrix(), pool, 5);
  for (int u = 0; u < 6; ++u) EXPECT_EQ(a[u].items, b[u].items);
}

TEST(CandidatePool, TestOnlyUsesHeldOutItems) {
  auto train = empty_train(2, 5);
  train.entries = {{0, 0, 4, 0}};
  RatingTriples test = empty_train(2, 5);
  test.entries = {{0, 3, 5, 0}, {0, 1, 2, 0}, {1, 4, 3, 0}};
  auto pool = CandidatePool::build(train, &test, CandidatePolicy::test_only);
  EXPECT_EQ(pool.items[0], (std::vector<int>{1, 3}));
  EXPECT_EQ(pool.items[1], (std::vector<int>{4}));
  EXPECT_THROW(CandidatePool::build(train, nullptr, CandidatePolicy::test_only), ValidationError);
}

TEST(RankRerank, ThresholdAboveScaleMatchesStandard) {
  QuietLog quiet;
  std::mt19937_64 rng(3);
  auto train = random_train(8, 15, rng);
  Eigen::MatrixXd scores = (Eigen::MatrixXd::Random(8, 15).array() * 2 + 3).matrix();
  auto pool = CandidatePool::build(train, nullptr, CandidatePolicy::all_unrated);
  auto std_lists = rank_standard(scores, pool, 4);
  for (auto s : {Strategy::IA, Strategy::RPRV}) {
    auto r = rank_rerank(scores, pool, train, s, 5.0 + 1e-9, 4);
    for (int u = 0; u < 8; ++u) EXPECT_EQ(r[u].items, std_lists[u].items);
  }
  EXPECT_EQ(quiet.messages.size(), 2u);
}

TEST(RankRerank, RprvReversesBlock) {
  auto pool = CandidatePool::build(empty_train(1, 3), nullptr, CandidatePolicy::all_unrated);
  auto r = rank_rerank(row({4.8, 4.5, 4.1}), pool, empty_train(1, 3), Strategy::RPRV, 4.0, 2);
  EXPECT_EQ(r[0].items, (std::vector<int>{2, 1}));
  EXPECT_EQ(r[0].strategy, Strategy::RPRV);
  EXPECT_EQ(r[0].threshold, 4.0);
}

TEST(RankRerank, IaHandOracle) {
  // Predictions 4.9, 4.6, 4.3, 3.2, 2.0; item averages in train 4.5, 2.0, 3.0, 1.0, (none).
  // T_R = 4: block {0,1,2} by average -> 1 (2.0), 2 (3.0), 0 (4.5); then 3, 4 by score.
  RatingTriples train = empty_train(3, 5);
  train.entries = {{1, 0, 4, 0}, {2, 0, 5, 0}, {1, 1, 2, 0}, {1, 2, 3, 0}, {2, 3, 1, 0}};
  auto pool = CandidatePool::build(empty_train(3, 5), nullptr, CandidatePolicy::all_unrated);
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(3, 5);
  scores.row(0) << 4.9, 4.6, 4.3, 3.2, 2.0;
  auto r = rank_rerank(scores, pool, train, Strategy::IA, 4.0, 5);
  EXPECT_EQ(r[0].items, (std::vector<int>{1, 2, 0, 3, 4}));
  r = rank_rerank(scores, pool, train, Strategy::IA, 4.0, 2);
  EXPECT_EQ(r[0].items, (std::vector<int>{1, 2}));
}

TEST(RankRerank, ItemAverageFallsBackToGlobalMean) {
  RatingTriples train = empty_train(1, 3);
  train.entries = {{0, 0, 5, 0}, {0, 1, 2, 0}};
  auto avg = item_average_ratings(train);
  EXPECT_EQ(avg, (std::vector<double>{5.0, 2.0, 3.5}));
}

TEST(SweepThreshold, GridChecksAndCardinality) {
  QuietLog quiet;
  auto train = empty_train(2, 6);
  auto pool = CandidatePool::build(train, nullptr, CandidatePolicy::all_unrated);
  Eigen::MatrixXd scores = (Eigen::MatrixXd::Random(2, 6).array() + 3).matrix();
  EXPECT_THROW(sweep_threshold(scores, pool, train, Strategy::RPRV, {}, 3), ValidationError);
  EXPECT_THROW(sweep_threshold(scores, pool, train, Strategy::RPRV, {4.0, 3.0}, 3), ValidationError);
  auto runs = sweep_threshold(scores, pool, train, Strategy::RPRV, {2.5, 3.0, 5.1}, 3);
  ASSERT_EQ(runs.size(), 3u);
  auto std_lists = rank_standard(scores, pool, 3);
  for (int u = 0; u < 2; ++u) EXPECT_EQ(runs[2].lists[u].items, std_lists[u].items);
}

TEST(Ranking, Deterministic) {
  std::mt19937_64 rng(4);
  auto train = random_train(10, 40, rng);
  Eigen::MatrixXd scores = (Eigen::MatrixXd::Random(10, 40).array() + 3.5).matrix();
  auto pool = CandidatePool::build(train, nullptr, CandidatePolicy::all_unrated);
  for (auto s : {Strategy::IA, Strategy::RPRV}) {
    auto a = rank_rerank(scores, pool, train, s, 3.5, 5);
    auto b = rank_rerank(scores, pool, train, s, 3.5, 5);
    for (int u = 0; u < 10; ++u) EXPECT_EQ(a[u].items, b[u].items);
  }
}

TEST(Ranking, CsvExportUsesOriginalIds) {
  IdMap ids;
  ids.user_ids = {7};
  ids.item_ids = {100, 200, 300};
  auto pool = CandidatePool::build(empty_train(1, 3), nullptr, CandidatePolicy::all_unrated);
  auto lists = rank_standard(row({1.0, 3.0, 2.0}), pool, 2);
  std::ostringstream out;
  write_lists_csv(out, lists, ids, 0);
  EXPECT_EQ(out.str(),
            "user_id,rank,item_id,score,strategy,T_R,fold\n"
            "7,1,200,3,standard,,0\n"
            "7,2,300,2,standard,,0\n");
}

TEST(Ranking, ParseNames) {
  EXPECT_EQ(parse_strategy("RPRV"), Strategy::RPRV);
  EXPECT_THROW(parse_strategy("rprv"), ValidationError);
  EXPECT_EQ(parse_candidate_policy("test-only"), CandidatePolicy::test_only);
  EXPECT_THROW(parse_candidate_policy("all"), ValidationError);
}
