#pragma once

// Top-N list construction: plain ranking by predicted rating, and the two
// threshold re-ranking baselines (reverse predicted rating, item average).

#include <algorithm>
#include <limits>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mcad/dataset.hpp"
#include "mcad/error.hpp"
#include "mcad/log.hpp"

namespace mcad {

enum class Strategy { standard, IA, RPRV };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::standard: return "standard";
    case Strategy::IA: return "IA";
    case Strategy::RPRV: return "RPRV";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "standard") return Strategy::standard;
  if (s == "IA") return Strategy::IA;
  if (s == "RPRV") return Strategy::RPRV;
  throw ValidationError("unknown ranking strategy '" + std::string(s) + "'");
}

enum class CandidatePolicy { all_unrated, test_only };

inline std::string_view to_string(CandidatePolicy p) {
  return p == CandidatePolicy::all_unrated ? "all-unrated" : "test-only";
}

inline CandidatePolicy parse_candidate_policy(std::string_view s) {
  if (s == "all-unrated") return CandidatePolicy::all_unrated;
  if (s == "test-only") return CandidatePolicy::test_only;
  throw ValidationError("unknown candidate policy '" + std::string(s) + "'");
}

struct RecommendationList {
  int user = 0;
  std::vector<int> items;
  std::vector<double> scores;
  Strategy strategy = Strategy::standard;
  double threshold = std::numeric_limits<double>::quiet_NaN();  // T_R; NaN for standard
  bool short_list = false;  // fewer than N candidates were available
};

using RecommendationLists = std::vector<RecommendationList>;

// Per-user candidate items. all-unrated: every item outside the user's
// training support. test-only: the user's held-out test items.
struct CandidatePool {
  CandidatePolicy policy = CandidatePolicy::all_unrated;
  std::vector<std::vector<int>> items;  // ascending item indices per user

  int num_users() const noexcept { return static_cast<int>(items.size()); }

  static CandidatePool build(const RatingTriples& train, const RatingTriples* test,
                             CandidatePolicy policy) {
    CandidatePool pool;
    pool.policy = policy;
    pool.items.resize(static_cast<std::size_t>(train.num_users));
    if (policy == CandidatePolicy::test_only) {
      if (!test) throw ValidationError("test-only candidate policy needs the test split");
      for (const auto& r : test->entries) pool.items[r.user].push_back(r.item);
      for (auto& v : pool.items) std::sort(v.begin(), v.end());
      return pool;
    }
    std::vector<std::vector<char>> rated(static_cast<std::size_t>(train.num_users));
    for (const auto& r : train.entries) {
      auto& row = rated[r.user];
      if (row.empty()) row.assign(static_cast<std::size_t>(train.num_items), 0);
      row[r.item] = 1;
    }
    for (int u = 0; u < train.num_users; ++u) {
      auto& v = pool.items[u];
      v.reserve(static_cast<std::size_t>(train.num_items));
      for (int i = 0; i < train.num_items; ++i)
        if (rated[u].empty() || !rated[u][i]) v.push_back(i);
    }
    return pool;
  }
};

namespace detail {

// Higher score first; equal scores go to the lower item index.
struct ByScoreDesc {
  const double* row;
  std::ptrdiff_t stride;
  double at(int i) const { return row[i * stride]; }
  bool operator()(int a, int b) const {
    const double sa = at(a), sb = at(b);
    if (sa != sb) return sa > sb;
    return a < b;
  }
};

inline void check_scores(const Eigen::MatrixXd& scores, const CandidatePool& pool, int n) {
  if (n < 1) throw ValidationError("ranking: N must be >= 1");
  if (scores.rows() != pool.num_users())
    throw ValidationError("ranking: score rows differ from candidate pool users");
}

inline RecommendationList make_list(int user, const std::vector<int>& chosen,
                                    const Eigen::MatrixXd& scores, Strategy strategy,
                                    double threshold, std::size_t n, std::size_t pool_size) {
  RecommendationList l;
  l.user = user;
  l.items = chosen;
  l.strategy = strategy;
  l.threshold = threshold;
  l.short_list = pool_size < n;
  for (int i : chosen) l.scores.push_back(scores(user, i));
  return l;
}

}  // namespace detail

inline RecommendationLists rank_standard(const Eigen::MatrixXd& scores, const CandidatePool& pool,
                                         int n) {
  detail::check_scores(scores, pool, n);
  RecommendationLists out;
  out.reserve(pool.items.size());
  const auto N = static_cast<std::size_t>(n);
  for (int u = 0; u < pool.num_users(); ++u) {
    std::vector<int> cand = pool.items[u];
    const std::size_t take = std::min(N, cand.size());
    detail::ByScoreDesc cmp{&scores(u, 0), scores.outerStride()};
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), cmp);
    cand.resize(take);
    out.push_back(detail::make_list(u, cand, scores, Strategy::standard,
                                    std::numeric_limits<double>::quiet_NaN(), N, pool.items[u].size()));
  }
  return out;
}

// Mean training rating per item; items never rated in train get the global mean.
inline std::vector<double> item_average_ratings(const RatingTriples& train) {
  std::vector<double> sum(static_cast<std::size_t>(train.num_items), 0.0);
  std::vector<int> cnt(static_cast<std::size_t>(train.num_items), 0);
  for (const auto& r : train.entries) {
    sum[r.item] += r.value;
    ++cnt[r.item];
  }
  const double global = train.mean();
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = cnt[i] ? sum[i] / cnt[i] : global;
  return sum;
}

// Candidates predicted at or above T_R are ordered by the strategy key
// ascending (RPRV: predicted rating, IA: item training average) and placed
// first; the rest follow in standard order.
inline RecommendationLists rank_rerank(const Eigen::MatrixXd& scores, const CandidatePool& pool,
                                       const RatingTriples& train, Strategy strategy,
                                       double threshold, int n) {
  if (strategy == Strategy::standard) throw ValidationError("rank_rerank needs IA or RPRV");
  detail::check_scores(scores, pool, n);
  const auto item_avg = strategy == Strategy::IA ? item_average_ratings(train) : std::vector<double>{};
  RecommendationLists out;
  out.reserve(pool.items.size());
  const auto N = static_cast<std::size_t>(n);
  int degenerate = 0;
  for (int u = 0; u < pool.num_users(); ++u) {
    const auto& all = pool.items[u];
    std::vector<int> above, below;
    for (int i : all) (scores(u, i) >= threshold ? above : below).push_back(i);
    if (above.empty() && !all.empty()) ++degenerate;

    auto key = [&](int i) { return strategy == Strategy::RPRV ? scores(u, i) : item_avg[i]; };
    auto by_key = [&](int a, int b) {
      const double ka = key(a), kb = key(b);
      if (ka != kb) return ka < kb;
      return a < b;
    };
    std::vector<int> chosen;
    const std::size_t take_above = std::min(N, above.size());
    std::partial_sort(above.begin(), above.begin() + static_cast<std::ptrdiff_t>(take_above),
                      above.end(), by_key);
    chosen.assign(above.begin(), above.begin() + static_cast<std::ptrdiff_t>(take_above));
    if (chosen.size() < N) {
      const std::size_t take_below = std::min(N - chosen.size(), below.size());
      detail::ByScoreDesc cmp{&scores(u, 0), scores.outerStride()};
      std::partial_sort(below.begin(), below.begin() + static_cast<std::ptrdiff_t>(take_below),
                        below.end(), cmp);
      chosen.insert(chosen.end(), below.begin(), below.begin() + static_cast<std::ptrdiff_t>(take_below));
    }
    out.push_back(detail::make_list(u, chosen, scores, strategy, threshold, N, all.size()));
  }
  if (degenerate > 0)
    log::warn(std::string(to_string(strategy)) + " T_R=" + std::to_string(threshold) + ": " +
              std::to_string(degenerate) + " user(s) have no prediction above the threshold");
  return out;
}

struct ThresholdRun {
  double threshold = 0.0;
  RecommendationLists lists;
};

inline std::vector<ThresholdRun> sweep_threshold(const Eigen::MatrixXd& scores,
                                                 const CandidatePool& pool,
                                                 const RatingTriples& train, Strategy strategy,
                                                 const std::vector<double>& grid, int n) {
  if (grid.empty()) throw ValidationError("sweep_threshold: empty T_R grid");
  if (!std::is_sorted(grid.begin(), grid.end()))
    throw ValidationError("sweep_threshold: T_R grid must be ascending");
  std::vector<ThresholdRun> out;
  for (double t : grid) out.push_back({t, rank_rerank(scores, pool, train, strategy, t, n)});
  return out;
}

// CSV rows "user_id,rank,item_id,score,strategy,T_R,fold" with original ids.
inline void write_lists_csv(std::ostream& out, const RecommendationLists& lists, const IdMap& ids,
                            int fold, bool header = true) {
  if (header) out << "user_id,rank,item_id,score,strategy,T_R,fold\n";
  for (const auto& l : lists) {
    for (std::size_t k = 0; k < l.items.size(); ++k) {
      out << ids.user_id(l.user) << ',' << (k + 1) << ',' << ids.item_id(l.items[k]) << ','
          << l.scores[k] << ',' << to_string(l.strategy) << ',';
      if (l.strategy != Strategy::standard) out << l.threshold;
      out << ',' << fold << '\n';
    }
  }
}

}  // namespace mcad
