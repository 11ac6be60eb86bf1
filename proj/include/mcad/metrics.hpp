#pragma once

// Accuracy and diversity measures over top-N recommendation lists.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "mcad/dataset.hpp"
#include "mcad/log.hpp"
#include "mcad/ranking.hpp"

namespace mcad {

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  int users_precision = 0;  // users averaged into precision
  int users_recall = 0;     // users with at least one relevant test item
};

// Macro-averaged over users. t_p counts recommended items rated >= threshold
// in the user's test set; every other recommended item is a false positive
// (under test-only candidates these are exactly the non-relevant test items).
// Users without test ratings are skipped.
inline PrecisionRecall precision_recall(const RecommendationLists& lists, const RatingTriples& test,
                                        double relevance_threshold = 4.0) {
  std::vector<std::unordered_set<int>> relevant(static_cast<std::size_t>(test.num_users));
  std::vector<int> test_count(static_cast<std::size_t>(test.num_users), 0);
  for (const auto& r : test.entries) {
    ++test_count[r.user];
    if (r.value >= relevance_threshold) relevant[r.user].insert(r.item);
  }
  PrecisionRecall pr;
  double psum = 0.0, rsum = 0.0;
  for (const auto& l : lists) {
    if (l.user < 0 || l.user >= test.num_users) throw ValidationError("precision_recall: user out of range");
    if (test_count[l.user] == 0) continue;
    const auto& rel = relevant[l.user];
    int tp = 0;
    for (int i : l.items) tp += rel.count(i) ? 1 : 0;
    if (!l.items.empty()) {
      psum += static_cast<double>(tp) / static_cast<double>(l.items.size());
      ++pr.users_precision;
    }
    if (!rel.empty()) {
      rsum += static_cast<double>(tp) / static_cast<double>(rel.size());
      ++pr.users_recall;
    }
  }
  if (pr.users_precision) pr.precision = psum / pr.users_precision;
  if (pr.users_recall) pr.recall = rsum / pr.users_recall;
  return pr;
}

struct ErrorMetrics {
  double mae = 0.0;
  double rmse = 0.0;
};

inline ErrorMetrics mae_rmse(const Eigen::MatrixXd& predicted, const RatingTriples& test) {
  if (predicted.rows() != test.num_users || predicted.cols() != test.num_items)
    throw ValidationError("mae_rmse: prediction shape differs from test index space");
  ErrorMetrics e;
  if (test.empty()) return e;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const auto& r : test.entries) {
    const double d = r.value - predicted(r.user, r.item);
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const auto count = static_cast<double>(test.size());
  e.mae = abs_sum / count;
  e.rmse = std::sqrt(sq_sum / count);
  return e;
}

// Cosine similarity of two genre rows; zero rows are treated as fully dissimilar.
inline double genre_cosine(const GenreMatrix& genres, int a, int b) {
  const auto ra = genres.G.row(a);
  const auto rb = genres.G.row(b);
  const double na = ra.norm(), nb = rb.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return ra.dot(rb) / (na * nb);
}

// Mean over users of sum_{i != j in RL(u)} (1 - cos(g_i, g_j)) / (L (L - 1)),
// L the list length. Lists shorter than two contribute 0.
inline double individual_diversity(const RecommendationLists& lists, const GenreMatrix& genres) {
  if (lists.empty()) return 0.0;
  double total = 0.0;
  int short_lists = 0;
  int zero_rows = 0;
  std::vector<double> norms(static_cast<std::size_t>(genres.G.rows()), -1.0);
  for (const auto& l : lists) {
    const std::size_t len = l.items.size();
    if (len < 2) {
      ++short_lists;
      continue;
    }
    double s = 0.0;
    for (std::size_t a = 0; a < len; ++a) {
      if (genres.G.row(l.items[a]).sum() == 0.0) ++zero_rows;
      for (std::size_t b = a + 1; b < len; ++b)
        s += 2.0 * (1.0 - genre_cosine(genres, l.items[a], l.items[b]));
    }
    total += s / static_cast<double>(len * (len - 1));
  }
  if (short_lists) log::warn(std::to_string(short_lists) + " list(s) shorter than 2 score 0 individual diversity");
  if (zero_rows) log::warn(std::to_string(zero_rows) + " recommended slot(s) hold genre-less items (dissimilarity 1)");
  return total / static_cast<double>(lists.size());
}

inline int aggregate_diversity(const RecommendationLists& lists) {
  std::unordered_set<int> seen;
  for (const auto& l : lists) seen.insert(l.items.begin(), l.items.end());
  return static_cast<int>(seen.size());
}

struct NoveltyResult {
  double value = 0.0;
  int unrated_items = 0;  // recommended slots whose item has no training ratings
};

// Mean over users of mean_{i in RL(u)} log2(|Users| / #i), #i the item's
// training rating count (taken as 1 when zero).
inline NoveltyResult novelty_detail(const RecommendationLists& lists, const RatingTriples& train) {
  const auto counts = train.item_counts();
  const double users = static_cast<double>(train.num_users);
  NoveltyResult res;
  double total = 0.0;
  int contributing = 0;
  for (const auto& l : lists) {
    if (l.items.empty()) continue;
    double s = 0.0;
    for (int i : l.items) {
      int c = counts[i];
      if (c == 0) {
        ++res.unrated_items;
        c = 1;
      }
      s += std::log2(users / c);
    }
    total += s / static_cast<double>(l.items.size());
    ++contributing;
  }
  if (contributing) res.value = total / contributing;
  return res;
}

inline double novelty(const RecommendationLists& lists, const RatingTriples& train) {
  return novelty_detail(lists, train).value;
}

// Recommendation counts for every catalog item.
inline std::vector<int> recommendation_counts(const RecommendationLists& lists, int n_items) {
  std::vector<int> counts(static_cast<std::size_t>(n_items), 0);
  for (const auto& l : lists)
    for (int i : l.items) {
      if (i < 0 || i >= n_items) throw ValidationError("recommended item outside catalog");
      ++counts[i];
    }
  return counts;
}

// (1/J) sum_k (2k - J - 1) p(i_k) over all J catalog items sorted by p
// ascending, p(i) = times recommended / total recommendation slots.
inline double gini_from_probabilities(std::vector<double> p) {
  std::sort(p.begin(), p.end());
  const auto j = static_cast<double>(p.size());
  if (p.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) s += (2.0 * static_cast<double>(k + 1) - j - 1.0) * p[k];
  return s / j;
}

inline double gini_coefficient(const RecommendationLists& lists, int n_items) {
  const auto counts = recommendation_counts(lists, n_items);
  double slots = 0.0;
  for (int c : counts) slots += c;
  if (slots == 0.0) return 0.0;
  std::vector<double> p(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) p[i] = counts[i] / slots;
  return gini_from_probabilities(std::move(p));
}

struct ItemCount {
  int item = 0;
  int count = 0;
};

struct FrequencyDistribution {
  std::vector<ItemCount> histogram;  // every catalog item, count descending then item ascending
  int total = 0;                     // sum of counts

  std::vector<ItemCount> top(std::size_t t) const {
    return {histogram.begin(), histogram.begin() + static_cast<std::ptrdiff_t>(std::min(t, histogram.size()))};
  }
  // The t least-recommended items among those recommended at least once.
  std::vector<ItemCount> bottom(std::size_t t) const {
    std::size_t nonzero = 0;
    while (nonzero < histogram.size() && histogram[nonzero].count > 0) ++nonzero;
    const std::size_t start = nonzero > t ? nonzero - t : 0;
    return {histogram.begin() + static_cast<std::ptrdiff_t>(start),
            histogram.begin() + static_cast<std::ptrdiff_t>(nonzero)};
  }
  int max_count() const { return histogram.empty() ? 0 : histogram.front().count; }
  int nonzero_items() const {
    return static_cast<int>(std::count_if(histogram.begin(), histogram.end(),
                                          [](const ItemCount& c) { return c.count > 0; }));
  }
};

inline FrequencyDistribution frequency_distribution(const RecommendationLists& lists, int n_items) {
  const auto counts = recommendation_counts(lists, n_items);
  FrequencyDistribution d;
  d.histogram.reserve(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    d.histogram.push_back({static_cast<int>(i), counts[i]});
    d.total += counts[i];
  }
  std::sort(d.histogram.begin(), d.histogram.end(), [](const ItemCount& a, const ItemCount& b) {
    return a.count != b.count ? a.count > b.count : a.item < b.item;
  });
  return d;
}

// Top-T slice of the histogram.
inline std::vector<ItemCount> frequency_distribution(const RecommendationLists& lists, int n_items,
                                                     int top_t) {
  if (top_t < 1) throw ValidationError("frequency_distribution: top_T must be >= 1");
  return frequency_distribution(lists, n_items).top(static_cast<std::size_t>(top_t));
}

struct EvalReport {
  std::string dataset;
  int fold = 0;
  std::string strategy;  // MC, MCAD, MC-IA, MC-RPRV
  double lambda_n = 0.0;
  double lambda_d = 0.0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  int N = 0;
  CandidatePolicy policy = CandidatePolicy::all_unrated;
  double precision = 0.0;
  double recall = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  double individual_diversity = 0.0;
  int aggregate_diversity = 0;
  double novelty = 0.0;
  double gini = 0.0;
};

// One fully populated report for a list set and the matching predictions.
inline EvalReport evaluate_lists(const RecommendationLists& lists, const Eigen::MatrixXd& clipped,
                                 const RatingTriples& train, const RatingTriples& test,
                                 const GenreMatrix& genres, double relevance_threshold = 4.0) {
  EvalReport r;
  auto pr = precision_recall(lists, test, relevance_threshold);
  r.precision = pr.precision;
  r.recall = pr.recall;
  auto err = mae_rmse(clipped, test);
  r.mae = err.mae;
  r.rmse = err.rmse;
  r.individual_diversity = individual_diversity(lists, genres);
  r.aggregate_diversity = aggregate_diversity(lists);
  r.novelty = novelty(lists, train);
  r.gini = gini_coefficient(lists, train.num_items);
  return r;
}

inline constexpr const char* kReportHeader =
    "dataset,fold,strategy,lambda_n,lambda_d,T_R,N,candidate_policy,precision,recall,mae,rmse,id,ad,"
    "novelty,gini";

inline void write_report_row(std::ostream& out, const EvalReport& r) {
  auto num = [&](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  out << r.dataset << ',' << r.fold << ',' << r.strategy << ',' << num(r.lambda_n) << ','
      << num(r.lambda_d) << ',' << (std::isnan(r.threshold) ? std::string() : num(r.threshold)) << ','
      << r.N << ',' << to_string(r.policy) << ',' << num(r.precision) << ',' << num(r.recall) << ','
      << num(r.mae) << ',' << num(r.rmse) << ',' << num(r.individual_diversity) << ','
      << r.aggregate_diversity << ',' << num(r.novelty) << ',' << num(r.gini) << '\n';
}

}  // namespace mcad
