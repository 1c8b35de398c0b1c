#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace clsr::metrics {

// Scores of one candidate set. In ranking mode exactly one label is 1.
struct ScoredSet {
  std::size_t user = 0;
  std::vector<double> scores;
  std::vector<int> labels;
};

// Probability that a random positive outscores a random negative, ties
// counting one half. Exact O(P*N) pair counting. Throws DataError unless
// there is at least one positive and one negative.
double auc(std::span<const double> scores, std::span<const int> labels);

// Same quantity from the Mann-Whitney U statistic with tie-averaged ranks,
// O(n log n). Equal to auc() up to floating-point summation order.
double auc_rank(std::span<const double> scores, std::span<const int> labels);

// One user's pooled candidates and the number of instances behind them.
struct UserScores {
  std::size_t user = 0;
  std::vector<double> scores;
  std::vector<int> labels;
  std::size_t instances = 0;
};

struct GaucResult {
  double value = 0.0;
  std::size_t users = 0;    // users that contributed
  std::size_t skipped = 0;  // users without both label classes
};

// Instance-weighted mean of per-user AUCs. Throws DataError when no user
// has a valid AUC.
GaucResult gauc(std::span<const UserScores> users);

// Pools candidate sets by user, in order of first appearance.
std::vector<UserScores> group_by_user(std::span<const ScoredSet> sets);

// 1-based rank of candidate `index`; equal scores share their average rank.
double rank_of(std::span<const double> scores, std::size_t index);

double mrr(std::span<const double> ranks);
double ndcg_at_k(double rank, std::size_t k);
double mean_ndcg_at_k(std::span<const double> ranks, std::size_t k);

// Flat metrics plus string metadata (config echo, cell description).
struct MetricsReport {
  std::map<std::string, double> values;
  std::map<std::string, std::string> info;

  double at(const std::string& key) const;
  // `key=value` lines; info keys are prefixed with "info.".
  std::string to_kv() const;
  std::string to_json() const;
};

inline constexpr std::size_t kDefaultNdcgK = 2;

// auc (all candidates pooled), gauc, mrr, ndcg@k and counts over a list of
// ranking-mode candidate sets (positive anywhere, exactly one).
MetricsReport summarize(std::span<const ScoredSet> sets, std::size_t ndcg_k = kDefaultNdcgK);

}  // namespace clsr::metrics
