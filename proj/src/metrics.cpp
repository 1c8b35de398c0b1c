#include "clsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "clsr/errors.hpp"

namespace clsr::metrics {

namespace {

void check_pair(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("auc: " + std::to_string(scores.size()) + " scores vs " + std::to_string(labels.size()) +
                     " labels");
  for (int l : labels)
    if (l != 0 && l != 1) throw DataError("auc: labels must be 0 or 1");
}

std::size_t count_positive(std::span<const int> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores, labels);
  const std::size_t pos = count_positive(labels);
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("auc: degenerate label set");
  double credit = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j]) credit += 1.0;
      else if (scores[i] == scores[j]) credit += 0.5;
    }
  }
  return credit / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auc_rank(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores, labels);
  const std::size_t n = scores.size();
  const std::size_t pos = count_positive(labels);
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw DataError("auc: degenerate label set");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Ranks are kept doubled so tie averages stay integral: 2*rank = lo + hi.
  double pos_rank2 = 0.0;
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo;
    while (hi + 1 < n && scores[order[hi + 1]] == scores[order[lo]]) ++hi;
    const double rank2 = static_cast<double>(lo + 1 + hi + 1);
    for (std::size_t k = lo; k <= hi; ++k)
      if (labels[order[k]] == 1) pos_rank2 += rank2;
    lo = hi + 1;
  }
  const double p = static_cast<double>(pos);
  const double u2 = pos_rank2 - p * (p + 1.0);  // 2U
  return u2 / (2.0 * p * static_cast<double>(neg));
}

GaucResult gauc(std::span<const UserScores> users) {
  GaucResult r;
  double num = 0.0;
  double den = 0.0;
  for (const auto& u : users) {
    const std::size_t pos = count_positive(u.labels);
    if (pos == 0 || pos == u.labels.size()) {
      ++r.skipped;
      continue;
    }
    const double a = auc_rank(u.scores, u.labels);
    const double w = static_cast<double>(u.instances);
    num += w * a;
    den += w;
    ++r.users;
  }
  if (r.users == 0 || den <= 0.0) throw DataError("gauc: no user has both positive and negative candidates");
  r.value = num / den;
  return r;
}

std::vector<UserScores> group_by_user(std::span<const ScoredSet> sets) {
  std::vector<UserScores> out;
  std::unordered_map<std::size_t, std::size_t> slot;
  for (const auto& s : sets) {
    auto [it, fresh] = slot.try_emplace(s.user, out.size());
    if (fresh) out.push_back(UserScores{s.user, {}, {}, 0});
    auto& u = out[it->second];
    u.scores.insert(u.scores.end(), s.scores.begin(), s.scores.end());
    u.labels.insert(u.labels.end(), s.labels.begin(), s.labels.end());
    u.instances += 1;
  }
  return out;
}

double rank_of(std::span<const double> scores, std::size_t index) {
  if (index >= scores.size()) throw ShapeError("rank_of: index out of range");
  const double s = scores[index];
  std::size_t greater = 0;
  std::size_t equal = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == index) continue;
    if (scores[j] > s) ++greater;
    else if (scores[j] == s) ++equal;
  }
  return 1.0 + static_cast<double>(greater) + 0.5 * static_cast<double>(equal);
}

double mrr(std::span<const double> ranks) {
  if (ranks.empty()) return 0.0;
  double total = 0.0;
  for (double r : ranks) {
    if (!(r >= 1.0)) throw DataError("mrr: ranks are 1-based");
    total += 1.0 / r;
  }
  return total / static_cast<double>(ranks.size());
}

double ndcg_at_k(double rank, std::size_t k) {
  if (k < 1) throw ConfigError("ndcg: K must be >= 1");
  if (!(rank >= 1.0)) throw DataError("ndcg: ranks are 1-based");
  return rank <= static_cast<double>(k) ? 1.0 / std::log2(rank + 1.0) : 0.0;
}

double mean_ndcg_at_k(std::span<const double> ranks, std::size_t k) {
  if (ranks.empty()) return 0.0;
  double total = 0.0;
  for (double r : ranks) total += ndcg_at_k(r, k);
  return total / static_cast<double>(ranks.size());
}

double MetricsReport::at(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) throw std::out_of_range("metrics report has no '" + key + "'");
  return it->second;
}

std::string MetricsReport::to_kv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  for (const auto& [k, v] : info) os << "info." << k << '=' << v << '\n';
  for (const auto& [k, v] : values) os << k << '=' << v << '\n';
  return os.str();
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["info"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : info) j["info"][k] = v;
  j["metrics"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values) j["metrics"][k] = v;
  return j.dump(2) + "\n";
}

MetricsReport summarize(std::span<const ScoredSet> sets, std::size_t ndcg_k) {
  if (sets.empty()) throw DataError("no evaluation instances");
  std::vector<double> all_scores;
  std::vector<int> all_labels;
  std::vector<double> ranks;
  ranks.reserve(sets.size());
  for (const auto& s : sets) {
    if (s.scores.size() != s.labels.size()) throw ShapeError("summarize: scores and labels differ in length");
    const auto pos = std::find(s.labels.begin(), s.labels.end(), 1);
    if (pos == s.labels.end() || count_positive(s.labels) != 1)
      throw DataError("summarize: each candidate set needs exactly one positive");
    ranks.push_back(rank_of(s.scores, static_cast<std::size_t>(pos - s.labels.begin())));
    all_scores.insert(all_scores.end(), s.scores.begin(), s.scores.end());
    all_labels.insert(all_labels.end(), s.labels.begin(), s.labels.end());
  }
  const auto users = group_by_user(sets);
  const auto g = gauc(users);

  MetricsReport r;
  r.values["auc"] = auc_rank(all_scores, all_labels);
  r.values["gauc"] = g.value;
  r.values["gauc_users"] = static_cast<double>(g.users);
  r.values["gauc_skipped_users"] = static_cast<double>(g.skipped);
  r.values["mrr"] = mrr(ranks);
  r.values["ndcg@" + std::to_string(ndcg_k)] = mean_ndcg_at_k(ranks, ndcg_k);
  r.values["instances"] = static_cast<double>(sets.size());
  return r;
}

}  // namespace clsr::metrics
