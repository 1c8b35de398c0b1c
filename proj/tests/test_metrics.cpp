#include <cmath>
#include <random>
#include <vector>

#include "clsr/errors.hpp"
#include "clsr/metrics.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace clsr;
using namespace clsr::metrics;

namespace {

// Instance with ~50 candidates drawn from a small score alphabet, so ties
// are common.
void random_instance(std::mt19937_64& rng, std::vector<double>& s, std::vector<int>& l) {
  std::uniform_int_distribution<int> len(2, 50), level(0, 6);
  const int n = len(rng);
  s.assign(n, 0.0);
  l.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    s[i] = 0.125 * level(rng);
    l[i] = static_cast<int>(rng() % 3 == 0);
  }
  l[0] = 1;
  l[1] = 0;
}

}  // namespace

TEST_CASE("auc examples") {
  const std::vector<double> sep{0.9, 0.8, 0.2, 0.1};
  const std::vector<int> sep_l{1, 1, 0, 0};
  CHECK(auc(sep, sep_l) == 1.0);
  CHECK(auc_rank(sep, sep_l) == 1.0);

  const std::vector<double> flat{0.3, 0.3, 0.3, 0.3};
  CHECK(auc(flat, sep_l) == 0.5);
  CHECK(auc_rank(flat, sep_l) == 0.5);

  const std::vector<double> s{0.8, 0.9, 0.7, 0.1};
  const std::vector<int> l{1, 0, 0, 0};
  CHECK(auc(s, l) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(auc_rank(s, l) == auc(s, l));

  const std::vector<int> all_pos{1, 1, 1, 1};
  CHECK_THROWS_AS(auc(s, all_pos), DataError);
  CHECK_THROWS_AS(auc_rank(s, all_pos), DataError);
}

TEST_CASE("auc oracles agree exactly on random instances") {
  std::mt19937_64 rng(17);
  std::vector<double> s;
  std::vector<int> l;
  for (int t = 0; t < 200; ++t) {
    random_instance(rng, s, l);
    CHECK(auc(s, l) == auc_rank(s, l));
  }
}

TEST_CASE("auc is invariant under increasing transforms") {
  std::mt19937_64 rng(18);
  std::vector<double> s;
  std::vector<int> l;
  for (int t = 0; t < 50; ++t) {
    random_instance(rng, s, l);
    std::vector<double> tr(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) tr[i] = std::exp(3.0 * s[i]) - 7.0;
    CHECK(auc(tr, l) == auc(s, l));
  }
}

TEST_CASE("gauc") {
  SUBCASE("single user") {
    const std::vector<UserScores> u{{0, {0.8, 0.9, 0.7, 0.1}, {1, 0, 0, 0}, 1}};
    CHECK(gauc(u).value == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("instance-weighted mean") {
    const std::vector<ScoredSet> sets{{0, {0.9, 0.1}, {1, 0}}, {0, {0.8, 0.2}, {1, 0}}, {1, {0.5, 0.5}, {1, 0}}};
    const auto users = group_by_user(sets);
    REQUIRE(users.size() == 2);
    CHECK(users[0].instances == 2);
    const auto g = gauc(users);
    CHECK(g.value == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
    CHECK(g.users == 2);
  }
  SUBCASE("constant per-user auc") {
    const std::vector<UserScores> u{{0, {0.8, 0.9, 0.7, 0.1}, {1, 0, 0, 0}, 3},
                                    {1, {5.0, 6.0, 4.0, 1.0}, {1, 0, 0, 0}, 1},
                                    {2, {0.3, 0.4, 0.2, 0.0}, {1, 0, 0, 0}, 7}};
    CHECK(gauc(u).value == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("degenerate users are skipped") {
    const std::vector<UserScores> u{{0, {0.9, 0.1}, {1, 0}, 1}, {1, {0.4, 0.3}, {1, 1}, 4}};
    const auto g = gauc(u);
    CHECK(g.value == 1.0);
    CHECK(g.skipped == 1);
    const std::vector<UserScores> none{{1, {0.4, 0.3}, {1, 1}, 4}};
    CHECK_THROWS_AS(gauc(none), DataError);
  }
}

TEST_CASE("ranks, mrr and ndcg") {
  const std::vector<double> top{0.9, 0.5, 0.1};
  CHECK(rank_of(top, 0) == 1.0);
  CHECK(rank_of(top, 2) == 3.0);
  const std::vector<double> tied{0.9, 0.9, 0.1};
  CHECK(rank_of(tied, 0) == 1.5);

  const std::vector<double> r1{1.0}, r3{3.0}, r15{1.5};
  CHECK(mrr(r1) == 1.0);
  CHECK(mrr(r3) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(mrr(r15) == doctest::Approx(1.0 / 1.5).epsilon(1e-15));

  CHECK(ndcg_at_k(1.0, 2) == 1.0);
  CHECK(ndcg_at_k(2.0, 2) == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-15));
  CHECK(ndcg_at_k(3.0, 2) == 0.0);
  CHECK_THROWS(ndcg_at_k(1.0, 0));
  CHECK_THROWS(mrr(std::vector<double>{0.5}));
}

TEST_CASE("summary report") {
  const std::vector<ScoredSet> sets{{0, {0.1, 0.9, 0.2}, {0, 1, 0}}, {1, {0.7, 0.7, 0.1}, {1, 0, 0}}};
  const auto r = summarize(sets, 2);
  CHECK(r.at("mrr") == doctest::Approx((1.0 + 1.0 / 1.5) / 2).epsilon(1e-15));
  CHECK(r.at("ndcg@2") == doctest::Approx((1.0 + 1.0 / std::log2(2.5)) / 2).epsilon(1e-15));
  CHECK(r.at("instances") == 2.0);
  CHECK(r.at("gauc_users") == 2.0);
  CHECK_THROWS(r.at("missing"));

  MetricsReport rep = r;
  rep.info["protocol"] = "none";
  const std::string kv = rep.to_kv();
  CHECK(kv.find("info.protocol=none\n") == 0);
  CHECK(kv.find("\nmrr=") != std::string::npos);
  const auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j["info"]["protocol"] == "none");
  CHECK(j["metrics"]["instances"].get<double>() == 2.0);

  const std::vector<ScoredSet> two_pos{{0, {0.1, 0.9}, {1, 1}}};
  CHECK_THROWS_AS(summarize(two_pos), DataError);
}
