#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clsr/data.hpp"
#include "clsr/metrics.hpp"
#include "clsr/model.hpp"

namespace clsr::eval {

enum class ProtocolKind { kNone, kShuffle, kTruncate };

struct ProtocolSpec {
  ProtocolKind kind = ProtocolKind::kNone;
  std::size_t truncate_k = 0;
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError when TRUNCATE has k = 0
};

const char* to_string(ProtocolKind k);
ProtocolKind parse_protocol(const std::string& s);

// SHUFFLE permutes the prefix items while timestamps stay with their slots,
// so time features follow the new order. TRUNCATE keeps the most recent
// min(k, t) items. Candidates are never touched. The shuffle stream is
// derived from (seed, user, position), so results do not depend on
// evaluation order.
data::Example apply_protocol(const data::Example& ex, const ProtocolSpec& spec);

enum class Side { kLong, kShort, kBoth };

const char* to_string(Side s);
Side parse_side(const std::string& s);

struct EvalOptions {
  ProtocolSpec protocol;
  Side side = Side::kBoth;
  std::optional<double> fixed_alpha;  // only with Side::kBoth; LONG/SHORT imply 1/0
  std::size_t ndcg_k = metrics::kDefaultNdcgK;
  std::size_t threads = 1;
};

// Fusion weight implied by the side and fixed-alpha options.
std::optional<double> effective_alpha(const EvalOptions& opts);

// Scores every example (after the protocol) with eval-mode batch norm.
// Output order matches input order regardless of the thread count.
std::vector<model::ScoreResult> score_all(const model::ClsrModel& m, std::span<const data::Example> examples,
                                          const EvalOptions& opts);

std::vector<metrics::ScoredSet> to_scored_sets(std::span<const data::Example> examples,
                                               std::span<const model::ScoreResult> results);

// Metrics of one evaluation cell; `info` describes the cell.
metrics::MetricsReport evaluate(const model::ClsrModel& m, std::span<const data::Example> examples,
                                const EvalOptions& opts = {});

metrics::MetricsReport one_side_eval(const model::ClsrModel& m, std::span<const data::Example> examples, Side side,
                                     EvalOptions opts = {});

std::vector<data::Example> filter_by_driver(std::span<const data::Example> examples, data::Driver driver);

enum class Partition { kBehavior, kDriver };

struct AlphaGroup {
  std::string tag;
  // Over every candidate of every example in the group.
  double mean_all = 0.0;
  double std_all = 0.0;
  std::size_t n_all = 0;
  // Over positive candidates only.
  double mean_pos = 0.0;
  double std_pos = 0.0;
  std::size_t n_pos = 0;
};

// Population statistics of the learned fusion weight grouped by tag, in
// tag order. Behavior tags are resolved through `behavior_names`.
std::vector<AlphaGroup> alpha_stats(const model::ClsrModel& m, std::span<const data::Example> examples,
                                    Partition partition, const std::vector<std::string>& behavior_names = {},
                                    const EvalOptions& opts = {});

// Throws DataError when `tag` has no group.
const AlphaGroup& find_group(const std::vector<AlphaGroup>& groups, const std::string& tag);

struct SweepEntry {
  std::optional<double> alpha;  // empty for the adaptive entry
  metrics::MetricsReport report;
};

// One entry per fixed alpha in order, then the adaptive entry.
std::vector<SweepEntry> fixed_alpha_sweep(const model::ClsrModel& m, std::span<const data::Example> examples,
                                          std::span<const double> alphas, EvalOptions opts = {});

struct CurvePoint {
  std::size_t k = 0;
  metrics::MetricsReport report;
};

std::vector<CurvePoint> truncate_curve(const model::ClsrModel& m, std::span<const data::Example> examples,
                                       std::span<const std::size_t> ks, Side side = Side::kBoth,
                                       EvalOptions opts = {});

struct DisentanglementReport {
  double cos_long_longproxy = 0.0;
  double cos_long_shortproxy = 0.0;
  double cos_short_shortproxy = 0.0;
  double cos_short_longproxy = 0.0;
  std::size_t proxy_examples = 0;
  std::vector<AlphaGroup> alpha_by_behavior;
  std::vector<AlphaGroup> alpha_by_driver;
  double auc_long = 0.0;
  double auc_short = 0.0;
  double auc_both = 0.0;
  // Learned-fusion AUC on each ground-truth driver stratum (synthetic only).
  std::vector<std::pair<std::string, double>> auc_by_driver;

  double long_gap() const { return cos_long_longproxy - cos_long_shortproxy; }
  double short_gap() const { return cos_short_shortproxy - cos_short_longproxy; }
  metrics::MetricsReport to_report() const;
};

DisentanglementReport disentanglement(const model::ClsrModel& m, std::span<const data::Example> examples,
                                      const std::vector<std::string>& behavior_names = {},
                                      const EvalOptions& opts = {});

double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace clsr::eval
