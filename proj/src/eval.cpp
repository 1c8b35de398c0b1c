#include "clsr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include "clsr/errors.hpp"
#include "clsr/rng.hpp"

namespace clsr::eval {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// Welford accumulator; a constant sample has exactly zero spread.
struct Moments {
  double m = 0.0;
  double m2 = 0.0;
  std::size_t n = 0;
  void add(double x) {
    ++n;
    const double delta = x - m;
    m += delta / static_cast<double>(n);
    m2 += delta * (x - m);
  }
  double mean() const { return m; }
  double stddev() const { return n ? std::sqrt(std::max(0.0, m2 / static_cast<double>(n))) : 0.0; }
};

void describe(metrics::MetricsReport& r, const EvalOptions& opts) {
  r.info["protocol"] = to_string(opts.protocol.kind);
  r.info["side"] = to_string(opts.side);
  if (opts.protocol.kind == ProtocolKind::kTruncate) r.info["k"] = std::to_string(opts.protocol.truncate_k);
  if (opts.protocol.kind == ProtocolKind::kShuffle) r.info["seed"] = std::to_string(opts.protocol.seed);
  const auto a = effective_alpha(opts);
  r.info["alpha"] = a ? fmt(*a) : "adaptive";
}

}  // namespace

void ProtocolSpec::validate() const {
  if (kind == ProtocolKind::kTruncate && truncate_k < 1) throw ConfigError("truncate protocol needs k >= 1");
}

const char* to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::kNone: return "none";
    case ProtocolKind::kShuffle: return "shuffle";
    case ProtocolKind::kTruncate: return "truncate";
  }
  return "?";
}

ProtocolKind parse_protocol(const std::string& s) {
  if (s == "none") return ProtocolKind::kNone;
  if (s == "shuffle") return ProtocolKind::kShuffle;
  if (s == "truncate") return ProtocolKind::kTruncate;
  throw ConfigError("protocol must be none, shuffle or truncate, got '" + s + "'");
}

data::Example apply_protocol(const data::Example& ex, const ProtocolSpec& spec) {
  spec.validate();
  if (ex.items.empty()) throw DataError("apply_protocol: empty prefix");
  data::Example out = ex;
  switch (spec.kind) {
    case ProtocolKind::kNone:
      break;
    case ProtocolKind::kShuffle: {
      const std::uint64_t key = (static_cast<std::uint64_t>(ex.user) << 32) ^ ex.position;
      std::mt19937_64 rng(derive_seed(spec.seed, "shuffle", key));
      // Fisher-Yates with an explicit draw so the permutation does not
      // depend on the standard library's shuffle implementation.
      for (std::size_t i = out.items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(out.items[i - 1], out.items[j]);
      }
      break;
    }
    case ProtocolKind::kTruncate: {
      const std::size_t t = ex.items.size();
      const std::size_t keep = std::min(spec.truncate_k, t);
      out.items.assign(ex.items.end() - static_cast<std::ptrdiff_t>(keep), ex.items.end());
      out.times.assign(ex.times.end() - static_cast<std::ptrdiff_t>(keep), ex.times.end());
      break;
    }
  }
  return out;
}

const char* to_string(Side s) {
  switch (s) {
    case Side::kLong: return "long";
    case Side::kShort: return "short";
    case Side::kBoth: return "both";
  }
  return "?";
}

Side parse_side(const std::string& s) {
  if (s == "long") return Side::kLong;
  if (s == "short") return Side::kShort;
  if (s == "both") return Side::kBoth;
  throw ConfigError("side must be long, short or both, got '" + s + "'");
}

std::optional<double> effective_alpha(const EvalOptions& opts) {
  switch (opts.side) {
    case Side::kLong: return 1.0;
    case Side::kShort: return 0.0;
    case Side::kBoth: return opts.fixed_alpha;
  }
  return std::nullopt;
}

std::vector<model::ScoreResult> score_all(const model::ClsrModel& m, std::span<const data::Example> examples,
                                          const EvalOptions& opts) {
  opts.protocol.validate();
  model::ScoreOptions so;
  so.fixed_alpha = effective_alpha(opts);
  std::vector<model::ScoreResult> out(examples.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (opts.protocol.kind == ProtocolKind::kNone) out[i] = m.score(examples[i], so);
      else out[i] = m.score(apply_protocol(examples[i], opts.protocol), so);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(opts.threads, examples.size()));
  if (threads <= 1) {
    work(0, examples.size());
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (examples.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk;
    const std::size_t e = std::min(examples.size(), b + chunk);
    pool.emplace_back([&, t, b, e] {
      try {
        work(b, e);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<metrics::ScoredSet> to_scored_sets(std::span<const data::Example> examples,
                                               std::span<const model::ScoreResult> results) {
  if (examples.size() != results.size()) throw ShapeError("to_scored_sets: example/result count mismatch");
  std::vector<metrics::ScoredSet> sets;
  sets.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    metrics::ScoredSet s;
    s.user = examples[i].user;
    s.scores = results[i].probs;
    s.labels.assign(s.scores.size(), 0);
    s.labels[0] = 1;
    sets.push_back(std::move(s));
  }
  return sets;
}

metrics::MetricsReport evaluate(const model::ClsrModel& m, std::span<const data::Example> examples,
                                const EvalOptions& opts) {
  const auto results = score_all(m, examples, opts);
  const auto sets = to_scored_sets(examples, results);
  auto r = metrics::summarize(sets, opts.ndcg_k);
  describe(r, opts);
  return r;
}

metrics::MetricsReport one_side_eval(const model::ClsrModel& m, std::span<const data::Example> examples, Side side,
                                     EvalOptions opts) {
  opts.side = side;
  if (side != Side::kBoth) opts.fixed_alpha.reset();
  return evaluate(m, examples, opts);
}

std::vector<data::Example> filter_by_driver(std::span<const data::Example> examples, data::Driver driver) {
  std::vector<data::Example> out;
  for (const auto& ex : examples)
    if (ex.driver == driver) out.push_back(ex);
  return out;
}

std::vector<AlphaGroup> alpha_stats(const model::ClsrModel& m, std::span<const data::Example> examples,
                                    Partition partition, const std::vector<std::string>& behavior_names,
                                    const EvalOptions& opts) {
  EvalOptions o = opts;
  o.side = Side::kBoth;
  o.fixed_alpha.reset();
  const auto results = score_all(m, examples, o);
  std::map<std::string, std::pair<Moments, Moments>> groups;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    std::string tag;
    if (partition == Partition::kDriver) {
      tag = data::to_string(examples[i].driver);
    } else {
      const auto b = examples[i].behavior;
      tag = b < behavior_names.size() ? behavior_names[b] : std::to_string(b);
    }
    auto& [all, pos] = groups[tag];
    const auto& alphas = results[i].alphas;
    for (double a : alphas) all.add(a);
    pos.add(alphas.at(0));
  }
  std::vector<AlphaGroup> out;
  for (const auto& [tag, mm] : groups) {
    AlphaGroup g;
    g.tag = tag;
    g.mean_all = mm.first.mean();
    g.std_all = mm.first.stddev();
    g.n_all = mm.first.n;
    g.mean_pos = mm.second.mean();
    g.std_pos = mm.second.stddev();
    g.n_pos = mm.second.n;
    out.push_back(g);
  }
  return out;
}

const AlphaGroup& find_group(const std::vector<AlphaGroup>& groups, const std::string& tag) {
  for (const auto& g : groups)
    if (g.tag == tag) return g;
  throw DataError("no alpha statistics for tag '" + tag + "'");
}

std::vector<SweepEntry> fixed_alpha_sweep(const model::ClsrModel& m, std::span<const data::Example> examples,
                                          std::span<const double> alphas, EvalOptions opts) {
  for (double a : alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("fixed alpha values must lie in [0, 1]");
  opts.side = Side::kBoth;
  std::vector<SweepEntry> out;
  for (double a : alphas) {
    opts.fixed_alpha = a;
    out.push_back({a, evaluate(m, examples, opts)});
  }
  opts.fixed_alpha.reset();
  out.push_back({std::nullopt, evaluate(m, examples, opts)});
  return out;
}

std::vector<CurvePoint> truncate_curve(const model::ClsrModel& m, std::span<const data::Example> examples,
                                       std::span<const std::size_t> ks, Side side, EvalOptions opts) {
  if (ks.empty()) throw ConfigError("truncate curve needs at least one k");
  opts.side = side;
  opts.protocol.kind = ProtocolKind::kTruncate;
  std::vector<CurvePoint> out;
  for (auto k : ks) {
    opts.protocol.truncate_k = k;
    out.push_back({k, evaluate(m, examples, opts)});
  }
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

DisentanglementReport disentanglement(const model::ClsrModel& m, std::span<const data::Example> examples,
                                      const std::vector<std::string>& behavior_names, const EvalOptions& opts) {
  DisentanglementReport r;
  EvalOptions o = opts;
  o.side = Side::kBoth;
  o.fixed_alpha.reset();
  const auto results = score_all(m, examples, o);

  Moments ll, ls, ss, sl;
  for (const auto& res : results) {
    if (!res.proxies) continue;
    const auto& [pl, ps] = *res.proxies;
    ll.add(cosine(res.long_interest, pl));
    ls.add(cosine(res.long_interest, ps));
    ss.add(cosine(res.short_interest, ps));
    sl.add(cosine(res.short_interest, pl));
  }
  r.cos_long_longproxy = ll.mean();
  r.cos_long_shortproxy = ls.mean();
  r.cos_short_shortproxy = ss.mean();
  r.cos_short_longproxy = sl.mean();
  r.proxy_examples = ll.n;

  r.alpha_by_behavior = alpha_stats(m, examples, Partition::kBehavior, behavior_names, o);
  r.alpha_by_driver = alpha_stats(m, examples, Partition::kDriver, behavior_names, o);

  const auto sets = to_scored_sets(examples, results);
  r.auc_both = metrics::summarize(sets, o.ndcg_k).at("auc");
  r.auc_long = one_side_eval(m, examples, Side::kLong, o).at("auc");
  r.auc_short = one_side_eval(m, examples, Side::kShort, o).at("auc");

  for (auto d : {data::Driver::kLong, data::Driver::kShort}) {
    std::vector<metrics::ScoredSet> subset;
    for (std::size_t i = 0; i < examples.size(); ++i)
      if (examples[i].driver == d) subset.push_back(sets[i]);
    if (!subset.empty()) r.auc_by_driver.emplace_back(data::to_string(d), metrics::summarize(subset).at("auc"));
  }
  return r;
}

metrics::MetricsReport DisentanglementReport::to_report() const {
  metrics::MetricsReport r;
  r.values["cos_ul_pl"] = cos_long_longproxy;
  r.values["cos_ul_ps"] = cos_long_shortproxy;
  r.values["cos_us_ps"] = cos_short_shortproxy;
  r.values["cos_us_pl"] = cos_short_longproxy;
  r.values["long_gap"] = long_gap();
  r.values["short_gap"] = short_gap();
  r.values["proxy_examples"] = static_cast<double>(proxy_examples);
  r.values["auc_long"] = auc_long;
  r.values["auc_short"] = auc_short;
  r.values["auc_both"] = auc_both;
  auto put_alpha = [&](const std::string& prefix, const std::vector<AlphaGroup>& gs) {
    for (const auto& g : gs) {
      const std::string p = prefix + "." + g.tag + ".";
      r.values[p + "all.mean"] = g.mean_all;
      r.values[p + "all.std"] = g.std_all;
      r.values[p + "all.n"] = static_cast<double>(g.n_all);
      r.values[p + "pos.mean"] = g.mean_pos;
      r.values[p + "pos.std"] = g.std_pos;
      r.values[p + "pos.n"] = static_cast<double>(g.n_pos);
    }
  };
  put_alpha("alpha.behavior", alpha_by_behavior);
  put_alpha("alpha.driver", alpha_by_driver);
  for (const auto& [tag, auc] : auc_by_driver) r.values["auc_driver." + tag] = auc;
  return r;
}

}  // namespace clsr::eval
