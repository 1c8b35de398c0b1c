#include "clsr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "clsr/errors.hpp"
#include "clsr/rng.hpp"

namespace clsr::data {

namespace fs = std::filesystem;

const char* to_string(Driver d) {
  switch (d) {
    case Driver::kLong: return "LONG";
    case Driver::kShort: return "SHORT";
    case Driver::kUnknown: return "UNKNOWN";
  }
  return "UNKNOWN";
}

const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Driver parse_driver(const std::string& s) {
  if (s == "LONG") return Driver::kLong;
  if (s == "SHORT") return Driver::kShort;
  if (s == "UNKNOWN") return Driver::kUnknown;
  throw DataError("unknown driver label '" + s + "'");
}

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

char delimiter_for(const fs::path& path, Format format) {
  switch (format) {
    case Format::kCsv: return ',';
    case Format::kTsv: return '\t';
    case Format::kAuto: break;
  }
  const auto ext = path.extension().string();
  return (ext == ".tsv" || ext == ".tab") ? '\t' : ',';
}

std::int64_t parse_int(const std::string& s, const fs::path& path, std::size_t line_no,
                       const char* what) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (s.empty() || pos != s.size()) {
    throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + what + " '" + s +
                    "' is not an integer");
  }
  return v;
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

}  // namespace

std::vector<InteractionRecord> load_interactions(const fs::path& path, Format format,
                                                 const std::set<std::string>& behaviors) {
  auto in = open_input(path);
  const char delim = delimiter_for(path, format);
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos)
    throw DataError(path.string() + ": empty file");

  const auto header = split_line(line, delim);
  auto column = [&](const char* name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(path.string() + ": header lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cu = column("user_id"), ci = column("item_id"), ct = column("timestamp"),
                    cb = column("behavior");
  const std::size_t need = std::max({cu, ci, ct, cb}) + 1;

  std::vector<InteractionRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_line(line, delim);
    if (f.size() < need)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected at least " +
                      std::to_string(need) + " fields, got " + std::to_string(f.size()));
    InteractionRecord r;
    r.user_id = f[cu];
    r.item_id = f[ci];
    r.timestamp = parse_int(f[ct], path, line_no, "timestamp");
    r.behavior = f[cb];
    if (r.user_id.empty() || r.item_id.empty())
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": empty user or item id");
    if (r.timestamp < 0)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": negative timestamp");
    if (!behaviors.empty() && !behaviors.contains(r.behavior)) continue;
    out.push_back(std::move(r));
  }
  return out;
}

void attach_driver_labels(const fs::path& path, std::vector<InteractionRecord>& records) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  const auto header = split_line(line, ',');
  if (header != std::vector<std::string>{"user_id", "position", "driver"})
    throw DataError(path.string() + ": header must be user_id,position,driver");

  // Per-user record indices in stable time order.
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < records.size(); ++i) by_user[records[i].user_id].push_back(i);
  for (auto& [_, idx] : by_user) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return records[a].timestamp < records[b].timestamp;
    });
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_line(line, ',');
    if (f.size() != 3) throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    auto it = by_user.find(f[0]);
    if (it == by_user.end()) continue;
    const auto pos = parse_int(f[1], path, line_no, "position");
    if (pos < 0 || static_cast<std::size_t>(pos) >= it->second.size())
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": position out of range");
    records[it->second[static_cast<std::size_t>(pos)]].driver = parse_driver(f[2]);
  }
}

std::vector<InteractionRecord> core_filter(std::vector<InteractionRecord> records, std::size_t threshold) {
  if (threshold == 0) throw ConfigError("core threshold must be >= 1");
  while (true) {
    std::unordered_map<std::string, std::size_t> users, items;
    for (const auto& r : records) {
      ++users[r.user_id];
      ++items[r.item_id];
    }
    std::vector<InteractionRecord> kept;
    kept.reserve(records.size());
    for (auto& r : records) {
      if (users[r.user_id] >= threshold && items[r.item_id] >= threshold) kept.push_back(std::move(r));
    }
    const bool changed = kept.size() != records.size();
    records = std::move(kept);
    if (!changed) return records;
  }
}

// ---------------------------------------------------------------------------

InteractionDataset InteractionDataset::build(const std::vector<InteractionRecord>& records) {
  InteractionDataset ds;
  std::unordered_map<std::string, std::uint16_t> behavior_lookup;
  std::vector<std::vector<std::pair<std::int64_t, Interaction>>> staged;
  for (const auto& r : records) {
    auto [uit, unew] = ds.user_lookup_.try_emplace(r.user_id, ds.user_ids_.size());
    if (unew) {
      ds.user_ids_.push_back(r.user_id);
      staged.emplace_back();
    }
    auto [iit, inew] = ds.item_lookup_.try_emplace(r.item_id, ds.item_ids_.size());
    if (inew) ds.item_ids_.push_back(r.item_id);
    auto [bit, bnew] = behavior_lookup.try_emplace(r.behavior, static_cast<std::uint16_t>(ds.behaviors_.size()));
    if (bnew) ds.behaviors_.push_back(r.behavior);

    Interaction it;
    it.item = iit->second;
    it.timestamp = r.timestamp;
    it.behavior = bit->second;
    it.driver = r.driver;
    staged[uit->second].emplace_back(r.timestamp, it);
  }
  ds.sequences_.resize(staged.size());
  for (std::size_t u = 0; u < staged.size(); ++u) {
    auto& s = staged[u];
    std::stable_sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    ds.sequences_[u].reserve(s.size());
    for (auto& [_, it] : s) ds.sequences_[u].push_back(it);
  }
  return ds;
}

std::size_t InteractionDataset::n_interactions() const {
  std::size_t n = 0;
  for (const auto& s : sequences_) n += s.size();
  return n;
}

std::size_t InteractionDataset::user_index(const std::string& id) const {
  auto it = user_lookup_.find(id);
  if (it == user_lookup_.end()) throw DataError("unknown user id '" + id + "'");
  return it->second;
}

std::size_t InteractionDataset::item_index(const std::string& id) const {
  auto it = item_lookup_.find(id);
  if (it == item_lookup_.end()) throw DataError("unknown item id '" + id + "'");
  return it->second;
}

std::uint16_t InteractionDataset::behavior_index(const std::string& tag) const {
  auto it = std::find(behaviors_.begin(), behaviors_.end(), tag);
  if (it == behaviors_.end()) throw DataError("unknown behavior tag '" + tag + "'");
  return static_cast<std::uint16_t>(it - behaviors_.begin());
}

void chronological_split(InteractionDataset& ds, std::int64_t val_start, std::int64_t test_start) {
  if (!(val_start < test_start))
    throw ConfigError("split boundaries must satisfy val_start < test_start");
  for (std::size_t u = 0; u < ds.n_users(); ++u) {
    for (auto& it : ds.sequence(u)) {
      it.split = it.timestamp < val_start ? Split::kTrain
                 : it.timestamp < test_start ? Split::kVal
                                             : Split::kTest;
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Example::candidates() const {
  std::vector<std::size_t> c;
  c.reserve(negatives.size() + 1);
  c.push_back(positive);
  c.insert(c.end(), negatives.begin(), negatives.end());
  return c;
}

std::vector<nn::TimeFeatures> time_features(const Example& ex) {
  std::vector<nn::TimeFeatures> out(ex.times.size());
  for (std::size_t j = 0; j < ex.times.size(); ++j) {
    const auto prev = j == 0 ? 0 : std::max<std::int64_t>(0, ex.times[j] - ex.times[j - 1]);
    const auto until = std::max<std::int64_t>(0, ex.target_time - ex.times[j]);
    out[j].since_prev = std::log1p(static_cast<double>(prev));
    out[j].until_target = std::log1p(static_cast<double>(until));
  }
  return out;
}

std::vector<Example> build_examples(const InteractionDataset& ds, const ExampleOptions& opts,
                                    std::uint64_t seed) {
  if (opts.n_negatives == 0) throw ConfigError("n_negatives must be >= 1");
  if (opts.max_seq_len == 0) throw ConfigError("max_seq_len must be >= 1");
  std::vector<Example> out;
  const std::size_t n_items = ds.n_items();
  for (std::size_t u = 0; u < ds.n_users(); ++u) {
    const auto& seq = ds.sequence(u);
    std::unordered_set<std::size_t> seen;
    for (const auto& it : seq) seen.insert(it.item);

    bool any = false;
    for (std::size_t p = 1; p < seq.size() && !any; ++p) {
      any = seq[p].split == opts.split &&
            (opts.target_behaviors.empty() || opts.target_behaviors.contains(seq[p].behavior));
    }
    if (!any) continue;
    if (n_items < seen.size() + opts.n_negatives)
      throw DataError("catalog of " + std::to_string(n_items) + " items cannot supply " +
                      std::to_string(opts.n_negatives) + " negatives for user " + ds.user_id(u));

    std::mt19937_64 rng(derive_seed(seed, "negatives", u));
    std::uniform_int_distribution<std::size_t> pick(0, n_items - 1);
    for (std::size_t p = 1; p < seq.size(); ++p) {
      const auto& target = seq[p];
      if (target.split != opts.split) continue;
      if (!opts.target_behaviors.empty() && !opts.target_behaviors.contains(target.behavior)) continue;
      Example ex;
      ex.user = u;
      ex.position = p;
      const std::size_t begin = p > opts.max_seq_len ? p - opts.max_seq_len : 0;
      for (std::size_t j = begin; j < p; ++j) {
        ex.items.push_back(seq[j].item);
        ex.times.push_back(seq[j].timestamp);
      }
      ex.target_time = target.timestamp;
      ex.positive = target.item;
      ex.split = target.split;
      ex.behavior = target.behavior;
      ex.driver = target.driver;
      std::unordered_set<std::size_t> chosen;
      while (ex.negatives.size() < opts.n_negatives) {
        const std::size_t cand = pick(rng);
        if (seen.contains(cand) || chosen.contains(cand)) continue;
        chosen.insert(cand);
        ex.negatives.push_back(cand);
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
  if (n_users == 0 || n_items == 0 || n_topics == 0) throw ConfigError("synth: counts must be positive");
  if (n_topics > n_items) throw ConfigError("synth: more topics than items");
  if (topics_per_user == 0 || topics_per_user > n_topics)
    throw ConfigError("synth: topics_per_user must be in [1, n_topics]");
  if (min_len < 2 || min_len > max_len) throw ConfigError("synth: need 2 <= min_len <= max_len");
  if (!(w_long >= 0.0 && w_long <= 1.0)) throw ConfigError("synth: w_long must lie in [0, 1]");
  if (!(drift >= 0.0 && drift <= 1.0)) throw ConfigError("synth: drift must lie in [0, 1]");
  if (horizon < static_cast<std::int64_t>(max_len)) throw ConfigError("synth: horizon too short");
}

SyntheticData synthesize(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SyntheticData out;
  out.item_topic.resize(cfg.n_items);
  std::vector<std::vector<std::size_t>> topic_items(cfg.n_topics);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    out.item_topic[i] = i % cfg.n_topics;
    topic_items[i % cfg.n_topics].push_back(i);
  }

  std::mt19937_64 rng(derive_seed(seed, "synth"));
  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<std::size_t> topic_dist(0, cfg.n_topics - 1);
  std::bernoulli_distribution drift(cfg.drift), long_driver(cfg.w_long), step_up(0.5);
  std::gamma_distribution<double> gamma(1.0, 1.0);
  std::exponential_distribution<double> short_gap(1.0 / 600.0), session_gap(1.0 / 21600.0);

  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    const std::size_t len = len_dist(rng);
    std::vector<std::size_t> topics(cfg.n_topics);
    std::iota(topics.begin(), topics.end(), 0);
    std::shuffle(topics.begin(), topics.end(), rng);
    topics.resize(cfg.topics_per_user);
    std::vector<double> weights(cfg.topics_per_user);
    for (auto& w : weights) w = gamma(rng) + 1e-9;
    std::discrete_distribution<std::size_t> long_topic(weights.begin(), weights.end());

    std::size_t session = topic_dist(rng);
    std::vector<double> raw(len, 0.0);
    const std::size_t first = out.records.size();
    for (std::size_t pos = 0; pos < len; ++pos) {
      bool moved = false;
      if (pos > 0 && drift(rng)) {
        session = step_up(rng) ? (session + 1) % cfg.n_topics : (session + cfg.n_topics - 1) % cfg.n_topics;
        moved = true;
      }
      const bool is_long = long_driver(rng);
      const std::size_t topic = is_long ? topics[long_topic(rng)] : session;
      const auto& pool = topic_items[topic];
      std::uniform_int_distribution<std::size_t> item_dist(0, pool.size() - 1);
      const std::size_t item = pool[item_dist(rng)];
      if (pos > 0) raw[pos] = raw[pos - 1] + (moved ? session_gap(rng) : short_gap(rng));

      InteractionRecord r;
      r.user_id = "u" + std::to_string(u);
      r.item_id = "i" + std::to_string(item);
      r.behavior = "click";
      r.driver = is_long ? Driver::kLong : Driver::kShort;
      out.records.push_back(std::move(r));
    }
    const double span = raw.back() > 0.0 ? raw.back() : 1.0;
    std::int64_t prev = -1;
    for (std::size_t pos = 0; pos < len; ++pos) {
      auto ts = static_cast<std::int64_t>(std::llround(raw[pos] / span * static_cast<double>(cfg.horizon)));
      ts = std::max(ts, prev + 1);
      out.records[first + pos].timestamp = ts;
      prev = ts;
    }
  }
  return out;
}

namespace {
std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}
}  // namespace

void write_interactions_csv(const fs::path& path, const std::vector<InteractionRecord>& records) {
  auto out = open_output(path);
  out << "user_id,item_id,timestamp,behavior\n";
  for (const auto& r : records) out << r.user_id << ',' << r.item_id << ',' << r.timestamp << ',' << r.behavior << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

void write_driver_labels(const fs::path& path, const std::vector<InteractionRecord>& records) {
  auto out = open_output(path);
  out << "user_id,position,driver\n";
  std::unordered_map<std::string, std::size_t> next;
  // Records are expected in per-user time order, as synthesize() emits them.
  for (const auto& r : records) out << r.user_id << ',' << next[r.user_id]++ << ',' << to_string(r.driver) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace clsr::data
