#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "clsr/nn.hpp"

namespace clsr::data {

// Ground-truth driver of a synthetic interaction; kUnknown for real data.
enum class Driver : std::uint8_t { kUnknown, kLong, kShort };

enum class Split : std::uint8_t { kTrain, kVal, kTest };

const char* to_string(Driver d);
const char* to_string(Split s);
Driver parse_driver(const std::string& s);

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  std::string behavior;
  Driver driver = Driver::kUnknown;
};

enum class Format { kAuto, kCsv, kTsv };

// Reads a delimited file whose header names user_id, item_id, timestamp and
// behavior (any order, extra columns ignored). Rows whose behavior is not in
// `behaviors` are dropped; an empty set keeps everything.
std::vector<InteractionRecord> load_interactions(const std::filesystem::path& path,
                                                 Format format = Format::kAuto,
                                                 const std::set<std::string>& behaviors = {"click"});

// Attaches `user_id,position,driver` labels. Positions index each user's
// records in stable time order as they appear in `records`.
void attach_driver_labels(const std::filesystem::path& path, std::vector<InteractionRecord>& records);

// Iteratively drops users and items with fewer than `threshold`
// interactions until nothing changes.
std::vector<InteractionRecord> core_filter(std::vector<InteractionRecord> records, std::size_t threshold = 10);

struct Interaction {
  std::size_t item = 0;
  std::int64_t timestamp = 0;
  std::uint16_t behavior = 0;
  Driver driver = Driver::kUnknown;
  Split split = Split::kTrain;
};

// Dense-indexed, per-user time-ordered interaction sequences. Immutable
// once built apart from split tags.
class InteractionDataset {
 public:
  static InteractionDataset build(const std::vector<InteractionRecord>& records);

  std::size_t n_users() const { return user_ids_.size(); }
  std::size_t n_items() const { return item_ids_.size(); }
  std::size_t n_interactions() const;

  const std::vector<Interaction>& sequence(std::size_t user) const { return sequences_[user]; }
  std::vector<Interaction>& sequence(std::size_t user) { return sequences_[user]; }

  const std::string& user_id(std::size_t u) const { return user_ids_[u]; }
  const std::string& item_id(std::size_t i) const { return item_ids_[i]; }
  const std::vector<std::string>& user_ids() const { return user_ids_; }
  const std::vector<std::string>& item_ids() const { return item_ids_; }
  const std::vector<std::string>& behaviors() const { return behaviors_; }
  std::size_t user_index(const std::string& id) const;
  std::size_t item_index(const std::string& id) const;
  std::uint16_t behavior_index(const std::string& tag) const;

 private:
  std::vector<std::string> user_ids_;
  std::vector<std::string> item_ids_;
  std::vector<std::string> behaviors_;
  std::unordered_map<std::string, std::size_t> user_lookup_;
  std::unordered_map<std::string, std::size_t> item_lookup_;
  std::vector<std::vector<Interaction>> sequences_;
};

// Tags each interaction train (< val_start), val ([val_start, test_start))
// or test (>= test_start).
void chronological_split(InteractionDataset& ds, std::int64_t val_start, std::int64_t test_start);

// One prediction instance: a history prefix, its target and sampled
// negatives. Timestamps stay attached to prefix slots, not to items.
struct Example {
  std::size_t user = 0;
  std::size_t position = 0;  // index of the target in the user's sequence
  std::vector<std::size_t> items;
  std::vector<std::int64_t> times;
  std::int64_t target_time = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
  Split split = Split::kTrain;
  std::uint16_t behavior = 0;
  Driver driver = Driver::kUnknown;

  std::size_t candidate_count() const { return negatives.size() + 1; }
  std::vector<std::size_t> candidates() const;
};

// log(1 + seconds since the previous prefix slot) and
// log(1 + seconds until the target), per prefix slot.
std::vector<nn::TimeFeatures> time_features(const Example& ex);

struct ExampleOptions {
  std::size_t n_negatives = 4;
  std::size_t max_seq_len = 50;
  Split split = Split::kTrain;
  // Empty keeps every target behaviour.
  std::set<std::uint16_t> target_behaviors;
};

// One example per target position (prefix length >= 1) in the requested
// split. Negatives are distinct and drawn uniformly from items the user
// never interacted with; each user draws from its own stream derived from
// `seed`, so the result depends only on (dataset, options, seed).
std::vector<Example> build_examples(const InteractionDataset& ds, const ExampleOptions& opts,
                                    std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic generator with planted long/short-term structure.

struct SynthConfig {
  std::size_t n_users = 200;
  std::size_t n_items = 500;
  std::size_t n_topics = 20;
  std::size_t topics_per_user = 1;  // support of each user's long-term topic mix
  std::size_t min_len = 30;
  std::size_t max_len = 60;
  double w_long = 0.5;
  double drift = 0.3;               // per-step probability the session topic moves
  std::int64_t horizon = 9 * 86400; // every user's timeline is rescaled onto [0, horizon]

  void validate() const;
};

struct SyntheticData {
  std::vector<InteractionRecord> records;  // user-major, time-ordered, behavior "click"
  std::vector<std::size_t> item_topic;     // topic of item i
};

// Items are assigned to topics round-robin (item i -> topic i mod n_topics).
// Each user has a fixed long-term topic mix; a session topic walks on the
// ring of topics. Every interaction picks its driver (long with probability
// w_long), then a topic from that driver, then a uniform item of the topic.
SyntheticData synthesize(const SynthConfig& cfg, std::uint64_t seed);

void write_interactions_csv(const std::filesystem::path& path, const std::vector<InteractionRecord>& records);
void write_driver_labels(const std::filesystem::path& path, const std::vector<InteractionRecord>& records);

}  // namespace clsr::data
