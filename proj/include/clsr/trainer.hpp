#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <optional>
#include <vector>

#include "clsr/checkpoint.hpp"
#include "clsr/config.hpp"
#include "clsr/data.hpp"
#include "clsr/metrics.hpp"
#include "clsr/model.hpp"

namespace clsr {

// Dataset with split tags plus the fixed validation and test candidate sets.
struct PreparedData {
  data::InteractionDataset dataset;
  std::vector<data::Example> val;
  std::vector<data::Example> test;
  std::set<std::uint16_t> target_behaviors;
};

// Loads or synthesizes the interactions, applies the k-core filter and the
// chronological split, and samples evaluation negatives from seed-derived
// streams ("val-negatives", "test-negatives").
PreparedData prepare_data(const RunConfig& cfg);

// Training examples of one epoch; negatives come from the
// ("train-negatives", epoch) stream.
std::vector<data::Example> training_examples(const RunConfig& cfg, const PreparedData& data, std::uint64_t epoch);

struct StepRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double l_rec = 0.0;  // mean per example
  double l_con = 0.0;  // mean per example, before beta
  double loss = 0.0;   // optimised objective of the batch
};

struct EpochRecord {
  std::uint64_t epoch = 0;
  std::uint64_t steps = 0;
  metrics::MetricsReport validation;
  double seconds = 0.0;
  bool improved = false;
};

struct TrainOptions {
  // Output directory for logs and checkpoints; empty writes nothing.
  std::filesystem::path out_dir;
  bool resume = false;  // continue from out_dir/last.ckpt
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  TrainingState state;
  bool early_stopped = false;
};

// Mini-batch Adam on the joint loss. Validation GAUC after each epoch picks
// best.ckpt; last.ckpt is rewritten every epoch. Throws NumericError on a
// non-finite loss.
TrainResult train(const RunConfig& cfg, const PreparedData& data, model::ClsrModel& m, const TrainOptions& opts);

// Builds a model sized for `data` from the run's model config and seed.
std::unique_ptr<model::ClsrModel> make_model(const RunConfig& cfg, const PreparedData& data);

// Validation subset used for per-epoch evaluation.
std::vector<data::Example> validation_subset(const RunConfig& cfg, const PreparedData& data);

// Comment preamble with the full run configuration, one "# key = value" per line.
std::string config_preamble(const RunConfig& cfg);

}  // namespace clsr
