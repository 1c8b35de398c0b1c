#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "clsr/adam.hpp"
#include "clsr/model.hpp"

namespace clsr {

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'S', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Trainer bookkeeping needed to resume a run exactly.
struct TrainingState {
  std::uint64_t epoch = 0;       // completed epochs
  std::uint64_t step = 0;        // completed optimiser steps
  double best_gauc = -std::numeric_limits<double>::infinity();
  std::uint64_t best_epoch = 0;
  std::uint64_t bad_epochs = 0;  // epochs since the last improvement
  std::string rng_state;         // textual std::mt19937_64 state of the batch shuffler
};

struct CheckpointContents {
  std::string config_echo;  // model header, compared on load
  std::string run_config;   // full run configuration, informational
  TrainingState training;
  AdamState adam;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
};

// Model header text stored in (and compared by) checkpoints.
std::string checkpoint_echo(const model::ClsrModel& m);

// Writes to a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const model::ClsrModel& m, const AdamState& adam,
                     const TrainingState& training, const std::vector<std::string>& user_ids,
                     const std::vector<std::string>& item_ids,
                     const std::string& run_config = {});

// Loads parameter values into `m`. Throws DataError on a malformed file and
// ConfigError when the stored model header, parameter names or shapes do
// not match `m`.
CheckpointContents load_checkpoint(const std::filesystem::path& path, model::ClsrModel& m);

}  // namespace clsr
