#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "clsr/adam.hpp"
#include "clsr/data.hpp"
#include "clsr/model.hpp"

namespace clsr {

// Everything one run needs. Serialized as flat `key = value` text; see
// docs/formats.md for the key list.
struct RunConfig {
  model::ClsrConfig model;

  // Optimisation.
  double lr = 0.001;
  std::size_t batch_size = 500;
  std::size_t epochs = 10;
  std::size_t patience = 3;    // epochs without validation GAUC improvement
  std::size_t max_steps = 0;   // 0 = no step limit
  std::size_t train_negatives = 4;
  std::size_t eval_negatives = 99;
  std::size_t val_max_examples = 0;  // 0 = whole validation split
  std::size_t ndcg_k = 2;
  std::size_t threads = 1;     // evaluation workers

  // Data.
  std::string data_source = "synthetic";  // "synthetic" or "file"
  std::string data_path;
  std::string data_format = "auto";       // auto, csv, tsv
  std::string driver_labels;              // optional sidecar
  std::vector<std::string> behaviors{"click"};
  std::vector<std::string> target_behaviors;  // empty = every kept behavior
  std::size_t core = 0;                   // k-core threshold, 0 disables
  std::int64_t val_start = 7 * 86400;
  std::int64_t test_start = 8 * 86400;
  data::SynthConfig synth;

  std::uint64_t seed = 42;
  std::string output_dir = "runs/default";

  void validate() const;
  AdamConfig adam() const;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Parses `key = value` lines; blank lines and lines starting with '#' are
// skipped. Duplicate keys throw ConfigError.
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<string>");
KeyValues read_key_values(const std::filesystem::path& path);

// Applies key/value pairs in order. Unknown keys and malformed values throw
// ConfigError naming the key.
void apply_key_values(RunConfig& cfg, const KeyValues& kv);

// Every key with its current value, in canonical order.
KeyValues to_key_values(const RunConfig& cfg);
std::string to_text(const RunConfig& cfg);

// Keys that define the parameter layout and model semantics. Checkpoints
// echo these and refuse to load into a model that disagrees.
KeyValues model_key_values(const model::ClsrConfig& cfg);

// Defaults, then the file (if any), then `overrides`; validated.
RunConfig load_config(const std::filesystem::path& file, const KeyValues& overrides);

// Parses a `key=value` command-line override.
std::pair<std::string, std::string> parse_override(const std::string& s);

// Output root: $CLSR_OUTPUT_ROOT when set, else the current directory.
// Relative output_dir values resolve against it.
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

}  // namespace clsr
