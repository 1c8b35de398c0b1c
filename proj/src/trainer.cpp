#include "clsr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "clsr/adam.hpp"
#include "clsr/errors.hpp"
#include "clsr/eval.hpp"
#include "clsr/rng.hpp"

namespace clsr {

namespace fs = std::filesystem;

namespace {

data::Format parse_format(const std::string& s) {
  if (s == "csv") return data::Format::kCsv;
  if (s == "tsv") return data::Format::kTsv;
  return data::Format::kAuto;
}

// Appends to a log file; a new file starts with the config preamble and
// the column header.
std::ofstream open_log(const fs::path& path, const std::string& preamble, const std::string& header, bool append) {
  const bool fresh = !append || !fs::exists(path);
  std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(17);
  if (fresh) out << preamble << header << '\n';
  return out;
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

std::string config_preamble(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : to_key_values(cfg)) out += "# " + k + " = " + v + "\n";
  return out;
}

PreparedData prepare_data(const RunConfig& cfg) {
  std::vector<data::InteractionRecord> records;
  if (cfg.data_source == "synthetic") {
    records = data::synthesize(cfg.synth, derive_seed(cfg.seed, "synth")).records;
  } else {
    std::set<std::string> behaviors(cfg.behaviors.begin(), cfg.behaviors.end());
    records = data::load_interactions(cfg.data_path, parse_format(cfg.data_format), behaviors);
    if (!cfg.driver_labels.empty()) data::attach_driver_labels(cfg.driver_labels, records);
  }
  if (cfg.core > 0) records = data::core_filter(std::move(records), cfg.core);
  if (records.empty()) throw DataError("no interactions left after loading and filtering");

  PreparedData p;
  p.dataset = data::InteractionDataset::build(records);
  data::chronological_split(p.dataset, cfg.val_start, cfg.test_start);
  for (const auto& tag : cfg.target_behaviors) p.target_behaviors.insert(p.dataset.behavior_index(tag));

  data::ExampleOptions opts;
  opts.n_negatives = cfg.eval_negatives;
  opts.max_seq_len = cfg.model.max_seq_len;
  opts.target_behaviors = p.target_behaviors;
  opts.split = data::Split::kVal;
  p.val = data::build_examples(p.dataset, opts, derive_seed(cfg.seed, "val-negatives"));
  opts.split = data::Split::kTest;
  p.test = data::build_examples(p.dataset, opts, derive_seed(cfg.seed, "test-negatives"));
  return p;
}

std::vector<data::Example> training_examples(const RunConfig& cfg, const PreparedData& data, std::uint64_t epoch) {
  data::ExampleOptions opts;
  opts.n_negatives = cfg.train_negatives;
  opts.max_seq_len = cfg.model.max_seq_len;
  opts.split = data::Split::kTrain;
  opts.target_behaviors = data.target_behaviors;
  return data::build_examples(data.dataset, opts, derive_seed(cfg.seed, "train-negatives", epoch));
}

std::unique_ptr<model::ClsrModel> make_model(const RunConfig& cfg, const PreparedData& data) {
  return std::make_unique<model::ClsrModel>(cfg.model, data.dataset.n_users(), data.dataset.n_items(),
                                            derive_seed(cfg.seed, "init"));
}

std::vector<data::Example> validation_subset(const RunConfig& cfg, const PreparedData& data) {
  if (cfg.val_max_examples == 0 || data.val.size() <= cfg.val_max_examples) return data.val;
  std::vector<std::size_t> idx(data.val.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg.seed, "val-sample"));
  for (std::size_t i = 0; i < cfg.val_max_examples; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(cfg.val_max_examples);
  std::sort(idx.begin(), idx.end());
  std::vector<data::Example> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data.val[i]);
  return out;
}

TrainResult train(const RunConfig& cfg, const PreparedData& data, model::ClsrModel& m, const TrainOptions& opts) {
  cfg.validate();
  const bool write = !opts.out_dir.empty();
  const std::string run_text = to_text(cfg);
  const auto& user_ids = data.dataset.user_ids();
  const auto& item_ids = data.dataset.item_ids();

  TrainResult result;
  AdamState adam = AdamState::for_params(m.params());
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  TrainingState& st = result.state;

  if (opts.resume) {
    if (!write) throw ConfigError("resume needs an output directory");
    const auto loaded = load_checkpoint(opts.out_dir / "last.ckpt", m);
    if (loaded.user_ids != user_ids || loaded.item_ids != item_ids)
      throw ConfigError("checkpoint id maps do not match the dataset");
    st = loaded.training;
    if (!loaded.adam.m.empty()) adam = loaded.adam;
    adam.step = loaded.adam.step;
    std::istringstream is(st.rng_state);
    is >> shuffle_rng;
    if (!is) throw DataError("checkpoint holds a malformed RNG state");
  }

  std::ofstream step_log, epoch_log;
  if (write) {
    fs::create_directories(opts.out_dir);
    std::ofstream(opts.out_dir / "config.txt") << run_text;
    const std::string pre = config_preamble(cfg);
    step_log = open_log(opts.out_dir / "steps.csv", pre, "step,epoch,l_rec,l_con,loss", opts.resume);
    epoch_log = open_log(opts.out_dir / "epochs.csv", pre,
                         "epoch,steps,val_auc,val_gauc,val_mrr,val_ndcg,seconds,improved", opts.resume);
  }
  auto save = [&](const std::string& name) {
    if (!write) return;
    st.rng_state = rng_text(shuffle_rng);
    save_checkpoint(opts.out_dir / name, m, adam, st, user_ids, item_ids, run_text);
  };

  if (!opts.resume && cfg.epochs == 0) {
    save("last.ckpt");
    save("best.ckpt");
    return result;
  }

  const auto val = validation_subset(cfg, data);
  eval::EvalOptions eopts;
  eopts.ndcg_k = cfg.ndcg_k;
  eopts.threads = cfg.threads;
  const AdamConfig adam_cfg = cfg.adam();
  bool step_limit = cfg.max_steps > 0 && st.step >= cfg.max_steps;

  while (st.epoch < cfg.epochs && !step_limit && !result.early_stopped) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t epoch = st.epoch;
    const auto examples = training_examples(cfg, data, epoch);
    if (examples.empty()) throw DataError("the training split has no examples");

    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);

    std::uint64_t epoch_steps = 0;
    std::vector<data::Example> batch;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      if (cfg.max_steps > 0 && st.step >= cfg.max_steps) {
        step_limit = true;
        break;
      }
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(examples[order[i]]);

      ad::Graph g;
      const auto terms = m.joint_loss(g, batch, nn::Mode::kTrain);
      const double loss = terms.total.value()[0];
      StepRecord rec{st.step + 1, epoch, terms.rec / static_cast<double>(batch.size()),
                     terms.contrastive / static_cast<double>(batch.size()), loss};
      if (write) step_log << rec.step << ',' << rec.epoch << ',' << rec.l_rec << ',' << rec.l_con << ','
                          << rec.loss << '\n';
      if (!std::isfinite(loss)) {
        if (write) step_log.flush();
        throw NumericError("non-finite loss at step " + std::to_string(rec.step));
      }
      const auto grads = g.backward(terms.total);
      adam_step(m.params(), grads, adam, adam_cfg);
      ++st.step;
      ++epoch_steps;
      result.steps.push_back(rec);
      if (opts.on_step) opts.on_step(rec);
    }

    EpochRecord er;
    er.epoch = epoch;
    er.steps = epoch_steps;
    st.epoch = epoch + 1;
    if (!val.empty()) {
      er.validation = eval::evaluate(m, val, eopts);
      const double gauc = er.validation.at("gauc");
      er.improved = gauc > st.best_gauc;
    } else {
      er.improved = true;
    }
    if (er.improved) {
      if (!val.empty()) st.best_gauc = er.validation.at("gauc");
      st.best_epoch = epoch;
      st.bad_epochs = 0;
    } else {
      ++st.bad_epochs;
    }
    if (st.bad_epochs >= cfg.patience && cfg.patience > 0) result.early_stopped = true;
    er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (er.improved) save("best.ckpt");
    save("last.ckpt");
    if (write) {
      auto get = [&](const std::string& k) {
        auto it = er.validation.values.find(k);
        return it == er.validation.values.end() ? std::nan("") : it->second;
      };
      epoch_log << er.epoch << ',' << er.steps << ',' << get("auc") << ',' << get("gauc") << ',' << get("mrr")
                << ',' << get("ndcg@" + std::to_string(cfg.ndcg_k)) << ',' << er.seconds << ','
                << (er.improved ? 1 : 0) << '\n';
      step_log.flush();
      epoch_log.flush();
    }
    result.epochs.push_back(er);
    if (opts.on_epoch) opts.on_epoch(er);
  }
  if (write && !fs::exists(opts.out_dir / "best.ckpt")) save("best.ckpt");
  return result;
}

}  // namespace clsr
