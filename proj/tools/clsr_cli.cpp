// Command-line front end: train, evaluate, suite, synthesize, sweep,
// grad-check. Exit codes: 0 success, 1 usage or configuration error,
// 2 data error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clsr/checkpoint.hpp"
#include "clsr/config.hpp"
#include "clsr/errors.hpp"
#include "clsr/eval.hpp"
#include "clsr/gradcheck.hpp"
#include "clsr/rng.hpp"
#include "clsr/trainer.hpp"

namespace fs = std::filesystem;
using namespace clsr;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;

  RunConfig load() const {
    KeyValues overrides;
    for (const auto& s : sets) overrides.push_back(parse_override(s));
    return load_config(config, overrides);
  }
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", args.sets, "override a config key (key=value); applied after the file")
      ->allow_extra_args(false);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// Writes <dir>/<name>.json and <dir>/<name>.kv, both carrying the config echo.
void write_report(const fs::path& dir, const std::string& name, const metrics::MetricsReport& r,
                  const RunConfig& cfg) {
  fs::create_directories(dir);
  {
    std::ofstream kv(dir / (name + ".kv"));
    if (!kv) throw DataError("cannot write " + (dir / (name + ".kv")).string());
    kv << config_preamble(cfg) << r.to_kv();
  }
  auto j = nlohmann::ordered_json::parse(r.to_json());
  nlohmann::ordered_json conf = nlohmann::ordered_json::object();
  for (const auto& [k, v] : to_key_values(cfg)) conf[k] = v;
  j["config"] = conf;
  std::ofstream js(dir / (name + ".json"));
  if (!js) throw DataError("cannot write " + (dir / (name + ".json")).string());
  js << j.dump(2) << '\n';
}

struct Loaded {
  PreparedData data;
  std::unique_ptr<model::ClsrModel> model;
};

Loaded load_trained(const RunConfig& cfg, const std::string& checkpoint) {
  Loaded l{prepare_data(cfg), nullptr};
  l.model = make_model(cfg, l.data);
  const fs::path path = checkpoint.empty() ? resolve_output_dir(cfg) / "best.ckpt" : fs::path(checkpoint);
  const auto c = load_checkpoint(path, *l.model);
  if (c.user_ids != l.data.dataset.user_ids() || c.item_ids != l.data.dataset.item_ids())
    throw ConfigError(path.string() + ": id maps do not match the configured dataset");
  return l;
}

const std::vector<data::Example>& split_examples(const PreparedData& d, const std::string& split) {
  if (split == "test") return d.test;
  if (split == "val") return d.val;
  throw ConfigError("split must be test or val, got '" + split + "'");
}

std::string cell_name(const eval::EvalOptions& o) {
  std::string n = eval::to_string(o.protocol.kind);
  if (o.protocol.kind == eval::ProtocolKind::kTruncate) n += "_k" + std::to_string(o.protocol.truncate_k);
  if (o.protocol.kind == eval::ProtocolKind::kShuffle) n += "_s" + std::to_string(o.protocol.seed);
  n += std::string("_") + eval::to_string(o.side);
  if (o.side == eval::Side::kBoth && o.fixed_alpha) n += "_a" + fmt(*o.fixed_alpha);
  return n;
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonArgs& args, bool resume) {
  const auto cfg = args.load();
  const auto data = prepare_data(cfg);
  auto m = make_model(cfg, data);
  TrainOptions opts;
  opts.out_dir = resolve_output_dir(cfg);
  opts.resume = resume;
  opts.on_epoch = [](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << " steps=" << e.steps;
    for (const char* k : {"auc", "gauc"}) {
      auto it = e.validation.values.find(k);
      if (it != e.validation.values.end()) std::cout << " val_" << k << '=' << std::setprecision(6) << it->second;
    }
    std::cout << (e.improved ? " *" : "") << " (" << std::setprecision(3) << e.seconds << "s)\n" << std::flush;
  };
  std::cout << "users=" << data.dataset.n_users() << " items=" << data.dataset.n_items()
            << " val=" << data.val.size() << " test=" << data.test.size() << '\n';
  const auto r = train(cfg, data, *m, opts);
  std::cout << "done: " << r.state.step << " steps, " << r.state.epoch << " epochs"
            << (r.early_stopped ? " (early stop)" : "") << ", output in " << opts.out_dir.string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string protocol = "none";
  std::string side = "both";
  std::string split = "test";
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::optional<double> alpha;
  std::string out;
};

int cmd_evaluate(const CommonArgs& args, const EvalArgs& e) {
  const auto cfg = args.load();
  auto l = load_trained(cfg, e.checkpoint);
  eval::EvalOptions o;
  o.protocol.kind = eval::parse_protocol(e.protocol);
  o.protocol.truncate_k = e.k;
  o.protocol.seed = e.seed;
  o.side = eval::parse_side(e.side);
  o.fixed_alpha = e.alpha;
  o.ndcg_k = cfg.ndcg_k;
  o.threads = cfg.threads;
  if (o.fixed_alpha && o.side != eval::Side::kBoth) throw ConfigError("--alpha only applies with --side both");
  o.protocol.validate();
  const auto& examples = split_examples(l.data, e.split);
  auto r = eval::evaluate(*l.model, examples, o);
  r.info["split"] = e.split;
  const fs::path dir = e.out.empty() ? resolve_output_dir(cfg) / "eval" : fs::path(e.out);
  const auto name = cell_name(o);
  write_report(dir, name, r, cfg);
  std::cout << r.to_kv() << "written " << (dir / name).string() << ".{json,kv}\n";
  return 0;
}

struct SuiteArgs {
  std::string checkpoint;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<std::size_t> ks{5, 10, 20, 40};
  std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0};
};

int cmd_suite(const CommonArgs& args, const SuiteArgs& s) {
  const auto cfg = args.load();
  auto l = load_trained(cfg, s.checkpoint);
  const auto& m = *l.model;
  const auto& test = l.data.test;
  const fs::path dir = s.out.empty() ? resolve_output_dir(cfg) / "suite" : fs::path(s.out);
  fs::create_directories(dir);

  eval::EvalOptions base;
  base.ndcg_k = cfg.ndcg_k;
  base.threads = cfg.threads;
  std::vector<std::string> files;
  std::ofstream summary(dir / "summary.tsv");
  summary << config_preamble(cfg) << "cell\tprotocol\tside\tk\talpha\tauc\tgauc\tmrr\tndcg@" << cfg.ndcg_k << '\n'
          << std::setprecision(17);
  auto emit = [&](const std::string& name, metrics::MetricsReport r) {
    r.info["cell"] = name;
    write_report(dir, name, r, cfg);
    files.push_back(name + ".json");
    files.push_back(name + ".kv");
    auto info = [&](const char* k) {
      auto it = r.info.find(k);
      return it == r.info.end() ? std::string("-") : it->second;
    };
    summary << name << '\t' << info("protocol") << '\t' << info("side") << '\t' << info("k") << '\t'
            << info("alpha") << '\t' << r.at("auc") << '\t' << r.at("gauc") << '\t' << r.at("mrr") << '\t'
            << r.at("ndcg@" + std::to_string(cfg.ndcg_k)) << '\n';
  };

  const eval::Side sides[] = {eval::Side::kLong, eval::Side::kShort, eval::Side::kBoth};
  for (auto side : sides) {
    auto o = base;
    o.side = side;
    emit(cell_name(o), eval::evaluate(m, test, o));
  }
  for (auto side : sides) {
    auto o = base;
    o.side = side;
    o.protocol = {eval::ProtocolKind::kShuffle, 0, s.seed};
    emit(cell_name(o), eval::evaluate(m, test, o));
  }
  for (auto side : sides) {
    auto o = base;
    o.side = side;
    for (const auto& p : eval::truncate_curve(m, test, s.ks, side, o)) {
      auto oo = o;
      oo.protocol = {eval::ProtocolKind::kTruncate, p.k, 0};
      emit(cell_name(oo), p.report);
    }
  }
  for (const auto& e : eval::fixed_alpha_sweep(m, test, s.alphas, base)) {
    auto o = base;
    o.fixed_alpha = e.alpha;
    emit(e.alpha ? cell_name(o) : std::string("none_both_adaptive"), e.report);
  }
  // Long-only truncation curve restricted to long-driven targets.
  const auto long_targets = eval::filter_by_driver(test, data::Driver::kLong);
  if (!long_targets.empty()) {
    for (const auto& p : eval::truncate_curve(m, long_targets, s.ks, eval::Side::kLong, base)) {
      auto r = p.report;
      r.info["stratum"] = "LONG";
      emit("truncate_k" + std::to_string(p.k) + "_long_driverLONG", r);
    }
  }

  const auto d = eval::disentanglement(m, test, l.data.dataset.behaviors(), base);
  {
    auto r = d.to_report();
    r.info["cell"] = "disentanglement";
    write_report(dir, "disentanglement", r, cfg);
    files.push_back("disentanglement.json");
    files.push_back("disentanglement.kv");
  }
  summary.close();
  files.push_back("summary.tsv");
  std::ofstream manifest(dir / "manifest.txt");
  for (const auto& f : files) manifest << f << '\n';
  std::cout << "suite: " << files.size() << " files in " << dir.string() << '\n';
  return 0;
}

struct SynthArgs {
  std::string out;
};

int cmd_synthesize(const CommonArgs& args, const SynthArgs& s) {
  const auto cfg = args.load();
  const auto synth = data::synthesize(cfg.synth, derive_seed(cfg.seed, "synth"));
  const fs::path dir = s.out.empty() ? resolve_output_dir(cfg) : fs::path(s.out);
  data::write_interactions_csv(dir / "interactions.csv", synth.records);
  data::write_driver_labels(dir / "drivers.csv", synth.records);
  std::cout << synth.records.size() << " interactions written to " << (dir / "interactions.csv").string()
            << " and " << (dir / "drivers.csv").string() << '\n';
  return 0;
}

// Values separated by '|' expand into a cartesian product of runs.
std::vector<KeyValues> expand_grid(const KeyValues& kv) {
  std::vector<KeyValues> runs{{}};
  for (const auto& [k, v] : kv) {
    std::vector<std::string> options;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, '|')) {
      const auto b = item.find_first_not_of(" \t");
      const auto e = item.find_last_not_of(" \t");
      options.push_back(b == std::string::npos ? std::string() : item.substr(b, e - b + 1));
    }
    if (options.empty()) options.push_back("");
    std::vector<KeyValues> next;
    for (const auto& r : runs)
      for (const auto& o : options) {
        auto n = r;
        n.emplace_back(k, o);
        next.push_back(std::move(n));
      }
    runs = std::move(next);
  }
  return runs;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

int cmd_sweep(const CommonArgs& args, const std::string& self, bool dry_run) {
  KeyValues kv = args.config.empty() ? KeyValues{} : read_key_values(args.config);
  for (const auto& s : args.sets) {
    auto o = parse_override(s);
    std::erase_if(kv, [&](const auto& p) { return p.first == o.first; });
    kv.push_back(o);
  }
  const auto runs = expand_grid(kv);
  RunConfig base;
  apply_key_values(base, expand_grid(kv).front());
  base.validate();
  const fs::path root = resolve_output_dir(base);
  fs::create_directories(root);
  std::ofstream manifest(root / "sweep.tsv");
  manifest << "run\tstatus\tconfig\n";
  int failures = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    RunConfig cfg;
    apply_key_values(cfg, runs[i]);
    cfg.output_dir = (fs::path(base.output_dir) / ("run_" + std::to_string(i))).string();
    cfg.validate();
    const fs::path run_dir = resolve_output_dir(cfg);
    fs::create_directories(run_dir);
    const fs::path conf = fs::absolute(run_dir / "run.conf");
    std::ofstream(conf) << to_text(cfg);
    int status = 0;
    if (!dry_run) {
      const std::string cmd = shell_quote(self) + " train --config " + shell_quote(conf.string());
      std::cout << "[" << i + 1 << "/" << runs.size() << "] " << cmd << '\n' << std::flush;
      status = std::system(cmd.c_str());
      if (status != 0) ++failures;
    }
    manifest << "run_" << i << '\t' << (dry_run ? "planned" : std::to_string(status)) << '\t' << conf.string()
             << '\n';
  }
  std::cout << runs.size() << " runs" << (dry_run ? " planned" : "") << ", manifest " << (root / "sweep.tsv").string()
            << '\n';
  return failures == 0 ? 0 : kExitData;
}

int cmd_grad_check(const CommonArgs& args, std::size_t seeds, std::size_t entries) {
  auto cfg = args.load();
  // A miniature problem keeps finite differences cheap.
  cfg.data_source = "synthetic";
  cfg.synth.n_users = 4;
  cfg.synth.n_items = 40;
  cfg.synth.n_topics = 4;
  cfg.synth.topics_per_user = 2;
  cfg.synth.min_len = 10;
  cfg.synth.max_len = 12;
  cfg.model.max_seq_len = 8;
  cfg.model.dim = 4;
  cfg.model.mlp_hidden = {6, 5};
  cfg.train_negatives = 2;
  cfg.eval_negatives = 2;
  double worst = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    cfg.seed = s;
    const auto data = prepare_data(cfg);
    auto m = make_model(cfg, data);
    jitter_biases(m->params(), s);
    auto examples = training_examples(cfg, data, 0);
    examples.resize(std::min<std::size_t>(2, examples.size()));
    GradCheckOptions go;
    go.max_entries = entries;
    go.seed = s;
    const auto r = grad_check(
        m->params(), [&](ad::Graph& g) { return m->joint_loss(g, examples, nn::Mode::kEval).total; }, go);
    std::cout << "seed " << s << ": max relative error " << std::setprecision(3) << r.max_rel_error << " ("
              << r.worst_param << "[" << r.worst_index << "], " << r.checked << " entries)\n";
    worst = std::max(worst, r.max_rel_error);
  }
  const bool ok = worst < 1e-4;
  std::cout << (ok ? "PASS" : "FAIL") << " max relative error " << worst << '\n';
  return ok ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive long/short-term interest recommender"};
  app.require_subcommand(1);

  CommonArgs common;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes logs and checkpoints to output_dir");
  add_common(train_cmd, common);
  train_cmd->add_flag("--resume", resume, "continue from output_dir/last.ckpt");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate one cell and write report files");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint (default output_dir/best.ckpt)");
  eval_cmd->add_option("--protocol", ev.protocol, "none, shuffle or truncate")->capture_default_str();
  eval_cmd->add_option("--side", ev.side, "long, short or both")->capture_default_str();
  eval_cmd->add_option("--split", ev.split, "test or val")->capture_default_str();
  eval_cmd->add_option("--k", ev.k, "history kept by the truncate protocol");
  eval_cmd->add_option("--seed", ev.seed, "shuffle protocol seed")->capture_default_str();
  eval_cmd->add_option("--alpha", ev.alpha, "fixed fusion weight in [0, 1]");
  eval_cmd->add_option("--out", ev.out, "report directory (default output_dir/eval)");

  SuiteArgs su;
  auto* suite_cmd = app.add_subcommand("suite", "run the full analysis suite on the test split");
  add_common(suite_cmd, common);
  suite_cmd->add_option("--checkpoint", su.checkpoint, "checkpoint (default output_dir/best.ckpt)");
  suite_cmd->add_option("--out", su.out, "bundle directory (default output_dir/suite)");
  suite_cmd->add_option("--seed", su.seed, "shuffle protocol seed")->capture_default_str();
  suite_cmd->add_option("--ks", su.ks, "truncation lengths")->delimiter(',')->capture_default_str();
  suite_cmd->add_option("--alphas", su.alphas, "fixed fusion weights")->delimiter(',')->capture_default_str();

  SynthArgs sy;
  auto* synth_cmd = app.add_subcommand("synthesize", "write a synthetic dataset (synth.* keys, seed)");
  add_common(synth_cmd, common);
  synth_cmd->add_option("--out", sy.out, "directory (default output_dir)");

  bool dry_run = false;
  auto* sweep_cmd = app.add_subcommand("sweep", "expand 'a | b' config values into a grid of train runs");
  add_common(sweep_cmd, common);
  sweep_cmd->add_flag("--dry-run", dry_run, "write run configs without training");

  std::size_t gc_seeds = 10;
  std::size_t gc_entries = 0;
  auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference check of the joint loss on a tiny model");
  add_common(gc_cmd, common);
  gc_cmd->add_option("--seeds", gc_seeds, "number of seeds")->capture_default_str();
  gc_cmd->add_option("--entries", gc_entries, "entries per parameter, 0 = all")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(common, resume);
    if (*eval_cmd) return cmd_evaluate(common, ev);
    if (*suite_cmd) return cmd_suite(common, su);
    if (*synth_cmd) return cmd_synthesize(common, sy);
    if (*sweep_cmd) {
      std::error_code ec;
      auto self = fs::read_symlink("/proc/self/exe", ec);
      if (ec) self = fs::absolute(argv[0]);
      return cmd_sweep(common, self.string(), dry_run);
    }
    if (*gc_cmd) return cmd_grad_check(common, gc_seeds, gc_entries);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
