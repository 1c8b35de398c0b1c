#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "clsr/checkpoint.hpp"
#include "clsr/config.hpp"
#include "clsr/errors.hpp"
#include "clsr/trainer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace clsr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "clsr_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::size_t data_lines(const fs::path& p) {
  std::size_t n = 0;
  for (const auto& l : lines_of(p))
    if (!l.empty() && l[0] != '#') ++n;
  return n;
}

// Small, fast run used by the trainer and CLI tests.
const char* kTinyConfig =
    "dim = 4\n"
    "mlp_hidden = 6,5\n"
    "batch_size = 32\n"
    "epochs = 2\n"
    "lr = 0.01\n"
    "eval_negatives = 19\n"
    "synth.n_users = 30\n"
    "synth.n_items = 150\n"
    "synth.n_topics = 6\n"
    "synth.min_len = 12\n"
    "synth.max_len = 20\n";

RunConfig tiny_config(const fs::path& out) {
  RunConfig cfg;
  apply_key_values(cfg, parse_key_values(kTinyConfig));
  cfg.output_dir = out.string();
  cfg.validate();
  return cfg;
}

fs::path write_tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.conf";
  std::ofstream(p) << kTinyConfig << "output_dir = " << (dir / "run").string() << "\n";
  return p;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CLSR_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config text round trip") {
  RunConfig cfg;
  cfg.model.dim = 12;
  cfg.model.contrastive = model::ContrastiveKind::kBpr;
  cfg.behaviors = {"click", "buy"};
  cfg.synth.drift = 0.25;
  RunConfig back;
  apply_key_values(back, parse_key_values(to_text(cfg)));
  CHECK(to_text(back) == to_text(cfg));
  CHECK(back.model.dim == 12);
  CHECK(back.behaviors == std::vector<std::string>{"click", "buy"});
}

TEST_CASE("config errors") {
  RunConfig cfg;
  CHECK_THROWS_AS(apply_key_values(cfg, parse_key_values("no_such_key = 1\n")), ConfigError);
  CHECK_THROWS_AS(apply_key_values(cfg, parse_key_values("dim = forty\n")), ConfigError);
  CHECK_THROWS_AS(parse_key_values("dim = 4\ndim = 5\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("just text\n"), ConfigError);
  CHECK_THROWS_AS(parse_override("dim"), ConfigError);
  CHECK(parse_override("beta=0.5") == std::pair<std::string, std::string>{"beta", "0.5"});
  const auto kv = parse_key_values("# comment\n\n  lr = 0.5  \n");
  REQUIRE(kv.size() == 1);
  CHECK(kv[0].second == "0.5");
  cfg.val_start = cfg.test_start;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("checkpoint round trip and rejection") {
  const auto dir = scratch("ckpt");
  model::ClsrConfig mc;
  mc.dim = 4;
  mc.mlp_hidden = {6};
  model::ClsrModel a(mc, 5, 20, 1);
  AdamState adam = AdamState::for_params(a.params());
  adam.step = 7;
  adam.m[0].fill(0.25);
  TrainingState st;
  st.epoch = 3;
  st.step = 40;
  st.best_gauc = 0.75;
  st.rng_state = "1 2 3";
  const std::vector<std::string> users{"u0", "u1", "u2", "u3", "u4"};
  std::vector<std::string> items;
  for (int i = 0; i < 20; ++i) items.push_back("i" + std::to_string(i));
  save_checkpoint(dir / "a.ckpt", a, adam, st, users, items, "lr = 1\n");

  model::ClsrModel b(mc, 5, 20, 2);
  const auto c = load_checkpoint(dir / "a.ckpt", b);
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value.raw() == b.params()[i].value.raw());
  CHECK(c.adam.step == 7);
  CHECK(c.adam.m[0].raw() == adam.m[0].raw());
  CHECK(c.training.epoch == 3);
  CHECK(c.training.best_gauc == 0.75);
  CHECK(c.training.rng_state == "1 2 3");
  CHECK(c.user_ids == users);
  CHECK(c.item_ids == items);
  CHECK(c.run_config == "lr = 1\n");

  SUBCASE("different model config") {
    auto other = mc;
    other.dim = 6;
    model::ClsrModel d(other, 5, 20, 3);
    CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", d), ConfigError);
    auto cell = mc;
    cell.rnn_cell = nn::CellKind::kGru;
    model::ClsrModel e(cell, 5, 20, 3);
    const auto before = e.params()[0].value.raw();
    CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", e), ConfigError);
    CHECK(e.params()[0].value.raw() == before);
  }

  SUBCASE("corrupt files") {
    std::string bytes = slurp(dir / "a.ckpt");
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << "NOTACKPT" << bytes.substr(8);
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt", b), DataError);
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt", b), DataError);
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt", b), DataError);
  }
}

TEST_CASE("training") {
  const auto dir = scratch("train");

  SUBCASE("zero epochs writes the initial parameters") {
    auto cfg = tiny_config(dir / "zero");
    cfg.epochs = 0;
    const auto data = prepare_data(cfg);
    auto m = make_model(cfg, data);
    TrainOptions opts;
    opts.out_dir = cfg.output_dir;
    const auto r = train(cfg, data, *m, opts);
    CHECK(r.steps.empty());
    auto fresh = make_model(cfg, data);
    load_checkpoint(opts.out_dir / "best.ckpt", *fresh);
    for (std::size_t i = 0; i < m->params().size(); ++i)
      CHECK(fresh->params()[i].value.raw() == m->params()[i].value.raw());
    const auto steps = lines_of(opts.out_dir / "steps.csv");
    REQUIRE(!steps.empty());
    CHECK(steps.back() == "step,epoch,l_rec,l_con,loss");
    CHECK(fs::exists(opts.out_dir / "last.ckpt"));
  }

  SUBCASE("same seed, same trajectory; resume continues it exactly") {
    auto cfg = tiny_config(dir / "a");
    const auto data = prepare_data(cfg);
    auto m1 = make_model(cfg, data);
    TrainOptions o1;
    o1.out_dir = cfg.output_dir;
    const auto r1 = train(cfg, data, *m1, o1);
    REQUIRE(r1.steps.size() > 4);

    auto m2 = make_model(cfg, data);
    const auto r2 = train(cfg, data, *m2, {});
    REQUIRE(r2.steps.size() == r1.steps.size());
    for (std::size_t i = 0; i < r1.steps.size(); ++i) CHECK(r1.steps[i].loss == r2.steps[i].loss);

    // One epoch, then resume to two.
    auto half = tiny_config(dir / "b");
    half.epochs = 1;
    auto m3 = make_model(half, data);
    TrainOptions o3;
    o3.out_dir = half.output_dir;
    train(half, data, *m3, o3);
    half.epochs = 2;
    auto m4 = make_model(half, data);
    o3.resume = true;
    const auto r4 = train(half, data, *m4, o3);
    REQUIRE(r4.steps.size() == r1.epochs[1].steps);
    for (std::size_t i = 0; i < r4.steps.size(); ++i)
      CHECK(r4.steps[i].loss == r1.steps[r1.steps.size() - r4.steps.size() + i].loss);
    for (std::size_t i = 0; i < m1->params().size(); ++i)
      CHECK(m1->params()[i].value.raw() == m4->params()[i].value.raw());
    // Preambles differ (output_dir, epochs); the logged rows must not.
    auto rows = [](const fs::path& p) {
      std::vector<std::string> out;
      for (const auto& l : lines_of(p))
        if (l.empty() || l[0] != '#') out.push_back(l);
      return out;
    };
    CHECK(rows(dir / "a" / "steps.csv") == rows(dir / "b" / "steps.csv"));
  }

  SUBCASE("step limit") {
    auto cfg = tiny_config(dir / "limit");
    cfg.max_steps = 3;
    const auto data = prepare_data(cfg);
    auto m = make_model(cfg, data);
    CHECK(train(cfg, data, *m, {}).steps.size() == 3);
  }
}

TEST_CASE("command line") {
  const auto dir = scratch("cli");
  const auto conf = write_tiny_config(dir);
  const std::string c = "-c '" + conf.string() + "'";

  SUBCASE("synthesize") {
    REQUIRE(run_cli("synthesize " + c + " --out '" + (dir / "s1").string() + "'", dir / "log") == 0);
    REQUIRE(run_cli("synthesize " + c + " --set seed=43 --out '" + (dir / "s2").string() + "'", dir / "log") == 0);
    REQUIRE(run_cli("synthesize " + c + " --set synth.w_long=1 --out '" + (dir / "s3").string() + "'", dir / "log") == 0);
    const auto rows = data_lines(dir / "s1" / "interactions.csv") - 1;
    CHECK(rows >= 30 * 12);
    CHECK(rows <= 30 * 20);
    CHECK(data_lines(dir / "s1" / "drivers.csv") - 1 == rows);
    CHECK(lines_of(dir / "s1" / "interactions.csv")[0] == lines_of(dir / "s2" / "interactions.csv")[0]);
    CHECK(slurp(dir / "s1" / "interactions.csv") != slurp(dir / "s2" / "interactions.csv"));
    std::set<std::string> labels;
    for (const auto& l : lines_of(dir / "s3" / "drivers.csv")) labels.insert(l.substr(l.rfind(',') + 1));
    CHECK(labels == std::set<std::string>{"driver", "LONG"});
  }

  SUBCASE("usage and configuration errors") {
    CHECK(run_cli("train " + c + " --set no_such_key=1", dir / "log") == 1);
    CHECK(run_cli("frobnicate", dir / "log") == 1);
    CHECK(run_cli("evaluate " + c + " --protocol sideways", dir / "log") != 0);
  }

  SUBCASE("train, evaluate, suite") {
    REQUIRE(run_cli("train " + c + " --set epochs=0", dir / "train.log") == 0);
    const auto run = dir / "run";
    CHECK(fs::exists(run / "best.ckpt"));

    const std::string ev = "evaluate " + c + " --protocol shuffle --seed 7 --out ";
    REQUIRE(run_cli(ev + "'" + (dir / "e1").string() + "'", dir / "log") == 0);
    REQUIRE(run_cli(ev + "'" + (dir / "e2").string() + "'", dir / "log") == 0);
    CHECK(slurp(dir / "e1" / "shuffle_s7_both.json") == slurp(dir / "e2" / "shuffle_s7_both.json"));
    const auto j = nlohmann::json::parse(slurp(dir / "e1" / "shuffle_s7_both.json"));
    CHECK(j["info"]["protocol"] == "shuffle");
    CHECK(j["config"]["dim"] == "4");

    REQUIRE(run_cli("evaluate " + c + " --side long --protocol truncate --k 5 --out '" + (dir / "e3").string() + "'",
                    dir / "log") == 0);
    CHECK(fs::exists(dir / "e3" / "truncate_k5_long.kv"));
    REQUIRE(run_cli("evaluate " + c + " --out '" + (dir / "e4").string() + "'", dir / "log") == 0);
    CHECK(fs::exists(dir / "e4" / "none_both.kv"));

    const std::string su = "suite " + c + " --ks 5,10 --out ";
    REQUIRE(run_cli(su + "'" + (dir / "b1").string() + "'", dir / "log") == 0);
    REQUIRE(run_cli(su + "'" + (dir / "b2").string() + "'", dir / "log") == 0);
    const auto manifest = lines_of(dir / "b1" / "manifest.txt");
    std::set<std::string> listed(manifest.begin(), manifest.end());
    std::set<std::string> present;
    for (const auto& e : fs::directory_iterator(dir / "b1"))
      if (e.path().filename() != "manifest.txt") present.insert(e.path().filename().string());
    CHECK(listed == present);
    CHECK(listed.contains("none_both_adaptive.json"));
    CHECK(listed.contains("disentanglement.kv"));
    for (const auto& f : listed) CHECK_MESSAGE(slurp(dir / "b1" / f) == slurp(dir / "b2" / f), f);

    const auto none = nlohmann::json::parse(slurp(dir / "b1" / "none_both.json"));
    const double auc = none["metrics"]["auc"].get<double>();
    CHECK(auc > 0.45);
    CHECK(auc < 0.55);
  }

  SUBCASE("sweep dry run") {
    const auto sweep_dir = dir / "sweep";
    REQUIRE(run_cli("sweep " + c + " --set 'beta=0|0.1' --set 'dim=4|8' --set output_dir=" + sweep_dir.string() +
                        " --dry-run",
                    dir / "log") == 0);
    CHECK(data_lines(sweep_dir / "sweep.tsv") == 5);
    CHECK(fs::exists(sweep_dir / "run_3" / "run.conf"));
    RunConfig last;
    apply_key_values(last, read_key_values(sweep_dir / "run_3" / "run.conf"));
    CHECK(last.model.beta == 0.1);
    CHECK(last.model.dim == 8);
  }

  SUBCASE("grad-check") { CHECK(run_cli("grad-check --seeds 2", dir / "log") == 0); }
}
