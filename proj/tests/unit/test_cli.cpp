#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "tap/errors.hpp"
#include "tapcli/commands.hpp"

namespace fs = std::filesystem;
using namespace tapcli;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tap_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

RunConfig tiny(const fs::path& out) {
  return parse_config(
      "out = " + out.string() +
      "\n"
      "data.folds = 0\n"
      "data.episodes_per_fold = 2\n"
      "data.runs = 1\n"
      "meta.steps = 10\n"
      "eval.iterations = 1\n"
      "eval.threads = 1\n"
      "sweep.ranks = 2,64\n"
      "sweep.iterations = 1\n"
      "sweep.episodes = 1\n"
      "oneshot.iterations = 1\n"
      "oneshot.episodes = 1\n");
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TAP_BINARY) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = parse_config(
      "# comment\n"
      "seed = 7\n"
      "  eval.tap.rank=8  # trailing\n"
      "data.folds = 1, 3\n"
      "eval.methods = tap\n");
  CHECK(cfg.seed == 7);
  CHECK(cfg.tap_rank == 8);
  CHECK(cfg.folds == std::vector<int>{1, 3});
  CHECK(cfg.methods == std::vector<tap::Method>{tap::Method::kTap});

  const auto back = parse_config(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
  CHECK(RunConfig{}.resolved().size() == key_reference().size());

  CHECK_THROWS_AS(parse_config("eval.tap.rnak = 4\n"), tap::ConfigError);
  CHECK_THROWS_AS(parse_config("eval.tap.rank = four\n"), tap::ConfigError);
  CHECK_THROWS_AS(parse_config("eval.tap.rank = 0\n"), tap::ConfigError);
  CHECK_THROWS_AS(parse_config("data.folds = 4\n"), tap::ConfigError);
  CHECK_THROWS_AS(parse_config("eval.methods = magic\n"), tap::ConfigError);
  CHECK_THROWS_AS(parse_config("seed 3\n"), tap::ConfigError);
  try {
    parse_config("model.colour = red\n");
  } catch (const tap::ConfigError& e) {
    CHECK(std::string(e.what()).find("model.colour") != std::string::npos);
  }
}

TEST_CASE("derived seeds and settings") {
  RunConfig cfg;
  CHECK(cfg.model_config(0).seed != cfg.model_config(1).seed);
  CHECK(cfg.adapt_config(tap::Method::kDecoderFt).adam.learning_rate == cfg.decoder_ft_lr);
  const auto shots = cfg.shot_settings();
  CHECK(std::find(shots.begin(), shots.end(), ShotSetting{2, 5}) != shots.end());
  CHECK(std::find(shots.begin(), shots.end(), ShotSetting{1, 1}) != shots.end());
  CHECK(std::find(shots.begin(), shots.end(), ShotSetting{1, 2}) != shots.end());
  CHECK(episode_seed(cfg, 0, {2, 5}, 0, 0) != episode_seed(cfg, 0, {2, 5}, 0, 1));
  CHECK(episode_seed(cfg, 0, {2, 5}, 0, 0) != episode_seed(cfg, 1, {2, 5}, 0, 0));
}

TEST_CASE("rank warning") {
  RunConfig cfg;
  CHECK(cfg.warnings().empty());
  cfg.tap_rank = 17;
  REQUIRE(cfg.warnings().size() == 1);
  CHECK(cfg.warnings()[0].find("min(m, n) = 32") != std::string::npos);
}

TEST_CASE("running median") {
  const auto m = running_median({5, 1, 4, 2, 3}, 3);
  REQUIRE(m.size() == 3);
  CHECK(m[0] == 4);
  CHECK(m[1] == 2);
  CHECK(m[2] == 3);
  CHECK(running_median({1, 2}, 3).empty());
  CHECK(running_median({1, 4, 2, 8}, 2) == std::vector<double>{2.5, 3, 5});
}

TEST_CASE("train stream audit") {
  std::vector<TrainStreamRecord> stream = {{0, 1, {2, 3}, {2, 3}}, {1, 2, {6}, {6, 7}}};
  const auto split = tap::synth::FoldSplit::make(0);
  CHECK(audit_train_stream(stream, 0).empty() ==
        std::none_of(split.novel.begin(), split.novel.end(), [](int c) { return c == 2 || c == 3 || c == 6 || c == 7; }));
  stream.push_back({2, 3, {split.base[0]}, {split.base[0], split.novel[0]}});
  const auto bad = audit_train_stream(stream, 0);
  CHECK(std::find(bad.begin(), bad.end(), split.novel[0]) != bad.end());
}

TEST_CASE("report aggregation") {
  std::vector<EpisodeScore> scores;
  for (int fold : {0, 1}) {
    for (std::size_t run = 0; run < 2; ++run) {
      for (std::size_t i = 0; i < 2; ++i) {
        const double v = 0.1 * fold + 0.01 * static_cast<double>(run) + 0.001 * static_cast<double>(i);
        scores.push_back({fold, {2, 5}, run, i, tap::Method::kVanilla, v, 0.5, 1.0});
        scores.push_back({fold, {2, 5}, run, i, tap::Method::kTap, v + 0.05, 0.6, 2.0});
      }
    }
  }
  const std::vector<MethodInfo> methods = {{tap::Method::kVanilla, 0, 0, 0, 0.0},
                                           {tap::Method::kTap, 16, 8, 4096, 57.6}};
  const auto rows = aggregate_report(scores, methods);
  REQUIRE(rows.size() == 6);
  for (std::size_t i = 0; i < rows.size(); i += 2) {
    CHECK(rows[i].method == "vanilla");
    CHECK(rows[i].delta == 0.0);
    CHECK(std::abs(rows[i + 1].miou - (rows[i].miou + rows[i + 1].delta)) < 1e-12);
    CHECK(std::abs(rows[i + 1].delta - 0.05) < 1e-12);
  }
  CHECK(rows[0].fold == "0");
  CHECK(rows[4].fold == "all");
  CHECK(std::abs(rows[0].miou - 0.0055) < 1e-12);
  CHECK(std::abs(rows[0].miou_std - 0.01 / std::sqrt(2.0)) < 1e-12);
  CHECK(std::abs(rows[4].miou - 0.0555) < 1e-12);

  const auto csv = lines(report_csv(rows));
  REQUIRE(csv.size() == rows.size() + 1);
  const std::string header =
      "method,fold,n_way,k_shot,rank,iterations,miou,miou_std,delta,background_iou,trainable_params,"
      "trainable_pct,ms_per_episode,episodes,runs";
  CHECK(csv[0] == header);
  for (std::size_t i = 1; i < csv.size(); ++i) CHECK(split_csv(csv[i]).size() == report_columns().size());
  const auto j = nlohmann::json::parse(report_json(rows, RunConfig{}));
  CHECK(j["rows"].size() == rows.size());
}

TEST_CASE("gen-data is deterministic and respects the fold filter") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  auto ca = tiny(a), cb = tiny(b);
  ca.folds = cb.folds = {1, 3};
  generate_dataset(ca, false);
  generate_dataset(cb, false);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a / "data")) {
    if (!e.is_regular_file() || e.path().filename() == "dataset.json") continue;
    const auto rel = fs::relative(e.path(), a);
    CHECK(slurp(e.path()) == slurp(b / rel));
    ++compared;
  }
  CHECK(compared > 10);
  const auto ds = Dataset::open(ca.data_dir());
  CHECK(ds.folds() == std::vector<int>{1, 3});
  CHECK_FALSE(fs::exists(a / "data" / "fold0"));
  const auto recs = ds.episodes(3, {2, 5});
  CHECK(recs.size() == 2);
  const auto ep = ds.load(recs[0]);
  CHECK(ep.support.size() == 10);
  const auto split = tap::synth::FoldSplit::make(3);
  for (int c : ep.classes) CHECK(std::find(split.novel.begin(), split.novel.end(), c) != split.novel.end());

  CHECK_THROWS_AS(generate_dataset(ca, false), tap::DataError);
  CHECK_NOTHROW(generate_dataset(ca, true));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("end to end on a tiny configuration") {
  const auto dir = scratch("e2e");
  const auto cfg = tiny(dir);
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_meta_train(cfg, log), tap::DataError);
  cmd_gen_data(cfg, false, log);
  CHECK_THROWS_AS(load_checkpoint(cfg, 0), tap::DataError);
  const auto trained = cmd_meta_train(cfg, log);
  CHECK(trained.losses.at(0).size() == 10);
  CHECK(trained.audit_violations.at(0).empty());
  CHECK(fs::exists(dir / "checkpoints" / "fold0" / "loss.csv"));

  auto other = cfg;
  other.variant = tap::EncoderVariant::kAttention;
  CHECK_THROWS_AS(load_checkpoint(other, 0), tap::ConfigError);

  const auto eval = cmd_eval(cfg, log);
  CHECK(eval.rows.size() == 6);  // 3 methods x (fold 0, all)
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "report.json"));
  CHECK(lines(slurp(dir / "trace.jsonl")).size() == eval.scores.size());

  const auto sweep = cmd_sweep(cfg, log);
  CHECK(sweep.rows.size() == 2 * 2);
  CHECK(sweep.rows[0].status == "ok");
  CHECK(sweep.rows.back().status.rfind("skipped", 0) == 0);
  CHECK_FALSE(sweep.rows.back().miou.has_value());
  const auto sweep_lines = lines(slurp(dir / "sweep.csv"));
  CHECK(sweep_lines.size() == 5);
  CHECK(sweep_lines[0] == "rank,iteration,miou,trainable_params,trainable_pct,status");

  const auto oneshot = cmd_oneshot_study(cfg, log);
  bool k1_start = false;
  for (const auto& r : oneshot.rows) {
    if (r.k_shot == 1 && r.iteration == 0) {
      k1_start = true;
      CHECK(r.replicated);
      CHECK(r.miou == r.vanilla_miou);
    }
  }
  CHECK(k1_start);
  CHECK(fs::exists(dir / "oneshot.svg"));
  fs::remove_all(dir);
}

TEST_CASE("exit codes") {
  const auto dir = scratch("exit");
  fs::create_directories(dir);
  const auto bad = dir / "bad.cfg";
  std::ofstream(bad) << "no.such.key = 1\n";
  CHECK(run_cli("keys") == 0);
  CHECK(run_cli("eval --config " + bad.string()) == 2);
  CHECK(run_cli("eval --out " + (dir / "empty").string()) == 3);
  CHECK(run_cli("frobnicate") != 0);
  fs::remove_all(dir);
}

TEST_CASE("meta-train loss curve on the reference seed") {
  const auto dir = scratch("curve");
  auto cfg = tiny(dir);
  cfg.meta_steps = RunConfig{}.meta_steps;
  std::ostringstream log;
  cmd_gen_data(cfg, false, log);
  const auto losses = cmd_meta_train(cfg, log).losses.at(0);
  const auto median = running_median(losses, 100);
  REQUIRE(median.size() == losses.size() - 99);
  // regression baseline: seed 0, fold 0, default model and meta settings
  CHECK(std::abs(median.front() - 0.5955) < 1e-3);
  CHECK(std::abs(median.back() - 0.1300) < 1e-3);
  // episodes are resampled every step, so the median still wobbles slightly
  double worst_rise = 0.0;
  for (std::size_t i = 1; i < median.size(); ++i) worst_rise = std::max(worst_rise, median[i] - median[i - 1]);
  MESSAGE("largest running-median rise " << worst_rise);
  CHECK(worst_rise < 0.02);
  CHECK(median.back() < 0.35 * median.front());
  fs::remove_all(dir);
}
