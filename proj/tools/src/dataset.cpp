#include "tapcli/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "tap/errors.hpp"
#include "tap/synth.hpp"
#include "tap/tensor_io.hpp"

namespace tapcli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fold_dir(const fs::path& root, int fold) { return root / ("fold" + std::to_string(fold)); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw tap::DataError("cannot write " + path.string());
  out << text;
  if (!out) throw tap::DataError("failed writing " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw tap::DataError("cannot read " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

json parse_json_line(const std::string& line, const fs::path& path) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw tap::DataError("malformed record in " + path.string() + ": " + e.what());
  }
}

}  // namespace

std::map<ShotSetting, EpisodeQuota> episode_quotas(const RunConfig& cfg) {
  std::map<ShotSetting, EpisodeQuota> q;
  auto need = [&](ShotSetting s, std::size_t runs, std::size_t episodes) {
    auto& e = q[s];
    e.runs = std::max(e.runs, runs);
    e.episodes = std::max(e.episodes, episodes);
  };
  for (auto s : cfg.eval_settings()) need(s, cfg.runs, cfg.episodes_per_fold);
  need({cfg.sweep_n_way, cfg.sweep_k_shot}, 1, cfg.sweep_episodes);
  need({cfg.oneshot_n_way, 1}, 1, cfg.oneshot_episodes);
  need({cfg.oneshot_n_way, 2}, 1, cfg.oneshot_episodes);
  return q;
}

std::uint64_t episode_seed(const RunConfig& cfg, int fold, ShotSetting shot, std::size_t run, std::size_t index) {
  const std::uint64_t setting = (shot.n_way << 16) | shot.k_shot;
  const std::uint64_t where = (static_cast<std::uint64_t>(fold) << 56) ^ (setting << 32) ^
                              (static_cast<std::uint64_t>(run) << 24) ^ index;
  return tap::derive_seed(cfg.seed, 0x6570ULL, where);
}

std::string episode_file_name(ShotSetting shot) {
  return "episodes_" + std::to_string(shot.n_way) + "w" + std::to_string(shot.k_shot) + "s.jsonl";
}

std::string class_table() {
  std::ostringstream out;
  out << "class  shape     fold  noise\n";
  for (const auto& c : tap::synth::classes()) {
    out << std::setw(5) << c.class_id << "  " << std::left << std::setw(9) << tap::synth::to_string(c.shape)
        << std::right << std::setw(5) << tap::synth::fold_of(c.class_id) << "  " << std::fixed << std::setprecision(2)
        << c.noise << "\n";
  }
  return out.str();
}

GenSummary generate_dataset(const RunConfig& cfg, bool force) {
  cfg.validate();
  const fs::path root = cfg.data_dir();
  std::error_code ec;
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) throw tap::DataError("dataset directory " + root.string() + " is not empty (use --force)");
    fs::remove_all(root, ec);
    if (ec) throw tap::DataError("cannot clear " + root.string() + ": " + ec.message());
  }
  fs::create_directories(root, ec);
  if (ec) throw tap::DataError("cannot create " + root.string() + ": " + ec.message());

  GenSummary summary;
  const auto quotas = episode_quotas(cfg);
  for (int fold : cfg.folds) {
    const auto split = tap::synth::FoldSplit::make(fold);
    const fs::path dir = fold_dir(root, fold);
    fs::create_directories(dir / "samples");
    std::string samples_jsonl;
    std::size_t sample_count = 0, episode_count = 0;

    auto store = [&](const tap::synth::Scene& scene, const std::string& id) {
      const std::string image = "samples/" + id + ".image.tapt", mask = "samples/" + id + ".mask.tapt";
      tap::save_tapt(dir / image, scene.image);
      tap::save_tapt(dir / mask, scene.mask);
      json rec = {{"id", id}, {"image", image}, {"mask", mask}, {"class_ids", scene.class_ids}, {"seed", scene.seed}};
      samples_jsonl += rec.dump() + "\n";
      ++sample_count;
    };

    for (const auto& [shot, quota] : quotas) {
      std::string episodes_jsonl;
      const auto spec = cfg.episode_spec(shot);
      for (std::size_t run = 0; run < quota.runs; ++run) {
        for (std::size_t idx = 0; idx < quota.episodes; ++idx) {
          const auto seed = episode_seed(cfg, fold, shot, run, idx);
          const auto plan = tap::plan_eval_episode(split, spec, seed);
          const std::string eid = "f" + std::to_string(fold) + "-" + std::to_string(shot.n_way) + "w" +
                                  std::to_string(shot.k_shot) + "s-r" + std::to_string(run) + "-e" +
                                  std::to_string(idx);
          std::vector<std::string> support_ids;
          std::vector<tap::synth::Scene> support;
          for (std::size_t j = 0; j < plan.support.size(); ++j) {
            support.push_back(tap::render(plan.support[j], cfg.image_size));
            support_ids.push_back(eid + "-s" + std::to_string(j));
          }
          const auto query = tap::render(plan.query, cfg.image_size);
          // Validates that every class is labelled in the support set.
          (void)tap::assemble(plan, support, query, eid);
          for (std::size_t j = 0; j < support.size(); ++j) store(support[j], support_ids[j]);
          store(query, eid + "-q");
          json rec = {{"id", eid},
                      {"fold", fold},
                      {"n_way", shot.n_way},
                      {"k_shot", shot.k_shot},
                      {"run", run},
                      {"index", idx},
                      {"seed", seed},
                      {"classes", plan.classes},
                      {"support", support_ids},
                      {"query", eid + "-q"}};
          episodes_jsonl += rec.dump() + "\n";
          ++episode_count;
        }
      }
      write_text(dir / episode_file_name(shot), episodes_jsonl);
    }
    write_text(dir / "samples.jsonl", samples_jsonl);
    summary.samples_per_fold[fold] = sample_count;
    summary.episodes_per_fold[fold] = episode_count;
  }

  json settings = json::array();
  for (const auto& [shot, quota] : quotas) {
    settings.push_back({{"n_way", shot.n_way}, {"k_shot", shot.k_shot}, {"runs", quota.runs},
                        {"episodes", quota.episodes}, {"file", episode_file_name(shot)}});
  }
  json classes = json::array();
  for (const auto& c : tap::synth::classes()) {
    classes.push_back({{"class_id", c.class_id},
                       {"shape", tap::synth::to_string(c.shape)},
                       {"fold", tap::synth::fold_of(c.class_id)},
                       {"noise", c.noise}});
  }
  json meta = {{"format", "tap-dataset-v1"},
               {"image_size", cfg.image_size},
               {"folds", cfg.folds},
               {"classes", classes},
               {"settings", settings},
               {"config", cfg.to_text()}};
  write_text(root / "dataset.json", meta.dump(2) + "\n");

  std::ostringstream table;
  table << class_table() << "\nfold  novel        samples  episodes\n";
  for (int fold : cfg.folds) {
    const auto split = tap::synth::FoldSplit::make(fold);
    std::string novel;
    for (int c : split.novel) novel += (novel.empty() ? "" : ",") + std::to_string(c);
    table << std::setw(4) << fold << "  " << std::left << std::setw(11) << novel << std::right << std::setw(9)
          << summary.samples_per_fold[fold] << std::setw(10) << summary.episodes_per_fold[fold] << "\n";
  }
  summary.table = table.str();
  return summary;
}

Dataset Dataset::open(const fs::path& data_dir) {
  const fs::path meta_path = data_dir / "dataset.json";
  std::ifstream in(meta_path, std::ios::binary);
  if (!in) throw tap::DataError("no dataset at " + data_dir.string() + " (run gen-data first)");
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw tap::DataError("malformed " + meta_path.string() + ": " + e.what());
  }
  if (meta.value("format", "") != "tap-dataset-v1") throw tap::DataError("unsupported dataset format");
  Dataset ds;
  ds.root_ = data_dir;
  ds.folds_ = meta.at("folds").get<std::vector<int>>();
  return ds;
}

std::vector<EpisodeRecord> Dataset::episodes(int fold, ShotSetting shot) const {
  if (std::find(folds_.begin(), folds_.end(), fold) == folds_.end()) {
    throw tap::DataError("dataset has no fold " + std::to_string(fold));
  }
  const fs::path path = fold_dir(root_, fold) / episode_file_name(shot);
  if (!fs::exists(path)) {
    throw tap::DataError("dataset has no " + std::to_string(shot.n_way) + "-way " + std::to_string(shot.k_shot) +
                         "-shot episodes for fold " + std::to_string(fold) + " (re-run gen-data)");
  }
  std::vector<EpisodeRecord> out;
  for (const auto& line : read_lines(path)) {
    const json j = parse_json_line(line, path);
    EpisodeRecord r;
    r.id = j.at("id").get<std::string>();
    r.fold = j.at("fold").get<int>();
    r.shot = {j.at("n_way").get<std::size_t>(), j.at("k_shot").get<std::size_t>()};
    r.run = j.at("run").get<std::size_t>();
    r.index = j.at("index").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.classes = j.at("classes").get<std::vector<int>>();
    r.support = j.at("support").get<std::vector<std::string>>();
    r.query = j.at("query").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

tap::Episode Dataset::load(const EpisodeRecord& rec) const {
  const fs::path dir = fold_dir(root_, rec.fold) / "samples";
  auto pair = [&](const std::string& id) {
    const auto image = tap::load_tapt(dir / (id + ".image.tapt"));
    const auto mask = tap::load_tapt(dir / (id + ".mask.tapt"));
    return tap::LabeledImage{image, tap::to_episode_labels(mask, rec.classes)};
  };
  tap::Episode ep;
  ep.id = rec.id;
  ep.classes = rec.classes;
  ep.seed = rec.seed;
  for (const auto& s : rec.support) ep.support.push_back(pair(s));
  ep.query = pair(rec.query);
  return ep;
}

}  // namespace tapcli
