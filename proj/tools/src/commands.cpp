#include "tapcli/commands.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tap/errors.hpp"
#include "tap/refnet.hpp"
#include "tap/synth.hpp"
#include "tapcli/harness.hpp"

namespace tapcli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw tap::DataError("cannot write " + path.string());
  out << text;
  if (!out) throw tap::DataError("failed writing " + path.string());
}

template <class T>
double mean_of(const std::vector<T>& xs) {
  double s = 0.0;
  for (const auto& x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

std::vector<EpisodeRecord> select_records(const Dataset& ds, int fold, ShotSetting shot, std::size_t runs,
                                          std::size_t episodes) {
  std::vector<EpisodeRecord> out;
  for (auto& r : ds.episodes(fold, shot)) {
    if (r.run < runs && r.index < episodes) out.push_back(std::move(r));
  }
  if (out.size() != runs * episodes) {
    throw tap::DataError("fold " + std::to_string(fold) + " has " + std::to_string(out.size()) + " of the " +
                         std::to_string(runs * episodes) + " requested " + std::to_string(shot.n_way) + "-way " +
                         std::to_string(shot.k_shot) + "-shot episodes (re-run gen-data)");
  }
  return out;
}

json trace_json(const tap::AdaptTrace& t) {
  return {{"episode_id", t.episode_id},
          {"method", tap::to_string(t.method)},
          {"rank", t.rank},
          {"T", t.iterations},
          {"replicated", t.replicated},
          {"pass_loss", t.pass_loss},
          {"iteration_miou", t.iteration_miou},
          {"pass_ms", t.pass_ms}};
}

bool same_architecture(const tap::ModelConfig& a, const tap::ModelConfig& b) {
  return a.variant == b.variant && a.image_size == b.image_size && a.channels == b.channels &&
         a.feature_dim == b.feature_dim && a.blocks == b.blocks && a.feature_stride() == b.feature_stride();
}

std::map<int, tap::ModelState> load_models(const RunConfig& cfg) {
  std::map<int, tap::ModelState> models;
  for (int fold : cfg.folds) models.emplace(fold, load_checkpoint(cfg, fold));
  return models;
}

}  // namespace

RunConfig resolve_config(const GlobalOptions& opts) {
  RunConfig cfg = opts.config ? load_config(*opts.config) : RunConfig{};
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.set("out", *opts.out);
  cfg.validate();
  return cfg;
}

GenSummary cmd_gen_data(const RunConfig& cfg, bool force, std::ostream& log) {
  auto summary = generate_dataset(cfg, force);
  log << summary.table;
  log << "dataset written to " << cfg.data_dir().string() << "\n";
  return summary;
}

// ---- meta-train ----------------------------------------------------------

std::vector<int> audit_train_stream(const std::vector<TrainStreamRecord>& stream, int fold) {
  const auto split = tap::synth::FoldSplit::make(fold);
  std::set<int> bad;
  for (const auto& r : stream) {
    for (const auto* ids : {&r.classes, &r.scene_classes}) {
      for (int c : *ids) {
        if (std::find(split.novel.begin(), split.novel.end(), c) != split.novel.end()) bad.insert(c);
      }
    }
  }
  return {bad.begin(), bad.end()};
}

std::vector<double> running_median(const std::vector<double>& xs, std::size_t width) {
  std::vector<double> out;
  if (width == 0 || xs.size() < width) return out;
  std::vector<double> window;
  for (std::size_t i = width - 1; i < xs.size(); ++i) {
    window.assign(xs.begin() + static_cast<std::ptrdiff_t>(i + 1 - width), xs.begin() + static_cast<std::ptrdiff_t>(i + 1));
    std::sort(window.begin(), window.end());
    out.push_back(width % 2 ? window[width / 2] : 0.5 * (window[width / 2 - 1] + window[width / 2]));
  }
  return out;
}

tap::ModelState load_checkpoint(const RunConfig& cfg, int fold) {
  const fs::path dir = cfg.checkpoint_dir(fold);
  if (!fs::exists(dir / "manifest.json")) {
    throw tap::DataError("missing checkpoint for fold " + std::to_string(fold) + " at " + dir.string() +
                         " (run meta-train first)");
  }
  auto model = tap::ModelState::load(dir);
  if (!same_architecture(model.config(), cfg.model_config(fold))) {
    throw tap::ConfigError("checkpoint at " + dir.string() + " does not match the model.* configuration");
  }
  return model;
}

MetaTrainResult cmd_meta_train(const RunConfig& cfg, std::ostream& log) {
  (void)Dataset::open(cfg.data_dir());
  struct FoldOutcome {
    std::vector<double> losses;
    std::vector<int> violations;
    std::string message;
  };
  const auto outcomes = parallel_map<FoldOutcome>(cfg.folds.size(), cfg.threads, [&](std::size_t i) {
    const int fold = cfg.folds[i];
    const auto split = tap::synth::FoldSplit::make(fold);
    const auto mt = cfg.meta_config(fold);
    auto model = tap::ModelState::init(cfg.model_config(fold));
    std::vector<TrainStreamRecord> stream;
    auto source = [&](std::size_t step) {
      const auto seed = tap::derive_seed(mt.seed, step);
      const auto plan = tap::plan_training_episode(split, mt.episode, seed);
      TrainStreamRecord rec{step, seed, plan.classes, {}};
      std::vector<tap::synth::Scene> support;
      for (const auto& s : plan.support) {
        support.push_back(tap::render(s, mt.episode.image_size));
        rec.scene_classes.insert(rec.scene_classes.end(), s.class_ids.begin(), s.class_ids.end());
      }
      rec.scene_classes.insert(rec.scene_classes.end(), plan.query.class_ids.begin(), plan.query.class_ids.end());
      stream.push_back(std::move(rec));
      return tap::assemble(plan, support, tap::render(plan.query, mt.episode.image_size),
                           "train-" + std::to_string(step));
    };
    FoldOutcome out;
    out.losses = tap::meta_train(model, source, mt);
    out.violations = audit_train_stream(stream, fold);

    const fs::path dir = cfg.checkpoint_dir(fold);
    std::error_code ec;
    fs::remove_all(dir, ec);
    model.save(dir);
    const auto median = running_median(out.losses, 100);
    std::ostringstream csv;
    csv << "step,loss,running_median\n";
    for (std::size_t s = 0; s < out.losses.size(); ++s) {
      csv << s << "," << fmt_double(out.losses[s]) << ",";
      if (s >= 99) csv << fmt_double(median[s - 99]);
      csv << "\n";
    }
    write_file(dir / "loss.csv", csv.str());
    std::string jsonl;
    for (const auto& r : stream) {
      jsonl += json{{"step", r.step}, {"seed", r.seed}, {"classes", r.classes}, {"scene_classes", r.scene_classes}}
                   .dump() +
               "\n";
    }
    write_file(dir / "train_stream.jsonl", jsonl);

    std::ostringstream msg;
    msg << "fold " << fold << ": " << out.losses.size() << " steps";
    if (!out.losses.empty()) {
      const std::size_t w = std::min<std::size_t>(100, out.losses.size());
      const std::vector<double> head(out.losses.begin(), out.losses.begin() + static_cast<std::ptrdiff_t>(w));
      const std::vector<double> tail(out.losses.end() - static_cast<std::ptrdiff_t>(w), out.losses.end());
      msg << ", windowed loss " << mean_of(head) << " -> " << mean_of(tail);
    }
    msg << ", fold hygiene audit " << (out.violations.empty() ? "passed" : "FAILED") << "\n";
    out.message = msg.str();
    return out;
  });

  MetaTrainResult result;
  for (std::size_t i = 0; i < cfg.folds.size(); ++i) {
    log << outcomes[i].message;
    result.losses[cfg.folds[i]] = outcomes[i].losses;
    result.audit_violations[cfg.folds[i]] = outcomes[i].violations;
  }
  for (const auto& [fold, bad] : result.audit_violations) {
    if (!bad.empty()) throw tap::DataError("novel class leaked into the fold " + std::to_string(fold) + " training stream");
  }
  return result;
}

// ---- eval ----------------------------------------------------------------

EvalResult cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const auto ds = Dataset::open(cfg.data_dir());
  const auto models = load_models(cfg);

  std::vector<tap::Method> run_methods = {tap::Method::kVanilla};
  for (auto m : cfg.methods) {
    if (m != tap::Method::kVanilla) run_methods.push_back(m);
  }
  std::vector<MethodInfo> infos;
  const auto& any_model = models.begin()->second;
  for (auto m : cfg.methods) {
    const auto ac = cfg.adapt_config(m);
    MethodInfo info{m, m == tap::Method::kTap ? ac.rank : 0, m == tap::Method::kVanilla ? 0 : ac.iterations, 0, 0.0};
    info.trainable_params = tap::trainable_parameters(any_model, ac);
    info.trainable_pct =
        100.0 * static_cast<double>(info.trainable_params) / static_cast<double>(any_model.total_parameters());
    infos.push_back(info);
  }

  struct Job {
    int fold;
    EpisodeRecord record;
  };
  std::vector<Job> jobs;
  for (auto shot : cfg.eval_settings()) {
    for (int fold : cfg.folds) {
      for (auto& r : select_records(ds, fold, shot, cfg.runs, cfg.episodes_per_fold)) jobs.push_back({fold, std::move(r)});
    }
  }
  log << "evaluating " << jobs.size() << " episodes x " << run_methods.size() << " methods on "
      << resolve_threads(cfg.threads) << " thread(s)\n";

  std::mutex progress_mu;
  std::size_t done = 0;
  const auto outcomes = parallel_map<std::vector<MethodOutcome>>(jobs.size(), cfg.threads, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto episode = ds.load(job.record);
    std::vector<MethodOutcome> out;
    for (auto m : run_methods) out.push_back(run_method(models.at(job.fold), episode, cfg.adapt_config(m)));
    std::lock_guard lock(progress_mu);
    if (++done % 50 == 0) log << "  " << done << "/" << jobs.size() << " episodes\n" << std::flush;
    return out;
  });

  EvalResult result;
  std::string traces;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& rec = jobs[i].record;
    for (const auto& o : outcomes[i]) {
      result.scores.push_back({jobs[i].fold, rec.shot, rec.run, rec.index, o.method, o.miou, o.background_iou, o.ms});
      if (std::find(cfg.methods.begin(), cfg.methods.end(), o.method) == cfg.methods.end()) continue;
      json t = trace_json(o.trace);
      t["fold"] = jobs[i].fold;
      t["n_way"] = rec.shot.n_way;
      t["k_shot"] = rec.shot.k_shot;
      t["run"] = rec.run;
      t["miou"] = o.miou;
      traces += t.dump() + "\n";
    }
  }
  result.rows = aggregate_report(result.scores, infos);
  write_file(cfg.out_dir() / "report.csv", report_csv(result.rows));
  write_file(cfg.out_dir() / "report.json", report_json(result.rows, cfg));
  write_file(cfg.out_dir() / "trace.jsonl", traces);
  log << format_table(result.rows);
  log << "report written to " << (cfg.out_dir() / "report.csv").string() << "\n";
  return result;
}

// ---- sweep ---------------------------------------------------------------

const std::vector<std::string>& sweep_columns() {
  static const std::vector<std::string> cols = {"rank", "iteration", "miou", "trainable_params", "trainable_pct",
                                                "status"};
  return cols;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  const auto& cols = sweep_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& r : rows) {
    out << r.rank << "," << r.iteration << "," << (r.miou ? fmt_double(*r.miou) : "") << "," << r.trainable_params
        << "," << fmt_double(r.trainable_pct) << "," << r.status << "\n";
  }
  return out.str();
}

SweepResult cmd_sweep(const RunConfig& cfg, std::ostream& log) {
  const auto ds = Dataset::open(cfg.data_dir());
  const auto models = load_models(cfg);
  const auto& any_model = models.begin()->second;
  const auto policy = tap::policy_for(any_model.config().variant);
  const std::size_t limit = tap::max_rank(any_model, policy);
  const ShotSetting shot{cfg.sweep_n_way, cfg.sweep_k_shot};

  std::vector<std::size_t> legal;
  for (auto r : cfg.sweep_ranks) {
    if (r <= limit) legal.push_back(r);
  }
  struct Job {
    int fold;
    EpisodeRecord record;
  };
  std::vector<Job> jobs;
  for (int fold : cfg.folds) {
    for (auto& r : select_records(ds, fold, shot, 1, cfg.sweep_episodes)) jobs.push_back({fold, std::move(r)});
  }
  log << "sweeping " << legal.size() << " rank(s) over " << jobs.size() << " episodes\n";

  // curves[job][rank index][t]
  const auto curves = parallel_map<std::vector<std::vector<double>>>(jobs.size(), cfg.threads, [&](std::size_t i) {
    const auto episode = ds.load(jobs[i].record);
    std::vector<std::vector<double>> out;
    for (auto r : legal) {
      auto ac = cfg.adapt_config(tap::Method::kTap);
      ac.rank = r;
      ac.iterations = cfg.sweep_iterations;
      ac.track_query_miou = true;
      out.push_back(tap::adapt(models.at(jobs[i].fold), episode, ac).trace.iteration_miou);
    }
    return out;
  });

  SweepResult result;
  std::vector<Series> series;
  std::string params = "rank,trainable_params,trainable_pct,status\n";
  const double total = static_cast<double>(any_model.total_parameters());
  for (auto r : cfg.sweep_ranks) {
    const auto it = std::find(legal.begin(), legal.end(), r);
    std::size_t count = 0;
    std::string status = "ok";
    if (it == legal.end()) {
      status = "skipped: rank exceeds min(m, n) = " + std::to_string(limit);
      log << "warning: rank " << r << " skipped (exceeds min(m, n) = " << limit << ")\n";
    } else {
      auto ac = cfg.adapt_config(tap::Method::kTap);
      ac.rank = r;
      count = tap::trainable_parameters(any_model, ac);
    }
    const double pct = 100.0 * static_cast<double>(count) / total;
    params += std::to_string(r) + "," + std::to_string(count) + "," + fmt_double(pct) + "," + status + "\n";
    Series s{"r=" + std::to_string(r), {}};
    for (std::size_t t = 0; t <= cfg.sweep_iterations; ++t) {
      SweepRow row{r, t, std::nullopt, count, pct, status};
      if (it != legal.end()) {
        const auto k = static_cast<std::size_t>(it - legal.begin());
        double sum = 0.0;
        for (const auto& c : curves) sum += c[k][t];
        row.miou = sum / static_cast<double>(curves.size());
        s.points.emplace_back(static_cast<double>(t), *row.miou);
      }
      result.rows.push_back(row);
    }
    if (!s.points.empty()) series.push_back(std::move(s));
  }
  write_file(cfg.out_dir() / "sweep.csv", sweep_csv(result.rows));
  write_file(cfg.out_dir() / "params.csv", params);
  write_file(cfg.out_dir() / "sweep.svg",
             line_chart_svg("Query mIoU over adaptation iterations", "iteration", "mean mIoU", series));
  json j = {{"format", "tap-sweep-v1"}, {"config", cfg.to_text()}, {"csv", sweep_csv(result.rows)}};
  write_file(cfg.out_dir() / "sweep.json", j.dump(2) + "\n");
  log << sweep_csv(result.rows);
  return result;
}

// ---- 1-shot study --------------------------------------------------------

const std::vector<std::string>& oneshot_columns() {
  static const std::vector<std::string> cols = {"k_shot", "replicated", "fold", "iteration",
                                                "miou",   "vanilla_miou", "episodes"};
  return cols;
}

std::string oneshot_csv(const std::vector<OneshotRow>& rows) {
  std::ostringstream out;
  const auto& cols = oneshot_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& r : rows) {
    out << r.k_shot << "," << (r.replicated ? "true" : "false") << "," << r.fold << "," << r.iteration << ","
        << fmt_double(r.miou) << "," << fmt_double(r.vanilla_miou) << "," << r.episodes << "\n";
  }
  return out.str();
}

OneshotResult cmd_oneshot_study(const RunConfig& cfg, std::ostream& log) {
  const auto ds = Dataset::open(cfg.data_dir());
  const auto models = load_models(cfg);
  struct Job {
    int fold;
    std::size_t k_shot;
    EpisodeRecord record;
  };
  std::vector<Job> jobs;
  for (std::size_t k : {std::size_t{1}, std::size_t{2}}) {
    for (int fold : cfg.folds) {
      for (auto& r : select_records(ds, fold, {cfg.oneshot_n_way, k}, 1, cfg.oneshot_episodes)) {
        jobs.push_back({fold, k, std::move(r)});
      }
    }
  }
  struct Outcome {
    std::vector<double> curve;
    double vanilla = 0.0;
    bool replicated = false;
  };
  const auto outcomes = parallel_map<Outcome>(jobs.size(), cfg.threads, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto& model = models.at(job.fold);
    const auto episode = ds.load(job.record);
    const auto adapted_on = job.k_shot == 1 ? tap::replicate_support(episode, cfg.oneshot_copies) : episode;
    auto ac = cfg.adapt_config(tap::Method::kTap);
    ac.iterations = cfg.oneshot_iterations;
    ac.track_query_miou = true;
    auto trace = tap::adapt(model, adapted_on, ac).trace;
    const auto vanilla = run_method(model, episode, cfg.adapt_config(tap::Method::kVanilla));
    return Outcome{trace.iteration_miou, vanilla.miou, trace.replicated};
  });

  OneshotResult result;
  std::vector<Series> series;
  for (std::size_t k : {std::size_t{1}, std::size_t{2}}) {
    std::vector<std::string> folds;
    for (int f : cfg.folds) folds.push_back(std::to_string(f));
    folds.push_back("all");
    for (const auto& fold : folds) {
      std::vector<const Outcome*> sel;
      bool replicated = false;
      for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].k_shot == k && (fold == "all" || std::to_string(jobs[i].fold) == fold)) {
          sel.push_back(&outcomes[i]);
          replicated = replicated || outcomes[i].replicated;
        }
      }
      double vanilla = 0.0;
      for (const auto* o : sel) vanilla += o->vanilla;
      vanilla /= static_cast<double>(sel.size());
      Series s{"K=" + std::to_string(k), {}};
      for (std::size_t t = 0; t <= cfg.oneshot_iterations; ++t) {
        double sum = 0.0;
        for (const auto* o : sel) sum += o->curve[t];
        const double m = sum / static_cast<double>(sel.size());
        result.rows.push_back({k, replicated, fold, t, m, vanilla, sel.size()});
        if (fold == "all") s.points.emplace_back(static_cast<double>(t), m);
      }
      if (fold == "all") series.push_back(std::move(s));
    }
  }
  write_file(cfg.out_dir() / "oneshot.csv", oneshot_csv(result.rows));
  write_file(cfg.out_dir() / "oneshot.svg",
             line_chart_svg("1-shot vs 2-shot adaptation", "iteration", "mean mIoU", series));
  json j = {{"format", "tap-oneshot-v1"}, {"config", cfg.to_text()}, {"csv", oneshot_csv(result.rows)}};
  write_file(cfg.out_dir() / "oneshot.json", j.dump(2) + "\n");
  for (const auto& r : result.rows) {
    if (r.fold == "all") {
      log << "K=" << r.k_shot << (r.replicated ? " (replicated)" : "") << " t=" << r.iteration << "  mIoU "
          << r.miou << "  vanilla " << r.vanilla_miou << "\n";
    }
  }
  return result;
}

}  // namespace tapcli
