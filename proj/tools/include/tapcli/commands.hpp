#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tapcli/config.hpp"
#include "tapcli/dataset.hpp"
#include "tapcli/report.hpp"

namespace tapcli {

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

/// Config file (if any) with --seed/--out applied on top, validated.
RunConfig resolve_config(const GlobalOptions& opts);

// ---- meta-train ----------------------------------------------------------

struct TrainStreamRecord {
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::vector<int> classes;        // episode classes
  std::vector<int> scene_classes;  // every object drawn in the episode
};

/// Class ids in the stream that belong to the fold's novel split.
std::vector<int> audit_train_stream(const std::vector<TrainStreamRecord>& stream, int fold);

/// Trailing median over `width` values. Entry j covers xs[j .. j+width-1].
std::vector<double> running_median(const std::vector<double>& xs, std::size_t width);

struct MetaTrainResult {
  std::map<int, std::vector<double>> losses;
  std::map<int, std::vector<int>> audit_violations;
};
MetaTrainResult cmd_meta_train(const RunConfig& cfg, std::ostream& log);

tap::ModelState load_checkpoint(const RunConfig& cfg, int fold);

// ---- eval ----------------------------------------------------------------

struct EvalResult {
  std::vector<EpisodeScore> scores;
  std::vector<ReportRow> rows;
};
EvalResult cmd_eval(const RunConfig& cfg, std::ostream& log);

// ---- sweep ---------------------------------------------------------------

struct SweepRow {
  std::size_t rank = 0;
  std::size_t iteration = 0;
  std::optional<double> miou;  // empty when the rank was skipped
  std::size_t trainable_params = 0;
  double trainable_pct = 0.0;
  std::string status;  // "ok" or "skipped: <reason>"
};
const std::vector<std::string>& sweep_columns();
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct SweepResult {
  std::vector<SweepRow> rows;  // |ranks| x (T + 1), rank-major
};
SweepResult cmd_sweep(const RunConfig& cfg, std::ostream& log);

// ---- 1-shot study --------------------------------------------------------

struct OneshotRow {
  std::size_t k_shot = 0;
  bool replicated = false;
  std::string fold;  // fold index or "all"
  std::size_t iteration = 0;
  double miou = 0.0;
  double vanilla_miou = 0.0;
  std::size_t episodes = 0;
};
const std::vector<std::string>& oneshot_columns();
std::string oneshot_csv(const std::vector<OneshotRow>& rows);

struct OneshotResult {
  std::vector<OneshotRow> rows;
};
OneshotResult cmd_oneshot_study(const RunConfig& cfg, std::ostream& log);

// ---- gen-data ------------------------------------------------------------

GenSummary cmd_gen_data(const RunConfig& cfg, bool force, std::ostream& log);

}  // namespace tapcli
