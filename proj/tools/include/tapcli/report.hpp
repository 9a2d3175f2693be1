#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tap/adapt.hpp"
#include "tapcli/config.hpp"

namespace tapcli {

// One evaluated (episode, method) pair.
struct EpisodeScore {
  int fold = 0;
  ShotSetting shot{};
  std::size_t run = 0;
  std::size_t index = 0;
  tap::Method method = tap::Method::kVanilla;
  double miou = 0.0;
  double background_iou = 0.0;
  double ms = 0.0;
};

// fold is the fold index, or "all" for the mean over folds. Vanilla rows
// carry delta = 0; other rows satisfy miou = vanilla miou + delta.
struct ReportRow {
  std::string method;
  std::string fold;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t rank = 0;
  std::size_t iterations = 0;
  double miou = 0.0;
  double miou_std = 0.0;  // across runs (folds for "all" rows)
  double delta = 0.0;
  double background_iou = 0.0;
  std::size_t trainable_params = 0;
  double trainable_pct = 0.0;
  double ms_per_episode = 0.0;
  std::size_t episodes = 0;
  std::size_t runs = 0;
};

struct MethodInfo {
  tap::Method method;
  std::size_t rank = 0;
  std::size_t iterations = 0;
  std::size_t trainable_params = 0;
  double trainable_pct = 0.0;
};

const std::vector<std::string>& report_columns();

/// Groups scores by (fold, N, K, method). Scores must include vanilla for
/// every cell. Rows appear for `methods` only, ordered by setting, then
/// fold (per-fold rows followed by "all"), then method order.
std::vector<ReportRow> aggregate_report(const std::vector<EpisodeScore>& scores, const std::vector<MethodInfo>& methods);

std::string report_csv(const std::vector<ReportRow>& rows);
std::string report_json(const std::vector<ReportRow>& rows, const RunConfig& cfg);
std::string format_table(const std::vector<ReportRow>& rows);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Self-contained SVG line chart, one polyline per series.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

std::string fmt_double(double x);

}  // namespace tapcli
