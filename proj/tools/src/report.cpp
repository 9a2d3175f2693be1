#include "tapcli/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "tap/errors.hpp"

namespace tapcli {

namespace {

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// Sample standard deviation; 0 for fewer than two values.
double stddev(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

struct Cell {
  std::map<std::size_t, std::vector<double>> miou_by_run;
  std::vector<double> background;
  std::vector<double> ms;
};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string fmt_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {
      "method",           "fold",          "n_way",          "k_shot",   "rank", "iterations", "miou",
      "miou_std",         "delta",         "background_iou", "trainable_params", "trainable_pct",
      "ms_per_episode",   "episodes",      "runs"};
  return cols;
}

std::vector<ReportRow> aggregate_report(const std::vector<EpisodeScore>& scores,
                                        const std::vector<MethodInfo>& methods) {
  using Key = std::tuple<ShotSetting, int, tap::Method>;
  std::map<Key, Cell> cells;
  std::map<ShotSetting, std::vector<int>> folds;
  for (const auto& s : scores) {
    auto& c = cells[{s.shot, s.fold, s.method}];
    c.miou_by_run[s.run].push_back(s.miou);
    c.background.push_back(s.background_iou);
    c.ms.push_back(s.ms);
    auto& f = folds[s.shot];
    if (std::find(f.begin(), f.end(), s.fold) == f.end()) f.push_back(s.fold);
  }

  struct Summary {
    double miou, std, background, ms;
    std::size_t episodes, runs;
  };
  auto summarize = [&](const ShotSetting& shot, int fold, tap::Method m) {
    const auto it = cells.find({shot, fold, m});
    if (it == cells.end()) {
      throw tap::ContractError("report: no " + std::string(tap::to_string(m)) + " scores for fold " +
                               std::to_string(fold));
    }
    std::vector<double> run_means;
    std::size_t episodes = 0;
    for (const auto& [run, xs] : it->second.miou_by_run) {
      run_means.push_back(mean(xs));
      episodes += xs.size();
    }
    return Summary{mean(run_means), stddev(run_means), mean(it->second.background), mean(it->second.ms), episodes,
                   run_means.size()};
  };

  std::vector<ReportRow> rows;
  for (auto& [shot, fold_list] : folds) {
    std::sort(fold_list.begin(), fold_list.end());
    std::map<tap::Method, std::vector<Summary>> per_method;
    std::vector<Summary> vanilla;
    for (int fold : fold_list) vanilla.push_back(summarize(shot, fold, tap::Method::kVanilla));
    auto make_row = [&](const MethodInfo& info, std::string fold_name, const Summary& s, double base) {
      ReportRow r;
      r.method = std::string(tap::to_string(info.method));
      r.fold = std::move(fold_name);
      r.n_way = shot.n_way;
      r.k_shot = shot.k_shot;
      r.rank = info.rank;
      r.iterations = info.iterations;
      r.miou = s.miou;
      r.miou_std = s.std;
      r.delta = info.method == tap::Method::kVanilla ? 0.0 : s.miou - base;
      r.background_iou = s.background;
      r.trainable_params = info.trainable_params;
      r.trainable_pct = info.trainable_pct;
      r.ms_per_episode = s.ms;
      r.episodes = s.episodes;
      r.runs = s.runs;
      return r;
    };
    for (std::size_t fi = 0; fi < fold_list.size(); ++fi) {
      for (const auto& info : methods) {
        const auto s = summarize(shot, fold_list[fi], info.method);
        per_method[info.method].push_back(s);
        rows.push_back(make_row(info, std::to_string(fold_list[fi]), s, vanilla[fi].miou));
      }
    }
    std::vector<double> vanilla_means;
    for (const auto& v : vanilla) vanilla_means.push_back(v.miou);
    for (const auto& info : methods) {
      const auto& ss = per_method[info.method];
      std::vector<double> m, b, t;
      std::size_t episodes = 0, runs = 0;
      for (const auto& s : ss) {
        m.push_back(s.miou);
        b.push_back(s.background);
        t.push_back(s.ms);
        episodes += s.episodes;
        runs = std::max(runs, s.runs);
      }
      rows.push_back(make_row(info, "all", {mean(m), stddev(m), mean(b), mean(t), episodes, runs}, mean(vanilla_means)));
    }
  }
  return rows;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& r : rows) {
    out << r.method << "," << r.fold << "," << r.n_way << "," << r.k_shot << "," << r.rank << "," << r.iterations
        << "," << fmt_double(r.miou) << "," << fmt_double(r.miou_std) << "," << fmt_double(r.delta) << ","
        << fmt_double(r.background_iou) << "," << r.trainable_params << "," << fmt_double(r.trainable_pct) << ","
        << fmt_double(r.ms_per_episode) << "," << r.episodes << "," << r.runs << "\n";
  }
  return out.str();
}

std::string report_json(const std::vector<ReportRow>& rows, const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["format"] = "tap-report-v1";
  j["config"] = cfg.to_text();
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    arr.push_back({{"method", r.method},
                   {"fold", r.fold},
                   {"n_way", r.n_way},
                   {"k_shot", r.k_shot},
                   {"rank", r.rank},
                   {"iterations", r.iterations},
                   {"miou", r.miou},
                   {"miou_std", r.miou_std},
                   {"delta", r.delta},
                   {"background_iou", r.background_iou},
                   {"trainable_params", r.trainable_params},
                   {"trainable_pct", r.trainable_pct},
                   {"ms_per_episode", r.ms_per_episode},
                   {"episodes", r.episodes},
                   {"runs", r.runs}});
  }
  j["rows"] = arr;
  return j.dump(2) + "\n";
}

std::string format_table(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(11) << "method" << std::setw(5) << "fold" << std::setw(7) << "N-K" << std::right
      << std::setw(9) << "mIoU" << std::setw(9) << "delta" << std::setw(9) << "std" << std::setw(10) << "params"
      << std::setw(10) << "ms/ep" << "\n";
  out << std::fixed;
  for (const auto& r : rows) {
    const bool vanilla = r.method == "vanilla";
    out << std::left << std::setw(11) << r.method << std::setw(5) << r.fold << std::setw(7)
        << (std::to_string(r.n_way) + "-" + std::to_string(r.k_shot)) << std::right << std::setprecision(2)
        << std::setw(9) << 100.0 * r.miou << std::setw(9);
    if (vanilla) {
      out << "";
    } else {
      out << std::showpos << 100.0 * r.delta << std::noshowpos;
    }
    out << std::setw(9) << 100.0 * r.miou_std << std::setw(10) << r.trainable_params << std::setprecision(1)
        << std::setw(10) << r.ms_per_episode << "\n";
  }
  return out.str();
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 60;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.01, y1 += 0.01;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
      << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = y0 + (y1 - y0) * i / 5.0, x = x0 + (x1 - x0) * i / 5.0;
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << std::setprecision(3) << y
        << "</text>\n";
    out << "<text x=\"" << px(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << std::setprecision(1)
        << x << "</text>\n"
        << std::setprecision(2);
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << xml_escape(x_label)
      << "</text>\n";
  out << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = palette[i % 10];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : series[i].points) out << px(x) << "," << py(y) << " ";
    out << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(i);
    out << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << xml_escape(series[i].name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace tapcli
