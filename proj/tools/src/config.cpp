#include "tapcli/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "tap/errors.hpp"
#include "tap/synth.hpp"

namespace tapcli {

namespace {

using tap::ConfigError;

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  while (true) {
    const auto comma = s.find(',');
    const auto item = trim(s.substr(0, comma));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("config key '" + std::string(key) + "': invalid value '" + std::string(value) + "' (expected " +
                    std::string(expected) + ")");
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t parse_size(std::string_view key, std::string_view v, std::size_t lo, std::size_t hi) {
  const auto x = parse_u64(key, v);
  if (x < lo || x > hi) bad_value(key, v, "an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<std::size_t>(x);
}

double parse_real(std::string_view key, std::string_view v, double lo, double hi, bool open_lo = false) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size() || !std::isfinite(out) || out < lo || out > hi ||
      (open_lo && out == lo)) {
    std::ostringstream range;
    range << "a real in " << (open_lo ? "(" : "[") << lo << ", " << hi << "]";
    bad_value(key, v, range.str());
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true|false");
}

std::string fmt_real(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

template <class T>
std::string fmt_list(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += f(xs[i]);
  }
  return out;
}

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view v, std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> out;
  for (auto item : split_list(v)) out.push_back(parse_size(key, item, lo, hi));
  if (out.empty()) bad_value(key, v, "a non-empty comma-separated list");
  return out;
}

struct Entry {
  std::string key;
  std::string description;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define TAP_SIZE(k, field, lo, hi, desc)                                                    \
  Entry {                                                                                   \
    k, desc, [](RunConfig& c, std::string_view v) { c.field = parse_size(k, v, lo, hi); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                          \
  }
#define TAP_REAL(k, field, lo, hi, open_lo, desc)                                                    \
  Entry {                                                                                            \
    k, desc, [](RunConfig& c, std::string_view v) { c.field = parse_real(k, v, lo, hi, open_lo); }, \
        [](const RunConfig& c) { return fmt_real(c.field); }                                         \
  }

constexpr std::size_t kBig = 1'000'000;

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      {"seed", "master seed for data, meta-training and adaptation",
       [](RunConfig& c, std::string_view v) { c.seed = parse_u64("seed", v); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"out", "output directory",
       [](RunConfig& c, std::string_view v) {
         if (v.empty()) bad_value("out", v, "a path");
         c.out = std::string(v);
       },
       [](const RunConfig& c) { return c.out; }},
      TAP_SIZE("data.image_size", image_size, 8, 256, "square image side in pixels"),
      {"data.folds", "folds to generate, train and evaluate (subset of 0,1,2,3)",
       [](RunConfig& c, std::string_view v) {
         std::vector<int> folds;
         for (auto x : parse_size_list("data.folds", v, 0, tap::synth::kNumFolds - 1)) {
           folds.push_back(static_cast<int>(x));
         }
         std::set<int> uniq(folds.begin(), folds.end());
         if (uniq.size() != folds.size()) bad_value("data.folds", v, "distinct fold indices");
         c.folds = std::move(folds);
       },
       [](const RunConfig& c) { return fmt_list<int>(c.folds, [](const int& f) { return std::to_string(f); }); }},
      TAP_SIZE("data.episodes_per_fold", episodes_per_fold, 1, kBig, "evaluation episodes per fold and run"),
      TAP_SIZE("data.runs", runs, 1, 100, "independent episode sets (seeds) per fold"),
      {"data.query_presence", "which episode classes the query contains: all|subset",
       [](RunConfig& c, std::string_view v) { c.query_presence = tap::parse_query_presence(v); },
       [](const RunConfig& c) { return std::string(tap::to_string(c.query_presence)); }},
      TAP_REAL("data.distractor_prob", distractor_prob, 0.0, 1.0, false,
               "probability of adding a non-episode object to a scene"),
      {"model.variant", "encoder variant: conv|attention",
       [](RunConfig& c, std::string_view v) { c.variant = tap::parse_encoder_variant(v); },
       [](const RunConfig& c) { return std::string(tap::to_string(c.variant)); }},
      TAP_SIZE("model.channels", channels, 1, 1024, "conv trunk width C"),
      TAP_SIZE("model.feature_dim", feature_dim, 1, 1024, "feature depth D"),
      TAP_SIZE("model.blocks", blocks, 1, 32, "encoder blocks L"),
      TAP_SIZE("model.stride", stride, 1, 16, "conv stem stride s"),
      TAP_SIZE("model.patch", patch, 1, 32, "attention patch size P"),
      TAP_REAL("model.tau", tau, 0.0, 1000.0, false, "initial decoder temperature"),
      TAP_SIZE("meta.steps", meta_steps, 0, kBig, "meta-training steps per fold"),
      TAP_REAL("meta.lr", meta_lr, 0.0, 1.0, true, "meta-training Adam learning rate"),
      TAP_SIZE("meta.n_way", meta_n_way, 1, 9, "ways of meta-training episodes"),
      TAP_SIZE("meta.k_shot", meta_k_shot, 1, 64, "shots of meta-training episodes"),
      {"eval.methods", "comma list of vanilla|decoder_ft|tap",
       [](RunConfig& c, std::string_view v) {
         std::vector<tap::Method> ms;
         for (auto item : split_list(v)) {
           const auto m = tap::parse_method(item);
           if (std::find(ms.begin(), ms.end(), m) != ms.end()) bad_value("eval.methods", v, "distinct methods");
           ms.push_back(m);
         }
         if (ms.empty()) bad_value("eval.methods", v, "at least one method");
         c.methods = std::move(ms);
       },
       [](const RunConfig& c) {
         return fmt_list<tap::Method>(c.methods, [](const tap::Method& m) { return std::string(tap::to_string(m)); });
       }},
      {"eval.n_way", "comma list of episode ways",
       [](RunConfig& c, std::string_view v) { c.n_way = parse_size_list("eval.n_way", v, 1, 3); },
       [](const RunConfig& c) {
         return fmt_list<std::size_t>(c.n_way, [](const std::size_t& x) { return std::to_string(x); });
       }},
      {"eval.k_shot", "comma list of episode shots",
       [](RunConfig& c, std::string_view v) { c.k_shot = parse_size_list("eval.k_shot", v, 1, 64); },
       [](const RunConfig& c) {
         return fmt_list<std::size_t>(c.k_shot, [](const std::size_t& x) { return std::to_string(x); });
       }},
      TAP_SIZE("eval.iterations", iterations, 0, 1000, "adaptation iterations T"),
      TAP_REAL("eval.gamma", gamma, 0.0, 100.0, false, "focal loss focusing parameter"),
      {"eval.weight_mode", "focal class weights: inverse_log_frequency|uniform",
       [](RunConfig& c, std::string_view v) { c.weight_mode = tap::parse_weight_mode(v); },
       [](const RunConfig& c) { return std::string(tap::to_string(c.weight_mode)); }},
      TAP_SIZE("eval.threads", threads, 0, 256, "worker threads (0 = hardware concurrency)"),
      TAP_SIZE("eval.tap.rank", tap_rank, 1, 4096, "LoRA rank r"),
      TAP_REAL("eval.tap.alpha", tap_alpha, -1000.0, 1000.0, false, "LoRA scale alpha"),
      TAP_REAL("eval.tap.lr", tap_lr, 0.0, 1.0, true, "TaP Adam learning rate"),
      {"eval.tap.select", "context selection: identity|random_k",
       [](RunConfig& c, std::string_view v) {
         if (v != "identity" && v != "random_k") bad_value("eval.tap.select", v, "identity|random_k");
         c.tap_select = std::string(v);
       },
       [](const RunConfig& c) { return c.tap_select; }},
      TAP_SIZE("eval.tap.select_k", tap_select_k, 1, 4096, "context size for random_k"),
      {"eval.tap.support_grad", "backpropagate through the prototype branch: true|false",
       [](RunConfig& c, std::string_view v) { c.tap_support_grad = parse_bool("eval.tap.support_grad", v); },
       [](const RunConfig& c) { return std::string(c.tap_support_grad ? "true" : "false"); }},
      TAP_REAL("eval.decoder_ft.lr", decoder_ft_lr, 0.0, 1.0, true, "Decoder-FT Adam learning rate"),
      {"sweep.ranks", "comma list of LoRA ranks",
       [](RunConfig& c, std::string_view v) { c.sweep_ranks = parse_size_list("sweep.ranks", v, 1, 4096); },
       [](const RunConfig& c) {
         return fmt_list<std::size_t>(c.sweep_ranks, [](const std::size_t& x) { return std::to_string(x); });
       }},
      TAP_SIZE("sweep.iterations", sweep_iterations, 0, 1000, "iterations tracked by the sweep"),
      TAP_SIZE("sweep.episodes", sweep_episodes, 1, kBig, "episodes per fold in the sweep"),
      TAP_SIZE("sweep.n_way", sweep_n_way, 1, 3, "sweep episode ways"),
      TAP_SIZE("sweep.k_shot", sweep_k_shot, 1, 64, "sweep episode shots"),
      TAP_SIZE("oneshot.n_way", oneshot_n_way, 1, 3, "ways in the 1-shot study"),
      TAP_SIZE("oneshot.copies", oneshot_copies, 2, 64, "support replication factor for K=1"),
      TAP_SIZE("oneshot.iterations", oneshot_iterations, 0, 1000, "iterations tracked by the study"),
      TAP_SIZE("oneshot.episodes", oneshot_episodes, 1, kBig, "episodes per fold in the study"),
  };
  return table;
}

#undef TAP_SIZE
#undef TAP_REAL

}  // namespace

const std::vector<KeyInfo>& key_reference() {
  static const std::vector<KeyInfo> keys = [] {
    std::vector<KeyInfo> out;
    for (const auto& e : entries()) out.push_back({e.key, e.description});
    return out;
  }();
  return keys;
}

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& e : entries()) {
    if (e.key == key) {
      e.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
  for (int f : folds) model_config(f).validate();
  if (sweep_episodes > episodes_per_fold || oneshot_episodes > episodes_per_fold) {
    throw ConfigError("sweep.episodes and oneshot.episodes must not exceed data.episodes_per_fold");
  }
  for (auto n : n_way) {
    if (n > 3) throw ConfigError("eval.n_way cannot exceed the 3 novel classes of a fold");
  }
  if (meta_n_way > 9) throw ConfigError("meta.n_way cannot exceed the 9 base classes of a fold");
  if (tap_select == "random_k") {
    for (auto s : eval_settings()) {
      if (tap_select_k > s.n_way * s.k_shot - 1) {
        throw ConfigError("eval.tap.select_k must be at most N*K - 1 = " + std::to_string(s.n_way * s.k_shot - 1));
      }
    }
  }
  if (tap::synth::min_radius(image_size) < 3.5) throw ConfigError("data.image_size is too small to render objects");
}

std::vector<std::string> RunConfig::warnings() const {
  std::vector<std::string> out;
  const auto model = tap::ModelState::init(model_config(folds.empty() ? 0 : folds.front()));
  const std::size_t limit = tap::max_rank(model, tap::policy_for(variant));
  if (2 * tap_rank > limit) {
    out.push_back("eval.tap.rank = " + std::to_string(tap_rank) + " is not well below min(m, n) = " +
                  std::to_string(limit) + "; the adapters are no longer low-rank");
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> RunConfig::resolved() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : entries()) out.emplace_back(e.key, e.get(*this));
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : resolved()) out += k + " = " + v + "\n";
  return out;
}

tap::ModelConfig RunConfig::model_config(int fold) const {
  tap::ModelConfig m;
  m.variant = variant;
  m.image_size = image_size;
  m.channels = channels;
  m.feature_dim = feature_dim;
  m.blocks = blocks;
  m.stride = stride;
  m.patch = patch;
  m.tau = tau;
  m.seed = tap::derive_seed(seed, 0x6D6F64656CULL, static_cast<std::uint64_t>(fold));
  return m;
}

tap::EpisodeSpec RunConfig::episode_spec(ShotSetting s) const {
  tap::EpisodeSpec spec;
  spec.n_way = s.n_way;
  spec.k_shot = s.k_shot;
  spec.image_size = image_size;
  spec.presence = query_presence;
  spec.distractor_prob = distractor_prob;
  return spec;
}

tap::MetaTrainConfig RunConfig::meta_config(int fold) const {
  tap::MetaTrainConfig m;
  m.steps = meta_steps;
  m.learning_rate = meta_lr;
  m.seed = tap::derive_seed(seed, 0x6D657461ULL, static_cast<std::uint64_t>(fold));
  m.focal = {gamma, weight_mode};
  m.episode = episode_spec({meta_n_way, meta_k_shot});
  return m;
}

tap::AdaptConfig RunConfig::adapt_config(tap::Method m) const {
  tap::AdaptConfig c;
  c.method = m;
  c.iterations = iterations;
  c.rank = tap_rank;
  c.alpha = tap_alpha;
  c.adam.learning_rate = m == tap::Method::kDecoderFt ? decoder_ft_lr : tap_lr;
  c.select = tap_select == "random_k" ? tap::SelectionStrategy::random_k(tap_select_k)
                                      : tap::SelectionStrategy::identity();
  c.focal = {gamma, weight_mode};
  c.support_grad = tap_support_grad;
  c.seed = tap::derive_seed(seed, 0x6164617074ULL);
  return c;
}

std::vector<ShotSetting> RunConfig::eval_settings() const {
  std::vector<ShotSetting> out;
  for (auto n : n_way) {
    for (auto k : k_shot) out.push_back({n, k});
  }
  return out;
}

std::vector<ShotSetting> RunConfig::shot_settings() const {
  std::set<ShotSetting> all;
  for (auto s : eval_settings()) all.insert(s);
  all.insert({sweep_n_way, sweep_k_shot});
  all.insert({oneshot_n_way, 1});
  all.insert({oneshot_n_way, 2});
  return {all.begin(), all.end()};
}

std::filesystem::path RunConfig::checkpoint_dir(int fold) const {
  return out_dir() / "checkpoints" / ("fold" + std::to_string(fold));
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

}  // namespace tapcli
