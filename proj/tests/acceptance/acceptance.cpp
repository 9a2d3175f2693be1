// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (capped at 1).
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "helpers.hpp"
#include "tap/adapt.hpp"
#include "tap/lora.hpp"
#include "tap/losses.hpp"
#include "tap/ops.hpp"
#include "tap/refnet.hpp"
#include "tapcli/commands.hpp"

using namespace tap;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr std::size_t kGradSamples = 100;
constexpr double kFiniteDiffStep = 1e-5;
constexpr double kMergeTol = 1e-10;
constexpr std::size_t kMergeDraws = 100;
constexpr double kCrossEntropyTol = 1e-9;
constexpr std::size_t kCrossEntropyPixels = 1000;
constexpr double kHandTol = 1e-6;
constexpr std::size_t kShuffleEpisodes = 50;
constexpr std::size_t kMinFoldsImproved = 3;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ModelState reference_model(EncoderVariant v = EncoderVariant::kConv) {
  ModelConfig c;
  c.variant = v;
  return ModelState::init(c);
}

Episode reference_episode(std::size_t n, std::size_t k, std::uint64_t seed, int fold = 0) {
  return sample_episode(synth::FoldSplit::make(fold), EpisodeSpec{.n_way = n, .k_shot = k}, seed);
}

// ---- 1 ---------------------------------------------------------------------

Verdict gradient_oracle() {
  const auto start = Clock::now();
  auto model = reference_model().clone();
  model.set_trainable(ParamGroup::kEncoder, true);
  model.set_trainable(ParamGroup::kDecoder, true);
  auto adapters = attach(model, policy_for(EncoderVariant::kConv), 4, 1.0, 1);
  Rng rng(0x67726164);
  for (auto b : adapters.trainable()) {
    for (auto& x : b.mutable_data()) {
      if (x == 0.0) x = rng.uniform(-0.2, 0.2);  // B starts at zero
    }
  }
  const auto ep = reference_episode(2, 2, 1);
  std::vector<Tensor> params = adapters.trainable();
  for (const auto& p : model.parameters()) {
    if (p.group != ParamGroup::kFrozen) params.push_back(p.value);
  }
  const auto r = testing::grad_check([&] { return episode_loss(model, ep, {}, &adapters); }, params, kGradSamples,
                                     rng, kFiniteDiffStep);
  model.freeze_all();
  const double secs = seconds_since(start);
  return {r.max_rel < kGradRelTol && secs < kGradSeconds && r.checked == kGradSamples,
          "max rel err " + fmt("%.3e", r.max_rel) + " over " + std::to_string(r.checked) + " params in " +
              fmt("%.1f", secs) + " s (tol " + fmt("%.0e", kGradRelTol) + ", " + fmt("%.0f", kGradSeconds) + " s)"};
}

// ---- 2 ---------------------------------------------------------------------

Verdict zero_init_identity() {
  std::size_t checked = 0;
  bool ok = true;
  for (auto v : {EncoderVariant::kConv, EncoderVariant::kAttention}) {
    const auto model = reference_model(v);
    for (std::size_t r : {2, 8, 32}) {
      for (std::uint64_t s = 0; s < 3; ++s) {
        const auto ep = reference_episode(2, 2, 10 + s, static_cast<int>(s));
        const AdaptedModel plain{model.clone(), std::nullopt};
        const AdaptedModel lora{model.clone(), attach(model, policy_for(v), r, 1.0, s)};
        const auto a = predict_query(plain, ep), b = predict_query(lora, ep);
        ok = ok && testing::bit_equal(a.logits, b.logits) && testing::bit_equal(a.mask, b.mask);
        ++checked;
      }
    }
  }
  return {ok, std::to_string(checked) + " (variant, rank, episode) cases, logits and masks bit-identical"};
}

// ---- 3 ---------------------------------------------------------------------

Verdict merge_equivalence() {
  Rng rng(0x6D65726765);
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < kMergeDraws; ++i) {
    const std::size_t m = 1 + rng.index(32), n = 1 + rng.index(32);
    const std::size_t r = 1 + rng.index(std::min(m, n));
    const auto W = testing::random_tensor({m, n}, rng);
    const LoraAdapter a{"w", testing::random_tensor({m, r}, rng), testing::random_tensor({r, n}, rng),
                        rng.uniform(-2.0, 2.0)};
    const auto x = testing::random_tensor({1 + rng.index(8), m}, rng, -3, 3);
    worst = std::max(worst, testing::max_abs_diff(adapted_forward(x, W, a), ops::matmul(x, merge(W, a))));
  }
  return {worst < kMergeTol, std::to_string(kMergeDraws) + " draws, max |adapted - merged| " + fmt("%.3e", worst) +
                                 " (tol " + fmt("%.0e", kMergeTol) + ")"};
}

// ---- 4 ---------------------------------------------------------------------

Verdict count_law() {
  bool ok = true;
  std::ostringstream d;
  for (auto v : {EncoderVariant::kConv, EncoderVariant::kAttention}) {
    const auto model = reference_model(v);
    std::size_t prev = 0;
    d << to_string(v) << ":";
    for (std::size_t r = 2; r <= 32; r *= 2) {
      const auto count = count_trainable(attach(model, policy_for(v), r, 1.0, 0), model.total_parameters());
      std::size_t closed = 0;
      for (const auto& name : model.adapter_targets()) {
        closed += r * (model.param(name).dim(0) + model.param(name).dim(1));
      }
      ok = ok && count.parameters == closed && (prev == 0 || count.parameters == 2 * prev);
      prev = count.parameters;
      d << " " << count.parameters;
    }
    d << "; ";
  }
  d << "doubling and closed form exact";
  return {ok, d.str()};
}

// ---- 5 ---------------------------------------------------------------------

Verdict focal_oracles() {
  Rng rng(0x666F63);
  const std::size_t c = 4;
  const auto logits = testing::random_tensor({c, 1, kCrossEntropyPixels}, rng, -5, 5);
  std::vector<double> labels(kCrossEntropyPixels);
  for (auto& l : labels) l = static_cast<double>(rng.index(c));
  const Tensor mask({1, kCrossEntropyPixels}, labels);
  double ce = 0.0;
  for (std::size_t p = 0; p < kCrossEntropyPixels; ++p) {
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits.data()[k * kCrossEntropyPixels + p]);
    ce -= logits.data()[static_cast<std::size_t>(labels[p]) * kCrossEntropyPixels + p] - std::log(z);
  }
  ce /= static_cast<double>(kCrossEntropyPixels);
  const double ce_err = std::abs(focal_loss(logits, mask, {0.0, WeightMode::kUniform}).item() - ce);

  const double w_full = class_weights(Tensor::zeros({4, 4}), 1)[0];
  const double w_absent = class_weights(Tensor::zeros({4, 4}), 2)[1];
  const double single =
      focal_loss(Tensor({2, 1, 1}, {std::log(9.0), 0.0}), Tensor::zeros({1, 1}), {2.0, WeightMode::kUniform}).item();
  const double e1 = std::abs(w_full - 1.0 / std::log(2.1));
  const double e2 = std::abs(w_absent - 1.0 / std::log(1.1));
  const double e3 = std::abs(single - 0.01 * -std::log(0.9));
  const double e3_printed = std::abs(single - 1.0536e-3);
  const bool ok = ce_err < kCrossEntropyTol && e1 < kHandTol && e2 < kHandTol && e3 < kHandTol && e3_printed < kHandTol;
  return {ok, "CE diff " + fmt("%.2e", ce_err) + " on " + std::to_string(kCrossEntropyPixels) + " px; weights " +
                  fmt("%.6f", w_full) + ", " + fmt("%.6f", w_absent) + ", loss " + fmt("%.6e", single) +
                  " (max err vs closed forms " + fmt("%.1e", std::max({e1, e2, e3})) + ")"};
}

// ---- 6 ---------------------------------------------------------------------

Verdict protocol_laws() {
  const auto model = reference_model();
  std::ostringstream d;
  bool ok = true;

  AdaptConfig cfg;
  cfg.iterations = 8;
  cfg.rank = 16;
  for (auto [n, k] : {std::pair<std::size_t, std::size_t>{2, 5}, {1, 3}}) {
    const auto r = adapt(model, reference_episode(n, k, 5), cfg);
    ok = ok && r.trace.passes() == cfg.iterations * n * k;
    d << n << "w" << k << "s passes " << r.trace.passes() << "; ";
  }

  const auto ep = reference_episode(2, 3, 6);
  const std::vector<ParamGroup> decoder = {ParamGroup::kDecoder};
  const std::vector<ParamGroup> encoder = {ParamGroup::kFrozen, ParamGroup::kEncoder};
  cfg.iterations = 2;
  const auto tap_run = adapt(model, ep, cfg);
  auto dft = cfg;
  dft.method = Method::kDecoderFt;
  const auto dft_run = adapt(model, ep, dft);
  const bool frozen = tap_run.adapted.model.checksum(decoder) == model.checksum(decoder) &&
                      tap_run.adapted.model.checksum(encoder) == model.checksum(encoder) &&
                      dft_run.adapted.model.checksum(encoder) == model.checksum(encoder);
  ok = ok && frozen;
  d << "frozen checksums " << (frozen ? "unchanged" : "CHANGED") << "; ";

  std::vector<Episode> eps;
  for (std::size_t i = 0; i < kShuffleEpisodes; ++i) eps.push_back(reference_episode(2, 2, 1000 + i, i % 4));
  auto shuffle_cfg = cfg;
  shuffle_cfg.iterations = 1;
  shuffle_cfg.rank = 4;
  shuffle_cfg.track_query_miou = true;
  std::vector<std::size_t> order(eps.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(0x73687566);
  rng.shuffle(order);
  std::vector<std::vector<double>> in_order(eps.size()), shuffled(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) in_order[i] = adapt(model, eps[i], shuffle_cfg).trace.iteration_miou;
  for (auto i : order) shuffled[i] = adapt(model, eps[i], shuffle_cfg).trace.iteration_miou;
  const bool same = in_order == shuffled;
  ok = ok && same;
  d << kShuffleEpisodes << "-episode shuffle " << (same ? "identical" : "DIFFERS");
  return {ok, d.str()};
}

// ---- 7-9 -------------------------------------------------------------------

struct Pipeline {
  tapcli::RunConfig cfg;
  std::ofstream log;
  bool trained = false;
};

void ensure_trained(Pipeline& p) {
  if (p.trained) return;
  tapcli::cmd_gen_data(p.cfg, true, p.log);
  tapcli::cmd_meta_train(p.cfg, p.log);
  p.trained = true;
}

Verdict trend(Pipeline& p) {
  ensure_trained(p);
  const auto start = Clock::now();
  const auto result = tapcli::cmd_eval(p.cfg, p.log);
  std::map<std::string, double> tap_delta, dft_delta;
  for (const auto& r : result.rows) {
    if (r.n_way != 2 || r.k_shot != 5) continue;
    if (r.method == "tap") tap_delta[r.fold] = r.delta;
    if (r.method == "decoder_ft") dft_delta[r.fold] = r.delta;
  }
  std::size_t improved = 0;
  std::ostringstream d;
  d << "tap delta per fold:";
  for (const auto& [fold, delta] : tap_delta) {
    if (fold == "all") continue;
    d << " " << fmt("%+.4f", delta);
    if (delta > 0) ++improved;
  }
  const double tap_all = tap_delta.count("all") ? tap_delta["all"] : NAN;
  const double dft_all = dft_delta.count("all") ? dft_delta["all"] : NAN;
  d << "; mean tap " << fmt("%+.4f", tap_all) << " vs decoder_ft " << fmt("%+.4f", dft_all) << "; " << improved
    << "/" << p.cfg.folds.size() << " folds improved; eval " << fmt("%.0f", seconds_since(start)) << " s";
  return {improved >= kMinFoldsImproved && tap_all >= dft_all, d.str()};
}

Verdict sweep(Pipeline& p) {
  ensure_trained(p);
  const auto result = tapcli::cmd_sweep(p.cfg, p.log);
  const std::size_t expected_rows = p.cfg.sweep_ranks.size() * (p.cfg.sweep_iterations + 1);
  std::optional<double> t0;
  bool constant = true;
  std::size_t ok_ranks = 0;
  std::set<std::size_t> ranks, iterations;
  for (const auto& r : result.rows) {
    ranks.insert(r.rank);
    iterations.insert(r.iteration);
    if (r.iteration != 0 || !r.miou) continue;
    ++ok_ranks;
    if (!t0) t0 = r.miou;
    constant = constant && *r.miou == *t0;
  }
  std::ifstream in(fs::path(p.cfg.out) / "sweep.csv");
  std::string header;
  std::getline(in, header);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  const bool schema = header == "rank,iteration,miou,trainable_params,trainable_pct,status" &&
                      lines == expected_rows && result.rows.size() == expected_rows;
  const bool grid = ranks == std::set<std::size_t>{2, 4, 8, 16, 32, 64} && iterations.size() == 9 &&
                    *iterations.rbegin() == 8;
  std::ostringstream d;
  d << result.rows.size() << " rows; t=0 " << (constant ? "constant" : "VARIES") << " across " << ok_ranks
    << " evaluated ranks (" << fmt("%.6f", t0.value_or(NAN)) << "); schema " << (schema ? "ok" : "MISMATCH");
  return {constant && schema && grid && ok_ranks > 0, d.str()};
}

Verdict oneshot(Pipeline& p) {
  ensure_trained(p);
  const auto result = tapcli::cmd_oneshot_study(p.cfg, p.log);
  std::set<std::size_t> k1_iters, k2_iters;
  bool equal = true;
  std::size_t starts = 0;
  double k1_gain = NAN, k2_gain = NAN;
  std::map<std::pair<std::size_t, std::size_t>, double> all;
  for (const auto& r : result.rows) {
    (r.k_shot == 1 ? k1_iters : k2_iters).insert(r.iteration);
    if (r.k_shot == 1 && r.iteration == 0) {
      ++starts;
      equal = equal && r.miou == r.vanilla_miou;
    }
    if (r.fold == "all") all[{r.k_shot, r.iteration}] = r.miou - r.vanilla_miou;
  }
  const std::size_t t = p.cfg.oneshot_iterations;
  if (all.count({1, t})) k1_gain = all[{1, t}];
  if (all.count({2, t})) k2_gain = all[{2, t}];
  const bool curves = k1_iters.size() == t + 1 && k2_iters.size() == t + 1;
  std::ostringstream d;
  d << "K=1 and K=2 curves " << (curves ? "present" : "MISSING") << "; K=1 t=0 equals vanilla on " << starts
    << " row(s): " << (equal ? "exact" : "NO") << "; gain at t=" << t << " K=1 " << fmt("%+.4f", k1_gain) << ", K=2 "
    << fmt("%+.4f", k2_gain);
  return {curves && equal && starts > 0, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string out = "acceptance-out";
  std::vector<int> only;
  app.add_option("--out", out, "working directory for the pipeline criteria");
  app.add_option("--only", only, "run a subset of criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  Pipeline pipeline;
  pipeline.cfg.out = out;
  pipeline.cfg.validate();
  fs::create_directories(out);
  pipeline.log.open(fs::path(out) / "acceptance.log");

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient oracle", gradient_oracle},
      {"zero-init identity", zero_init_identity},
      {"merge equivalence", merge_equivalence},
      {"parameter-count law", count_law},
      {"focal-loss oracles", focal_oracles},
      {"protocol laws", protocol_laws},
      {"trend reproduction", [&] { return trend(pipeline); }},
      {"sweep sanity", [&] { return sweep(pipeline); }},
      {"1-shot study", [&] { return oneshot(pipeline); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    if (!v.pass) ++failed;
    std::cout << (v.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << v.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
