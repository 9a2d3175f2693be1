#include "tap/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "tap/errors.hpp"
#include "tap/metrics.hpp"
#include "tap/refnet.hpp"

namespace tap {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::vector<int> episode_labels(const Episode& ep) {
  std::vector<int> labels = {0};
  for (int c : ep.foreground_labels()) labels.push_back(c);
  return labels;
}

// Frozen encoder prefixes and feature-resolution masks, computed once per
// episode.
struct EpisodeCache {
  std::vector<Tensor> support_prefix;
  std::vector<Tensor> support_masks;
  Tensor query_prefix;
};

EpisodeCache build_cache(const ModelState& model, const Episode& ep) {
  EpisodeCache cache;
  const std::size_t stride = model.config().feature_stride();
  for (const auto& s : ep.support) {
    cache.support_prefix.push_back(encoder_prefix(model, s.image));
    cache.support_masks.push_back(downsample_mask(s.mask, stride));
  }
  cache.query_prefix = encoder_prefix(model, ep.query.image);
  return cache;
}

Prediction predict_cached(const ModelState& model, const AdapterSet* adapters, const Episode& ep,
                          const EpisodeCache& cache) {
  NoGradGuard guard;
  std::vector<Tensor> feats;
  feats.reserve(cache.support_prefix.size());
  for (const auto& p : cache.support_prefix) feats.push_back(encoder_suffix(model, p, adapters));
  const auto labels = episode_labels(ep);
  const auto bank = build_prototypes(feats, cache.support_masks, labels);
  Tensor logits = segment_logits(model, encoder_suffix(model, cache.query_prefix, adapters), bank);
  Tensor mask = argmax_labels(logits, labels);
  return {std::move(mask), std::move(logits)};
}

double query_miou(const Prediction& pred, const Episode& ep) {
  const auto fg = ep.foreground_labels();
  return miou(pred.mask, ep.query.mask, fg);
}

void check_episode(const Episode& ep, const AdaptConfig& cfg) {
  if (ep.support.empty() || ep.classes.empty()) throw ContractError("episode has no support set");
  const std::size_t n = ep.support.size();
  if (cfg.iterations == 0) return;
  if (n == 1 && cfg.select.kind == SelectionStrategy::Kind::kIdentity) {
    throw ContractError(
        "a single support pair leaves no context once it becomes the pseudo-query; "
        "use replicate_support to enlarge the support set");
  }
  if (cfg.select.kind == SelectionStrategy::Kind::kRandomK && (cfg.select.k == 0 || cfg.select.k > n - 1)) {
    throw ConfigError("random_k selection needs 1 <= k <= " + std::to_string(n - 1) + " for this episode");
  }
}

// Runs the substitution loop. `pass` receives the pseudo-query index and the
// context indices and returns the pass loss after updating parameters.
template <class Pass, class Track>
void run_loop(const Episode& ep, const AdaptConfig& cfg, AdaptTrace& trace, Pass&& pass, Track&& track) {
  Rng rng(derive_seed(cfg.seed, ep.seed, 0x73656CULL));
  if (cfg.track_query_miou) trace.iteration_miou.push_back(track());
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      const auto start = Clock::now();
      const auto context = cfg.select.select(ep.support.size(), i, rng);
      Tape::current().reset();
      trace.pass_loss.push_back(pass(i, context));
      trace.pass_ms.push_back(elapsed_ms(start));
    }
    if (cfg.track_query_miou) trace.iteration_miou.push_back(track());
  }
}

// Maps each episode label to its prototype channel, or -1 when the context
// lacks that class.
std::vector<int> channel_map(std::span<const int> present, std::size_t num_labels) {
  std::vector<int> map(num_labels, -1);
  for (std::size_t c = 0; c < present.size(); ++c) map[static_cast<std::size_t>(present[c])] = static_cast<int>(c);
  return map;
}

AdaptTrace make_trace(const Episode& ep, const AdaptConfig& cfg, Method method) {
  AdaptTrace trace;
  trace.episode_id = ep.id;
  trace.method = method;
  trace.rank = method == Method::kTap ? cfg.rank : 0;
  trace.iterations = method == Method::kVanilla ? 0 : cfg.iterations;
  trace.replicated = ep.replicated;
  return trace;
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::kVanilla: return "vanilla";
    case Method::kTap: return "tap";
    case Method::kDecoderFt: return "decoder_ft";
  }
  return "vanilla";
}

Method parse_method(std::string_view s) {
  if (s == "vanilla") return Method::kVanilla;
  if (s == "tap") return Method::kTap;
  if (s == "decoder_ft") return Method::kDecoderFt;
  throw ConfigError("unknown method '" + std::string(s) + "' (expected vanilla|tap|decoder_ft)");
}

std::vector<std::size_t> SelectionStrategy::select(std::size_t support_size, std::size_t pseudo_query,
                                                   Rng& rng) const {
  std::vector<std::size_t> rest;
  for (std::size_t j = 0; j < support_size; ++j) {
    if (j != pseudo_query) rest.push_back(j);
  }
  if (kind == Kind::kIdentity || k >= rest.size()) return rest;
  rng.shuffle(rest);
  rest.resize(k);
  std::sort(rest.begin(), rest.end());
  return rest;
}

std::string SelectionStrategy::describe() const {
  return kind == Kind::kIdentity ? "identity" : "random_k(" + std::to_string(k) + ")";
}

void AdaptConfig::validate() const {
  adam.validate();
  focal.validate();
  if (method == Method::kTap && rank == 0) throw ConfigError("LoRA rank must be at least 1");
  if (!std::isfinite(alpha)) throw ConfigError("LoRA alpha must be finite");
  if (select.kind == SelectionStrategy::Kind::kRandomK && select.k == 0) {
    throw ConfigError("random_k selection needs k >= 1");
  }
}

AdaptResult adapt(const ModelState& model, const Episode& episode, const AdaptConfig& cfg) {
  cfg.validate();
  if (cfg.method == Method::kDecoderFt) return decoder_ft(model, episode, cfg);
  if (cfg.method == Method::kVanilla) {
    AdaptResult result{{model.clone(), std::nullopt}, make_trace(episode, cfg, Method::kVanilla)};
    if (cfg.track_query_miou) {
      result.trace.iteration_miou.push_back(query_miou(predict_query(result.adapted, episode), episode));
    }
    return result;
  }
  check_episode(episode, cfg);

  AdaptedModel adapted{model.clone(), std::nullopt};
  adapted.model.freeze_all();
  adapted.adapters = attach(adapted.model, policy_for(model.config().variant), cfg.rank, cfg.alpha,
                            derive_seed(cfg.seed, episode.seed));
  const ModelState& base = adapted.model;
  const AdapterSet& adapters = *adapted.adapters;
  Adam opt(adapters.trainable(), adapters.trainable_names(), cfg.adam);

  const EpisodeCache cache = build_cache(base, episode);
  const auto labels = episode_labels(episode);
  AdaptTrace trace = make_trace(episode, cfg, Method::kTap);

  auto pass = [&](std::size_t i, const std::vector<std::size_t>& context) {
    std::vector<Tensor> masks, feats;
    for (auto j : context) masks.push_back(cache.support_masks[j]);
    const auto present = present_classes(masks, labels);
    for (auto j : context) {
      if (cfg.support_grad) {
        feats.push_back(encoder_suffix(base, cache.support_prefix[j], &adapters));
      } else {
        NoGradGuard guard;
        feats.push_back(encoder_suffix(base, cache.support_prefix[j], &adapters));
      }
    }
    const auto bank = build_prototypes(feats, masks, present);
    const Tensor logits = segment_logits(base, encoder_suffix(base, cache.support_prefix[i], &adapters), bank);
    const Tensor loss = focal_loss(logits, episode.support[i].mask, cfg.focal, channel_map(present, labels.size()));
    backward(loss);
    opt.step();
    opt.zero_grad();
    return loss.item();
  };
  auto track = [&] { return query_miou(predict_cached(base, &adapters, episode, cache), episode); };
  try {
    run_loop(episode, cfg, trace, pass, track);
  } catch (...) {
    Tape::current().reset();
    throw;
  }
  return {std::move(adapted), std::move(trace)};
}

AdaptResult decoder_ft(const ModelState& model, const Episode& episode, const AdaptConfig& cfg) {
  cfg.validate();
  check_episode(episode, cfg);
  AdaptedModel adapted{model.clone(), std::nullopt};
  ModelState& m = adapted.model;
  m.freeze_all();

  const EpisodeCache cache = build_cache(m, episode);
  std::vector<Tensor> feats;
  {
    NoGradGuard guard;
    for (const auto& p : cache.support_prefix) feats.push_back(encoder_suffix(m, p));
  }
  const auto labels = episode_labels(episode);
  AdaptTrace trace = make_trace(episode, cfg, Method::kDecoderFt);

  m.set_trainable(ParamGroup::kDecoder, true);
  std::vector<std::string> names;
  for (const auto& p : m.parameters()) {
    if (p.group == ParamGroup::kDecoder) names.push_back(p.name);
  }
  Adam opt(m.group(ParamGroup::kDecoder), names, cfg.adam);

  auto pass = [&](std::size_t i, const std::vector<std::size_t>& context) {
    std::vector<Tensor> masks, ctx;
    for (auto j : context) {
      masks.push_back(cache.support_masks[j]);
      ctx.push_back(feats[j]);
    }
    const auto present = present_classes(masks, labels);
    const auto bank = build_prototypes(ctx, masks, present);
    const Tensor logits = segment_logits(m, feats[i], bank);
    const Tensor loss = focal_loss(logits, episode.support[i].mask, cfg.focal, channel_map(present, labels.size()));
    backward(loss);
    opt.step();
    opt.zero_grad();
    return loss.item();
  };
  auto track = [&] { return query_miou(predict_cached(m, nullptr, episode, cache), episode); };
  try {
    run_loop(episode, cfg, trace, pass, track);
  } catch (...) {
    Tape::current().reset();
    m.freeze_all();
    throw;
  }
  m.freeze_all();
  return {std::move(adapted), std::move(trace)};
}

Prediction predict_query(const AdaptedModel& model, const Episode& episode) {
  if (episode.support.empty()) throw ContractError("episode has no support set");
  const EpisodeCache cache = build_cache(model.model, episode);
  return predict_cached(model.model, model.adapters ? &*model.adapters : nullptr, episode, cache);
}

std::size_t trainable_parameters(const ModelState& model, const AdaptConfig& cfg) {
  switch (cfg.method) {
    case Method::kVanilla: return 0;
    case Method::kDecoderFt: return model.group_parameters(ParamGroup::kDecoder);
    case Method::kTap: {
      const auto policy = policy_for(model.config().variant);
      const auto adapters = attach(model, policy, cfg.rank, cfg.alpha, 0);
      return count_trainable(adapters, model.total_parameters()).parameters;
    }
  }
  return 0;
}

}  // namespace tap
