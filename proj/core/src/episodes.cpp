#include "tap/episodes.hpp"

#include <algorithm>
#include <string>

#include "tap/errors.hpp"
#include "tap/random.hpp"

namespace tap {

namespace {

std::vector<int> without(std::span<const int> from, std::span<const int> remove) {
  std::vector<int> out;
  for (int c : from) {
    if (std::find(remove.begin(), remove.end(), c) == remove.end()) out.push_back(c);
  }
  return out;
}

std::vector<int> all_classes() {
  std::vector<int> out;
  for (int id = 1; id <= synth::kNumClasses; ++id) out.push_back(id);
  return out;
}

}  // namespace

std::vector<int> Episode::foreground_labels() const {
  std::vector<int> out(classes.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(i) + 1;
  return out;
}

std::string_view to_string(QueryPresence p) { return p == QueryPresence::kAll ? "all" : "subset"; }

QueryPresence parse_query_presence(std::string_view s) {
  if (s == "all") return QueryPresence::kAll;
  if (s == "subset") return QueryPresence::kSubset;
  throw ConfigError("unknown query presence policy '" + std::string(s) + "' (expected all|subset)");
}

EpisodePlan plan_episode(std::span<const int> pool, std::span<const int> distractors, const EpisodeSpec& spec,
                         std::uint64_t seed) {
  if (spec.n_way == 0) throw DataError("episode needs at least one way");
  if (spec.k_shot == 0) throw DataError("episode needs at least one shot");
  if (spec.n_way > pool.size()) {
    throw DataError("cannot sample " + std::to_string(spec.n_way) + " ways from " + std::to_string(pool.size()) +
                    " classes");
  }
  Rng rng(derive_seed(seed, 0x65706973ULL));
  std::vector<int> candidates(pool.begin(), pool.end());
  rng.shuffle(candidates);

  EpisodePlan plan;
  plan.seed = seed;
  plan.classes.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(spec.n_way));
  const auto extra = without(distractors, plan.classes);
  auto scene_with = [&](std::vector<int> ids) {
    if (!extra.empty() && rng.bernoulli(spec.distractor_prob)) ids.push_back(extra[rng.index(extra.size())]);
    return ScenePlan{std::move(ids), rng.next()};
  };
  for (int cls : plan.classes) {
    for (std::size_t k = 0; k < spec.k_shot; ++k) plan.support.push_back(scene_with({cls}));
  }
  std::vector<int> present = plan.classes;
  if (spec.presence == QueryPresence::kSubset) {
    rng.shuffle(present);
    present.resize(rng.index(spec.n_way + 1));
  }
  plan.query = scene_with(present);
  return plan;
}

EpisodePlan plan_eval_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed) {
  const auto everything = all_classes();
  return plan_episode(split.novel, everything, spec, seed);
}

EpisodePlan plan_training_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed) {
  return plan_episode(split.base, split.base, spec, seed);
}

synth::Scene render(const ScenePlan& plan, std::size_t image_size) {
  return synth::render_scene(plan.class_ids, image_size, image_size, plan.seed);
}

Tensor to_episode_labels(const Tensor& global_mask, std::span<const int> classes) {
  std::vector<double> out(global_mask.size(), 0.0);
  const auto mv = global_mask.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (mv[i] == static_cast<double>(classes[c])) {
        out[i] = static_cast<double>(c + 1);
        break;
      }
    }
  }
  return Tensor(global_mask.shape(), std::move(out));
}

Episode assemble(const EpisodePlan& plan, std::span<const synth::Scene> support, const synth::Scene& query,
                 std::string id) {
  if (support.size() != plan.support.size()) throw DataError("episode support does not match its plan");
  Episode ep;
  ep.id = std::move(id);
  ep.classes = plan.classes;
  ep.seed = plan.seed;
  for (const auto& s : support) ep.support.push_back({s.image, to_episode_labels(s.mask, plan.classes)});
  ep.query = {query.image, to_episode_labels(query.mask, plan.classes)};
  // Every sampled class must be labelled somewhere in the support set.
  for (std::size_t c = 0; c < plan.classes.size(); ++c) {
    const double label = static_cast<double>(c + 1);
    const bool seen = std::any_of(ep.support.begin(), ep.support.end(), [&](const LabeledImage& s) {
      return std::find(s.mask.data().begin(), s.mask.data().end(), label) != s.mask.data().end();
    });
    if (!seen) throw DataError("class " + std::to_string(plan.classes[c]) + " has no labelled support pixel");
  }
  return ep;
}

namespace {

Episode realize(const EpisodePlan& plan, std::size_t image_size) {
  std::vector<synth::Scene> support;
  support.reserve(plan.support.size());
  for (const auto& s : plan.support) support.push_back(render(s, image_size));
  return assemble(plan, support, render(plan.query, image_size), "seed-" + std::to_string(plan.seed));
}

}  // namespace

Episode sample_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed) {
  return realize(plan_eval_episode(split, spec, seed), spec.image_size);
}

Episode sample_training_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed) {
  return realize(plan_training_episode(split, spec, seed), spec.image_size);
}

Episode replicate_support(const Episode& episode, std::size_t copies) {
  if (copies == 0) throw ContractError("replicate_support: copies must be at least 1");
  if (copies == 1) return episode;
  Episode out = episode;
  out.support.clear();
  for (const auto& s : episode.support) {
    for (std::size_t c = 0; c < copies; ++c) out.support.push_back(s);
  }
  out.replicated = true;
  return out;
}

}  // namespace tap
