#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tap/synth.hpp"
#include "tap/tensor.hpp"

namespace tap {

struct LabeledImage {
  Tensor image;  // [3 x H x W]
  Tensor mask;   // [H x W], episode labels: 0 background, 1..N episode classes
};

// One N-way K-shot task. Support entries are grouped by class: the first K
// belong to classes[0], the next K to classes[1], and so on.
struct Episode {
  std::string id;
  std::vector<int> classes;  // global class ids of the N sampled classes
  std::vector<LabeledImage> support;
  LabeledImage query;
  std::uint64_t seed = 0;
  bool replicated = false;

  std::size_t ways() const { return classes.size(); }
  std::size_t shots() const { return classes.empty() ? 0 : support.size() / classes.size(); }
  /// Episode labels 1..N.
  std::vector<int> foreground_labels() const;
};

enum class QueryPresence { kAll, kSubset };

std::string_view to_string(QueryPresence p);
QueryPresence parse_query_presence(std::string_view s);

struct EpisodeSpec {
  std::size_t n_way = 2;
  std::size_t k_shot = 5;
  std::size_t image_size = 32;
  QueryPresence presence = QueryPresence::kAll;
  double distractor_prob = 0.5;
};

// Scene-level description of an episode, before rendering.
struct ScenePlan {
  std::vector<int> class_ids;
  std::uint64_t seed = 0;
};

struct EpisodePlan {
  std::vector<int> classes;
  std::vector<ScenePlan> support;
  ScenePlan query;
  std::uint64_t seed = 0;
};

/// Draws N classes without replacement from `pool`, K single-target support
/// scenes per class and a query with the configured classes present.
/// Distractor objects come from `distractors` minus the episode classes.
EpisodePlan plan_episode(std::span<const int> pool, std::span<const int> distractors, const EpisodeSpec& spec,
                         std::uint64_t seed);

/// Evaluation episode over the fold's novel classes.
EpisodePlan plan_eval_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed);
/// Meta-training episode; only base classes ever appear in it.
EpisodePlan plan_training_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed);

synth::Scene render(const ScenePlan& plan, std::size_t image_size);

/// Converts global-id scene masks to episode labels and packs the episode.
Episode assemble(const EpisodePlan& plan, std::span<const synth::Scene> support, const synth::Scene& query,
                 std::string id = {});

Episode sample_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed);
Episode sample_training_episode(const synth::FoldSplit& split, const EpisodeSpec& spec, std::uint64_t seed);

/// Each support pair repeated `copies` times in place (s0, s0, s1, s1, ...).
Episode replicate_support(const Episode& episode, std::size_t copies);

/// Global class id mask -> episode labels (non-episode classes become 0).
Tensor to_episode_labels(const Tensor& global_mask, std::span<const int> classes);

}  // namespace tap
