#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tap/episodes.hpp"
#include "tap/lora.hpp"
#include "tap/losses.hpp"
#include "tap/model_state.hpp"
#include "tap/tensor.hpp"

namespace tap {

// ---- encoder -------------------------------------------------------------

/// Input-side part of the encoder that never trains (conv stem and first
/// depthwise mix, or patch extraction). Always computed without a tape so
/// callers can cache it per image.
Tensor encoder_prefix(const ModelState& model, const Tensor& image);

/// Remaining encoder layers applied to a cached prefix. Adapters, when
/// given, wrap their target layers.
Tensor encoder_suffix(const ModelState& model, const Tensor& prefix, const AdapterSet* adapters = nullptr);

/// Full encoder: [3 x H x W] -> [D x H/s x W/s]. Throws DimensionError when
/// H or W is not divisible by the feature stride.
Tensor encode(const ModelState& model, const Tensor& image, const AdapterSet* adapters = nullptr);

// ---- prototypes ----------------------------------------------------------

struct Prototype {
  int class_id;
  Tensor vector;  // [D]
};

// Prototypes packed column-wise so they stay differentiable.
struct PrototypeBank {
  std::vector<int> class_ids;
  Tensor matrix;  // [D x n]

  std::size_t size() const { return class_ids.size(); }
  std::vector<Prototype> as_list() const;
};

/// Nearest-neighbour downsampling of a label mask by an integer factor
/// (samples the centre pixel of each cell).
Tensor downsample_mask(const Tensor& mask, std::size_t factor);

/// Masked average of support features per class. `masks` are at feature
/// resolution. Throws DataError naming a class with no labelled pixel.
PrototypeBank build_prototypes(std::span<const Tensor> features, std::span<const Tensor> masks,
                               std::span<const int> classes);

/// Classes in `classes` that have at least one labelled pixel in `masks`.
std::vector<int> present_classes(std::span<const Tensor> masks, std::span<const int> classes);

// ---- decoder -------------------------------------------------------------

/// logits[c, p] = tau * cos(G f_p, G proto_c) at feature resolution,
/// one channel per prototype in bank order.
Tensor decode(const ModelState& model, const Tensor& query_features, const PrototypeBank& prototypes);

/// decode() followed by nearest upsampling back to input resolution.
Tensor segment_logits(const ModelState& model, const Tensor& query_features, const PrototypeBank& prototypes);

/// Per-pixel argmax over channels (lowest channel wins ties), mapped to
/// the bank's class ids. Returns [H x W].
Tensor argmax_labels(const Tensor& logits, std::span<const int> class_ids);

// ---- meta-training -------------------------------------------------------

struct MetaTrainConfig {
  std::size_t steps = 2000;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  FocalConfig focal;
  EpisodeSpec episode{.n_way = 2, .k_shot = 2};
};

using EpisodeSource = std::function<Episode(std::size_t step)>;

/// Trains encoder and decoder groups end-to-end on episodes from `source`
/// with Adam and the focal loss on the query. Returns the per-step loss.
/// Throws NumericalError carrying the step index if the loss goes
/// non-finite.
std::vector<double> meta_train(ModelState& model, const EpisodeSource& source, const MetaTrainConfig& cfg);

/// One forward pass of the training objective for an episode (query loss
/// against prototypes from the full support set).
Tensor episode_loss(const ModelState& model, const Episode& episode, const FocalConfig& focal,
                    const AdapterSet* adapters = nullptr);

}  // namespace tap
