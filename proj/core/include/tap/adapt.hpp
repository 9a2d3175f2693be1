#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tap/adam.hpp"
#include "tap/episodes.hpp"
#include "tap/lora.hpp"
#include "tap/losses.hpp"
#include "tap/model_state.hpp"
#include "tap/random.hpp"

namespace tap {

enum class Method { kVanilla, kTap, kDecoderFt };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);

// Chooses the context supports for one pseudo-query. Identity returns every
// other support; random_k returns k of them drawn without replacement.
struct SelectionStrategy {
  enum class Kind { kIdentity, kRandomK };
  Kind kind = Kind::kIdentity;
  std::size_t k = 1;

  static SelectionStrategy identity() { return {}; }
  static SelectionStrategy random_k(std::size_t k) { return {Kind::kRandomK, k}; }

  /// Indices into the support set, ascending, never containing `pseudo_query`.
  std::vector<std::size_t> select(std::size_t support_size, std::size_t pseudo_query, Rng& rng) const;
  std::string describe() const;
};

struct AdaptConfig {
  Method method = Method::kTap;
  std::size_t iterations = 8;  // T
  std::size_t rank = 16;
  double alpha = 1.0;
  AdamConfig adam;
  SelectionStrategy select;
  FocalConfig focal;
  /// Let gradients flow through the context (prototype) branch as well as
  /// the pseudo-query branch.
  bool support_grad = true;
  /// Record query mIoU before the first and after every iteration.
  bool track_query_miou = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptTrace {
  std::string episode_id;
  Method method = Method::kVanilla;
  std::size_t rank = 0;
  std::size_t iterations = 0;
  std::vector<double> pass_loss;
  std::vector<double> pass_ms;
  std::vector<double> iteration_miou;  // entry t is the query mIoU after t iterations
  bool replicated = false;

  std::size_t passes() const { return pass_loss.size(); }
};

struct AdaptedModel {
  ModelState model;
  std::optional<AdapterSet> adapters;
};

struct AdaptResult {
  AdaptedModel adapted;
  AdaptTrace trace;
};

struct Prediction {
  Tensor mask;    // [H x W] episode labels
  Tensor logits;  // [(N+1) x H x W]
};

/// Test-time adaptation of fresh LoRA adapters on the support set: each
/// support plays pseudo-query once per iteration against prototypes from
/// the selected context, with only adapter parameters updated. The input
/// model is never modified. With method = vanilla no training happens;
/// decoder_ft is forwarded to decoder_ft().
AdaptResult adapt(const ModelState& model, const Episode& episode, const AdaptConfig& cfg);

/// Same episodic loop, training only the decoder projection and
/// temperature with the encoder frozen.
AdaptResult decoder_ft(const ModelState& model, const Episode& episode, const AdaptConfig& cfg);

/// Encodes the query and every support with the (possibly adapted)
/// encoder, builds prototypes from the full support set and labels each
/// query pixel by argmax.
Prediction predict_query(const AdaptedModel& model, const Episode& episode);

/// Number of trainable parameters the method updates for this model.
std::size_t trainable_parameters(const ModelState& model, const AdaptConfig& cfg);

}  // namespace tap
