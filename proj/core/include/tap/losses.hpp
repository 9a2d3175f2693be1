#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "tap/tensor.hpp"

namespace tap {

enum class WeightMode { kInverseLogFrequency, kUniform };

std::string_view to_string(WeightMode m);
WeightMode parse_weight_mode(std::string_view s);

struct FocalConfig {
  double gamma = 2.0;
  WeightMode weight_mode = WeightMode::kInverseLogFrequency;

  void validate() const;
};

// Per-class pixel counts of one ground-truth mask (background included)
// and the derived class weights.
struct ClassFrequencyTable {
  std::vector<std::size_t> counts;
  std::vector<double> weights;

  std::vector<double> fractions() const;
};

/// Bounds of the inverse-log-frequency weights: 1/ln(2.1) and 1/ln(1.1).
double min_class_weight();
double max_class_weight();

/// Mask values must be integers in [0, num_classes); throws DataError otherwise.
ClassFrequencyTable class_frequencies(const Tensor& mask, std::size_t num_classes,
                                      WeightMode mode = WeightMode::kInverseLogFrequency);

/// w_t = 1 / ln(1.1 + Y_t / sum_i Y_i) for t in [0, num_classes).
std::vector<double> class_weights(const Tensor& mask, std::size_t num_classes);

/// Pixel-mean focal loss -w_t (1 - p_t)^gamma log(p_t) over logits
/// [(N+1) x H x W] and a class-index mask [H x W]. p_t is clamped to
/// [1e-12, 1] before the log.
Tensor focal_loss(const Tensor& logits, const Tensor& mask, const FocalConfig& cfg);

/// Variant for logits whose channels cover only some mask classes.
/// channel_of_class[t] is the logit channel of class t, or -1 to drop its
/// pixels from the mean; weights still come from the full mask over
/// channel_of_class.size() classes. Throws DataError when no pixel remains.
Tensor focal_loss(const Tensor& logits, const Tensor& mask, const FocalConfig& cfg,
                  std::span<const int> channel_of_class);

}  // namespace tap
