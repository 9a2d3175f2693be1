#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tap/model_state.hpp"
#include "tap/tensor.hpp"

namespace tap {

// Low-rank delta for one frozen matrix W [m x n]: W' = W + alpha * A * B
// with A [m x r] and B [r x n].
struct LoraAdapter {
  std::string target_id;
  Tensor A;
  Tensor B;
  double alpha = 1.0;

  std::size_t rank() const { return A.dim(1); }
  std::size_t rows() const { return A.dim(0); }
  std::size_t cols() const { return B.dim(1); }
  std::size_t parameter_count() const { return A.size() + B.size(); }

  /// Dense alpha * A * B (no gradient tracking).
  Tensor delta() const;
};

enum class TargetingPolicy { kAttentionProjections, kPointwiseConvs };

std::string_view to_string(TargetingPolicy p);
/// The policy matching an encoder family: pointwise convs for CNNs,
/// Q/K/V/O projections for attention encoders.
TargetingPolicy policy_for(EncoderVariant v);

struct TrainableCount {
  std::size_t parameters = 0;
  double percent = 0.0;  // relative to the base model's parameter count
};

class AdapterSet {
 public:
  AdapterSet() = default;
  using Map = std::map<std::string, LoraAdapter, std::less<>>;

  AdapterSet(TargetingPolicy policy, Map adapters);

  TargetingPolicy policy() const { return policy_; }
  std::size_t size() const { return adapters_.size(); }
  bool empty() const { return adapters_.empty(); }

  /// nullptr when `target_id` carries no adapter.
  const LoraAdapter* find(std::string_view target_id) const;
  const Map& adapters() const { return adapters_; }

  /// A and B of every adapter, in target order.
  std::vector<Tensor> trainable() const;
  std::vector<std::string> trainable_names() const;

  AdapterSet clone() const;

  void save(const std::filesystem::path& dir) const;
  static AdapterSet load(const std::filesystem::path& dir);

 private:
  TargetingPolicy policy_ = TargetingPolicy::kPointwiseConvs;
  Map adapters_;
};

/// Builds one zero-delta adapter per matched layer: A ~ U(-1/sqrt(r), 1/sqrt(r)),
/// B = 0. Only A and B require gradients; the model is not modified.
/// Throws ConfigError naming the first layer where rank > min(m, n).
AdapterSet attach(const ModelState& model, TargetingPolicy policy, std::size_t rank, double alpha,
                  std::uint64_t seed);

/// Largest rank legal for every layer `policy` targets in `model`.
std::size_t max_rank(const ModelState& model, TargetingPolicy policy);

/// Row-vector convention: x [rows x m] through W [m x n] plus the adapter,
/// as x*W + alpha*((x*A)*B) without forming W'.
Tensor adapted_forward(const Tensor& x, const Tensor& W, const LoraAdapter& adapter);

/// Channel-first pointwise conv through W [C_out x C_in] plus the adapter:
/// W*x + bias + alpha*A*(B*x).
Tensor adapted_pointwise(const Tensor& x, const Tensor& W, const Tensor& bias, const LoraAdapter& adapter);

/// Dense W + alpha*A*B; W is left untouched.
Tensor merge(const Tensor& W, const LoraAdapter& adapter);
/// Inverse of merge: W' - alpha*A*B.
Tensor unmerge(const Tensor& merged, const LoraAdapter& adapter);

TrainableCount count_trainable(const AdapterSet& adapters, std::size_t model_parameters);

}  // namespace tap
