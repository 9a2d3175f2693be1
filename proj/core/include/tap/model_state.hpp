#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tap/tensor.hpp"

namespace tap {

enum class EncoderVariant { kConv, kAttention };

std::string_view to_string(EncoderVariant v);
EncoderVariant parse_encoder_variant(std::string_view s);

struct ModelConfig {
  EncoderVariant variant = EncoderVariant::kConv;
  std::size_t image_size = 32;
  std::size_t channels = 32;     // conv trunk width
  std::size_t feature_dim = 32;  // encoder output channels
  std::size_t blocks = 3;
  std::size_t stride = 2;  // conv stem stride
  std::size_t patch = 4;   // attention patch size
  double tau = 10.0;
  std::uint64_t seed = 0;

  /// Spatial downsampling factor between input and features.
  std::size_t feature_stride() const { return variant == EncoderVariant::kConv ? stride : patch; }
  std::size_t feature_size() const { return image_size / feature_stride(); }
  void validate() const;
};

// Frozen parameters never train. Encoder and decoder groups are trained
// during meta-training; test-time methods pick one group (or adapters).
enum class ParamGroup { kFrozen, kEncoder, kDecoder };

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group;
};

class ModelState {
 public:
  /// Random initialization, a pure function of the config (including seed).
  static ModelState init(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  const Tensor& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  std::span<const Parameter> parameters() const { return params_; }
  std::vector<Tensor> group(ParamGroup g) const;

  /// Names of the weight matrices that receive low-rank adapters.
  const std::vector<std::string>& adapter_targets() const { return adapter_targets_; }

  std::size_t total_parameters() const;
  std::size_t group_parameters(ParamGroup g) const;

  /// Deep copy; the clone shares no storage with this instance.
  ModelState clone() const;

  /// Enables or disables requires_grad for every parameter of group g.
  void set_trainable(ParamGroup g, bool on);
  void freeze_all();

  /// Order-sensitive FNV-1a hash over the bit patterns of the parameters
  /// selected by `groups` (all of them when empty).
  std::uint64_t checksum(std::span<const ParamGroup> groups = {}) const;

  std::size_t meta_train_steps = 0;

  void save(const std::filesystem::path& dir) const;
  static ModelState load(const std::filesystem::path& dir);

 private:
  ModelState() = default;
  Tensor& add_param(std::string name, Tensor value, ParamGroup group);

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<std::string> adapter_targets_;
};

std::uint64_t checksum(std::span<const Tensor> tensors);

}  // namespace tap
