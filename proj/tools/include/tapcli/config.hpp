#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tap/adapt.hpp"
#include "tap/episodes.hpp"
#include "tap/losses.hpp"
#include "tap/model_state.hpp"
#include "tap/refnet.hpp"

namespace tapcli {

struct ShotSetting {
  std::size_t n_way;
  std::size_t k_shot;
  bool operator==(const ShotSetting&) const = default;
  auto operator<=>(const ShotSetting&) const = default;
};

// Flat `key = value` configuration. Every key has a default; see
// key_reference() for the list.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "tap-out";

  // data.*
  std::size_t image_size = 32;
  std::vector<int> folds = {0, 1, 2, 3};
  std::size_t episodes_per_fold = 50;
  std::size_t runs = 3;
  tap::QueryPresence query_presence = tap::QueryPresence::kAll;
  double distractor_prob = 0.5;

  // model.*
  tap::EncoderVariant variant = tap::EncoderVariant::kConv;
  std::size_t channels = 32;
  std::size_t feature_dim = 32;
  std::size_t blocks = 3;
  std::size_t stride = 2;
  std::size_t patch = 4;
  double tau = 10.0;

  // meta.*
  std::size_t meta_steps = 2000;
  double meta_lr = 1e-3;
  std::size_t meta_n_way = 2;
  std::size_t meta_k_shot = 2;

  // eval.*
  std::vector<tap::Method> methods = {tap::Method::kVanilla, tap::Method::kDecoderFt, tap::Method::kTap};
  std::vector<std::size_t> n_way = {2};
  std::vector<std::size_t> k_shot = {5};
  std::size_t iterations = 8;
  double gamma = 2.0;
  tap::WeightMode weight_mode = tap::WeightMode::kInverseLogFrequency;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::size_t tap_rank = 16;
  double tap_alpha = 1.0;
  double tap_lr = 1e-3;
  std::string tap_select = "identity";
  std::size_t tap_select_k = 1;
  bool tap_support_grad = true;
  double decoder_ft_lr = 1e-3;

  // sweep.*
  std::vector<std::size_t> sweep_ranks = {2, 4, 8, 16, 32, 64};
  std::size_t sweep_iterations = 8;
  std::size_t sweep_episodes = 10;
  std::size_t sweep_n_way = 2;
  std::size_t sweep_k_shot = 5;

  // oneshot.*
  std::size_t oneshot_n_way = 1;
  std::size_t oneshot_copies = 2;
  std::size_t oneshot_iterations = 8;
  std::size_t oneshot_episodes = 10;

  /// Applies one `key = value` assignment. Throws tap::ConfigError on an
  /// unknown key or a malformed or out-of-range value.
  void set(std::string_view key, std::string_view value);

  /// Cross-field checks.
  void validate() const;

  /// Legal but questionable settings (currently: a LoRA rank that is not
  /// well below the smallest adapted layer dimension).
  std::vector<std::string> warnings() const;

  /// Every key with its resolved value, in key_reference() order.
  std::vector<std::pair<std::string, std::string>> resolved() const;
  std::string to_text() const;

  tap::ModelConfig model_config(int fold) const;
  tap::EpisodeSpec episode_spec(ShotSetting s) const;
  tap::MetaTrainConfig meta_config(int fold) const;
  tap::AdaptConfig adapt_config(tap::Method m) const;

  /// Every (N, K) setting for which gen-data materializes episodes.
  std::vector<ShotSetting> shot_settings() const;
  std::vector<ShotSetting> eval_settings() const;

  std::filesystem::path out_dir() const { return out; }
  std::filesystem::path data_dir() const { return out_dir() / "data"; }
  std::filesystem::path checkpoint_dir(int fold) const;
};

struct KeyInfo {
  std::string key;
  std::string description;
};
const std::vector<KeyInfo>& key_reference();

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// ignored. Later assignments override earlier ones.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

}  // namespace tapcli
