#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tap/episodes.hpp"
#include "tapcli/config.hpp"

namespace tapcli {

struct SampleRecord {
  std::string id;
  std::string image;  // paths relative to the fold directory
  std::string mask;
  std::vector<int> class_ids;
  std::uint64_t seed = 0;
};

struct EpisodeRecord {
  std::string id;
  int fold = 0;
  ShotSetting shot{};
  std::size_t run = 0;
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::vector<int> classes;
  std::vector<std::string> support;  // sample ids
  std::string query;
};

// How many runs x episodes gen-data materializes for one (N, K) setting.
struct EpisodeQuota {
  std::size_t runs = 0;
  std::size_t episodes = 0;
};
std::map<ShotSetting, EpisodeQuota> episode_quotas(const RunConfig& cfg);

std::uint64_t episode_seed(const RunConfig& cfg, int fold, ShotSetting shot, std::size_t run, std::size_t index);
std::string episode_file_name(ShotSetting shot);

struct GenSummary {
  std::map<int, std::size_t> samples_per_fold;
  std::map<int, std::size_t> episodes_per_fold;
  std::string table;  // human-readable class/fold table
};

/// Renders every sample and writes TAPT tensors plus line-delimited
/// manifests under cfg.data_dir(). Throws DataError when the directory is
/// not empty and `force` is false.
GenSummary generate_dataset(const RunConfig& cfg, bool force);

class Dataset {
 public:
  /// Throws DataError when no dataset exists at `data_dir`.
  static Dataset open(const std::filesystem::path& data_dir);

  const std::filesystem::path& root() const { return root_; }
  std::vector<int> folds() const { return folds_; }

  /// Episode records of one fold and setting, in (run, index) order.
  std::vector<EpisodeRecord> episodes(int fold, ShotSetting shot) const;

  /// Loads the tensors of an episode and converts masks to episode labels.
  tap::Episode load(const EpisodeRecord& rec) const;

 private:
  std::filesystem::path root_;
  std::vector<int> folds_;
};

std::string class_table();

}  // namespace tapcli
