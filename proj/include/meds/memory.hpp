// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "meds/dataio.hpp"
#include "meds/random.hpp"

namespace meds {

/// A flat set of stored patch features for one class.
struct MemoryBank {
  std::size_t dim = 0;
  std::vector<double> vectors;
  std::uint32_t source_class = 0;

  std::size_t size() const { return dim == 0 ? 0 : vectors.size() / dim; }
  std::span<const double> vector(std::size_t i) const { return {vectors.data() + i * dim, dim}; }
};

/// B subsampled banks per class.
struct MemoryEnsemble {
  std::map<std::uint32_t, std::vector<MemoryBank>> banks;
  std::size_t ensemble_size = 0;
  double subsample_ratio = 1.0;
  std::uint64_t seed = 0;

  /// Throws LookupError when the class has no banks.
  const std::vector<MemoryBank>& banks_of(std::uint32_t class_id) const;
};

/// Per-patch score grid.
struct ScoreMap {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<double> values;

  ScoreMap() = default;
  ScoreMap(std::uint32_t h, std::uint32_t w) : height(h), width(w), values(std::size_t{h} * w, 0.0) {}

  std::size_t size() const { return values.size(); }
  double at(std::uint32_t h, std::uint32_t w) const { return values[std::size_t{h} * width + w]; }

  bool operator==(const ScoreMap&) const = default;
};

/// Euclidean distance from `query` to its nearest neighbour in `bank`.
double nn_distance(std::span<const double> query, const MemoryBank& bank);

/// Picks ceil(ratio * images) whole images of the pool without replacement and
/// stores all their patches.
MemoryBank subsample_bank(const PatchPool& pool, double ratio, Rng& rng);

/// Number of images a bank of the given ratio holds.
std::size_t subsample_image_count(std::size_t images, double ratio);

/// B independent banks per class; each class draws from its own seeded stream.
MemoryEnsemble build_ensemble(const FeatureDataset& dataset, std::size_t ensemble_size,
                              double subsample_ratio, std::uint64_t seed);

/// Nearest-neighbour score of every patch against a single bank.
ScoreMap score_map_single(const PatchFeatureMap& image, const MemoryBank& bank);

/// Mean over the class banks of the single-bank scores.
ScoreMap ensemble_score(const PatchFeatureMap& image, std::uint32_t class_id,
                        const MemoryEnsemble& ensemble);

/// Memory scores for every image of a dataset, computed once.
class ScoreCache {
 public:
  ScoreCache() = default;
  explicit ScoreCache(std::vector<ScoreMap> maps) : maps_(std::move(maps)) {}

  std::size_t size() const { return maps_.size(); }
  const ScoreMap& operator[](std::size_t i) const { return maps_.at(i); }
  const std::vector<ScoreMap>& maps() const { return maps_; }

 private:
  std::vector<ScoreMap> maps_;
};

ScoreCache cache_ensemble_scores(const FeatureDataset& dataset, const MemoryEnsemble& ensemble);

/// "MEDC" score-cache file: scores are stored as f32, image-major.
std::vector<std::uint8_t> encode_score_cache(const ScoreCache& cache);
ScoreCache decode_score_cache(std::span<const std::uint8_t> bytes);
void write_score_cache(const ScoreCache& cache, const std::filesystem::path& path);
ScoreCache read_score_cache(const std::filesystem::path& path);

}  // namespace meds
