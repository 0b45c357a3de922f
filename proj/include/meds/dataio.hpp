// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace meds {

/// One image's H x W grid of C-dimensional encoder features, row-major (h, w, c).
struct PatchFeatureMap {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<double> values;

  PatchFeatureMap() = default;
  PatchFeatureMap(std::uint32_t h, std::uint32_t w, std::uint32_t c);
  PatchFeatureMap(std::uint32_t h, std::uint32_t w, std::uint32_t c, std::vector<double> v);

  std::size_t patch_count() const { return std::size_t{height} * width; }

  std::span<const double> patch(std::size_t index) const {
    return {values.data() + index * channels, channels};
  }
  std::span<double> patch(std::size_t index) {
    return {values.data() + index * channels, channels};
  }
  std::span<const double> patch(std::uint32_t h, std::uint32_t w) const {
    return patch(std::size_t{h} * width + w);
  }

  /// Throws ContractError if the shape or the values are invalid.
  void validate() const;

  bool operator==(const PatchFeatureMap&) const = default;
};

using Mask = std::vector<std::uint8_t>;

/// A training or test collection. Truth labels and masks are evaluation-only
/// side channels; training code never reads them.
struct FeatureDataset {
  std::vector<PatchFeatureMap> images;
  std::vector<std::uint32_t> class_ids;
  std::optional<std::vector<std::uint8_t>> truth_labels;
  std::optional<std::vector<Mask>> pixel_masks;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  /// Sorted distinct class ids.
  std::vector<std::uint32_t> classes() const;
  /// Indices of the images of one class, ascending. Throws LookupError if absent.
  std::vector<std::size_t> indices_of_class(std::uint32_t class_id) const;

  /// anomalous / total; 0 for an empty dataset. Throws ContractError without labels.
  double noise_ratio() const;

  void validate() const;

  bool operator==(const FeatureDataset&) const = default;
};

/// Generator parameters for the Gaussian-mixture stand-in for encoder features.
struct SynthSpec {
  std::uint32_t classes = 1;
  std::uint32_t images_per_class = 50;
  std::uint32_t height = 8;
  std::uint32_t width = 8;
  std::uint32_t channels = 4;
  std::uint32_t cluster_count = 2;
  double cluster_spread = 0.1;
  double anomaly_shift = 1.0;
  std::uint32_t region_min = 2;
  std::uint32_t region_max = 3;
  std::uint64_t seed = 0;

  /// Throws ConfigError. anomaly_shift == 0 is accepted (degenerate but legal).
  void validate() const;
};

struct SynthOutput {
  FeatureDataset clean;
  FeatureDataset anomaly_pool;
};

/// Clean images draw every patch from the class mixture; pool images are fresh
/// clean images with one rectangle of patches redrawn from the mixture displaced
/// by `anomaly_shift` along a per-class unit direction. Values are rounded to
/// float precision so the binary format round-trips exactly.
SynthOutput generate_synthetic_dataset(const SynthSpec& spec);

/// Adds round(ratio * n / (1 - ratio)) pool anomalies to each class of n clean
/// images, sampled per class without replacement. Anomalies are appended after
/// the clean images in ascending class order.
FeatureDataset inject_contamination(const FeatureDataset& clean, const FeatureDataset& anomaly_pool,
                                    double ratio, std::uint64_t seed);

struct PatchRef {
  std::size_t image = 0;
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  bool operator==(const PatchRef&) const = default;
};

/// All patch features of one class, flattened in (image, h, w) order.
struct PatchPool {
  std::uint32_t class_id = 0;
  std::size_t dim = 0;
  std::size_t patches_per_image = 0;
  std::vector<std::size_t> image_ids;  // dataset indices, ascending
  std::vector<double> features;        // size() * dim
  std::vector<PatchRef> refs;

  std::size_t size() const { return refs.size(); }
  std::span<const double> vector(std::size_t i) const { return {features.data() + i * dim, dim}; }
};

PatchPool pool_patch_features(const FeatureDataset& dataset, std::uint32_t class_id);

/// Subset of images by index, carrying labels and masks along.
FeatureDataset subset(const FeatureDataset& dataset, std::span<const std::size_t> indices);

/// Per class, the first `count` images (dataset order) go left, the rest right.
std::pair<FeatureDataset, FeatureDataset> split_per_class(const FeatureDataset& dataset,
                                                          std::size_t count);

/// Concatenation; optional sections survive only if both sides carry them.
FeatureDataset concat(const FeatureDataset& a, const FeatureDataset& b);

/// Binary feature file ("MEDS", version 1). Features are stored as f32.
std::vector<std::uint8_t> encode_feature_file(const FeatureDataset& dataset);
FeatureDataset decode_feature_file(std::span<const std::uint8_t> bytes);

void write_feature_file(const FeatureDataset& dataset, const std::filesystem::path& path);
FeatureDataset read_feature_file(const std::filesystem::path& path);

}  // namespace meds
