// SPDX-License-Identifier: Apache-2.0

#include "meds/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "meds/binary_io.hpp"
#include "meds/error.hpp"
#include "meds/random.hpp"

namespace meds {

namespace {

constexpr std::uint16_t kFeatureFileVersion = 1;
constexpr std::uint16_t kFlagLabels = 1u << 0;
constexpr std::uint16_t kFlagMasks = 1u << 1;

double to_f32_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

PatchFeatureMap::PatchFeatureMap(std::uint32_t h, std::uint32_t w, std::uint32_t c)
    : height(h), width(w), channels(c), values(std::size_t{h} * w * c, 0.0) {}

PatchFeatureMap::PatchFeatureMap(std::uint32_t h, std::uint32_t w, std::uint32_t c,
                                 std::vector<double> v)
    : height(h), width(w), channels(c), values(std::move(v)) {
  validate();
}

void PatchFeatureMap::validate() const {
  if (height == 0 || width == 0 || channels == 0) {
    throw ContractError("feature map dimensions must be positive");
  }
  if (values.size() != std::size_t{height} * width * channels) {
    throw ContractError("feature map holds " + std::to_string(values.size()) +
                        " values, expected H*W*C = " +
                        std::to_string(std::size_t{height} * width * channels));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw ContractError("feature map contains a non-finite value");
  }
}

std::vector<std::uint32_t> FeatureDataset::classes() const {
  std::vector<std::uint32_t> out(class_ids);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::size_t> FeatureDataset::indices_of_class(std::uint32_t class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (class_ids[i] == class_id) out.push_back(i);
  }
  if (out.empty()) throw LookupError("class " + std::to_string(class_id) + " not in dataset");
  return out;
}

double FeatureDataset::noise_ratio() const {
  if (!truth_labels) throw ContractError("noise ratio requires truth labels");
  if (images.empty()) return 0.0;
  const auto anomalous = std::count(truth_labels->begin(), truth_labels->end(), std::uint8_t{1});
  return static_cast<double>(anomalous) / static_cast<double>(images.size());
}

void FeatureDataset::validate() const {
  if (class_ids.size() != images.size()) {
    throw ContractError("class_ids length does not match image count");
  }
  std::map<std::uint32_t, const PatchFeatureMap*> shape_of_class;
  for (std::size_t i = 0; i < images.size(); ++i) {
    images[i].validate();
    auto [it, inserted] = shape_of_class.emplace(class_ids[i], &images[i]);
    const PatchFeatureMap& ref = *it->second;
    if (!inserted && (ref.height != images[i].height || ref.width != images[i].width ||
                      ref.channels != images[i].channels)) {
      throw ContractError("image " + std::to_string(i) + " shape differs within class " +
                          std::to_string(class_ids[i]));
    }
  }
  if (truth_labels) {
    if (truth_labels->size() != images.size()) throw ContractError("truth_labels length mismatch");
    for (auto l : *truth_labels) {
      if (l > 1) throw ContractError("truth label must be 0 or 1");
    }
  }
  if (pixel_masks) {
    if (pixel_masks->size() != images.size()) throw ContractError("pixel_masks length mismatch");
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Mask& m = (*pixel_masks)[i];
      if (m.size() != images[i].patch_count()) {
        throw ContractError("mask " + std::to_string(i) + " does not match the H x W grid");
      }
      if (truth_labels && (*truth_labels)[i] == 0 &&
          std::any_of(m.begin(), m.end(), [](std::uint8_t b) { return b != 0; })) {
        throw ContractError("normal image " + std::to_string(i) + " has a nonempty mask");
      }
    }
  }
}

void SynthSpec::validate() const {
  if (classes < 1 || images_per_class < 1 || height < 1 || width < 1 || channels < 1 ||
      cluster_count < 1) {
    throw ConfigError("synthetic spec counts and dimensions must be >= 1");
  }
  if (!(cluster_spread >= 0.0) || !std::isfinite(cluster_spread)) {
    throw ConfigError("cluster_spread must be finite and non-negative");
  }
  if (!(anomaly_shift >= 0.0) || !std::isfinite(anomaly_shift)) {
    throw ConfigError("anomaly_shift must be finite and non-negative");
  }
  if (region_min < 1 || region_min > region_max || region_max > std::min(height, width)) {
    throw ConfigError("anomaly region must satisfy 1 <= min <= max <= min(H, W)");
  }
}

namespace {

struct ClassModel {
  std::vector<std::vector<double>> means;
  std::vector<double> direction;
};

ClassModel make_class_model(const SynthSpec& spec, Rng& rng) {
  ClassModel model;
  model.means.assign(spec.cluster_count, std::vector<double>(spec.channels));
  for (auto& mean : model.means) {
    for (double& x : mean) x = rng.normal();
  }
  model.direction.resize(spec.channels);
  double norm = 0.0;
  while (norm < 1e-6) {
    norm = 0.0;
    for (double& x : model.direction) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
  }
  for (double& x : model.direction) x /= norm;
  return model;
}

void draw_patch(const SynthSpec& spec, const ClassModel& model, double shift, Rng& rng,
                std::span<double> out) {
  const auto& mean = model.means[rng.uniform_index(model.means.size())];
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c] = to_f32_precision(mean[c] + shift * model.direction[c] +
                              spec.cluster_spread * rng.normal());
  }
}

PatchFeatureMap draw_clean_image(const SynthSpec& spec, const ClassModel& model, Rng& rng) {
  PatchFeatureMap img(spec.height, spec.width, spec.channels);
  for (std::size_t p = 0; p < img.patch_count(); ++p) draw_patch(spec, model, 0.0, rng, img.patch(p));
  return img;
}

}  // namespace

SynthOutput generate_synthetic_dataset(const SynthSpec& spec) {
  spec.validate();
  SynthOutput out;
  auto& clean = out.clean;
  auto& pool = out.anomaly_pool;
  clean.truth_labels.emplace();
  clean.pixel_masks.emplace();
  pool.truth_labels.emplace();
  pool.pixel_masks.emplace();
  const std::size_t grid = std::size_t{spec.height} * spec.width;

  for (std::uint32_t c = 0; c < spec.classes; ++c) {
    Rng model_rng(derive_seed(spec.seed, 3ULL * c));
    Rng clean_rng(derive_seed(spec.seed, 3ULL * c + 1));
    Rng pool_rng(derive_seed(spec.seed, 3ULL * c + 2));
    const ClassModel model = make_class_model(spec, model_rng);

    for (std::uint32_t i = 0; i < spec.images_per_class; ++i) {
      clean.images.push_back(draw_clean_image(spec, model, clean_rng));
      clean.class_ids.push_back(c);
      clean.truth_labels->push_back(0);
      clean.pixel_masks->emplace_back(grid, 0);
    }

    for (std::uint32_t i = 0; i < spec.images_per_class; ++i) {
      PatchFeatureMap img = draw_clean_image(spec, model, pool_rng);
      const auto span = spec.region_max - spec.region_min + 1;
      const auto rh = spec.region_min + static_cast<std::uint32_t>(pool_rng.uniform_index(span));
      const auto rw = spec.region_min + static_cast<std::uint32_t>(pool_rng.uniform_index(span));
      const auto top = static_cast<std::uint32_t>(pool_rng.uniform_index(spec.height - rh + 1));
      const auto left = static_cast<std::uint32_t>(pool_rng.uniform_index(spec.width - rw + 1));
      Mask mask(grid, 0);
      for (std::uint32_t h = top; h < top + rh; ++h) {
        for (std::uint32_t w = left; w < left + rw; ++w) {
          const std::size_t p = std::size_t{h} * spec.width + w;
          draw_patch(spec, model, spec.anomaly_shift, pool_rng, img.patch(p));
          mask[p] = 1;
        }
      }
      pool.images.push_back(std::move(img));
      pool.class_ids.push_back(c);
      pool.truth_labels->push_back(1);
      pool.pixel_masks->push_back(std::move(mask));
    }
  }
  return out;
}

FeatureDataset inject_contamination(const FeatureDataset& clean, const FeatureDataset& anomaly_pool,
                                    double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("noise ratio must lie in [0, 1)");
  clean.validate();
  if (ratio == 0.0) return clean;
  anomaly_pool.validate();

  FeatureDataset out;
  out.images = clean.images;
  out.class_ids = clean.class_ids;
  out.truth_labels = clean.truth_labels.value_or(std::vector<std::uint8_t>(clean.size(), 0));
  const bool masks = anomaly_pool.pixel_masks.has_value();
  if (masks) {
    if (clean.pixel_masks) {
      out.pixel_masks = clean.pixel_masks;
    } else {
      out.pixel_masks.emplace();
      for (const auto& img : clean.images) out.pixel_masks->emplace_back(img.patch_count(), 0);
    }
  }

  for (std::uint32_t c : clean.classes()) {
    const double n = static_cast<double>(clean.indices_of_class(c).size());
    const auto wanted = static_cast<std::size_t>(std::llround(ratio * n / (1.0 - ratio)));
    if (wanted == 0) continue;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < anomaly_pool.size(); ++i) {
      if (anomaly_pool.class_ids[i] == c) candidates.push_back(i);
    }
    if (candidates.size() < wanted) {
      throw InsufficientPoolError(c, "anomaly pool of class " + std::to_string(c) + " holds " +
                                         std::to_string(candidates.size()) + " images, " +
                                         std::to_string(wanted) + " needed");
    }
    Rng rng(derive_seed(seed, c));
    auto picks = rng.sample_without_replacement(candidates.size(), wanted);
    std::sort(picks.begin(), picks.end());
    for (std::size_t p : picks) {
      const std::size_t src = candidates[p];
      out.images.push_back(anomaly_pool.images[src]);
      out.class_ids.push_back(c);
      out.truth_labels->push_back(anomaly_pool.truth_labels ? (*anomaly_pool.truth_labels)[src] : 1);
      if (masks) out.pixel_masks->push_back((*anomaly_pool.pixel_masks)[src]);
    }
  }
  out.validate();
  return out;
}

PatchPool pool_patch_features(const FeatureDataset& dataset, std::uint32_t class_id) {
  PatchPool pool;
  pool.class_id = class_id;
  pool.image_ids = dataset.indices_of_class(class_id);
  const PatchFeatureMap& first = dataset.images[pool.image_ids.front()];
  pool.dim = first.channels;
  pool.patches_per_image = first.patch_count();
  pool.features.reserve(pool.image_ids.size() * first.values.size());
  pool.refs.reserve(pool.image_ids.size() * pool.patches_per_image);
  for (std::size_t idx : pool.image_ids) {
    const PatchFeatureMap& img = dataset.images[idx];
    if (img.channels != pool.dim || img.patch_count() != pool.patches_per_image) {
      throw ContractError("images of class " + std::to_string(class_id) + " differ in shape");
    }
    pool.features.insert(pool.features.end(), img.values.begin(), img.values.end());
    for (std::uint32_t h = 0; h < img.height; ++h) {
      for (std::uint32_t w = 0; w < img.width; ++w) pool.refs.push_back({idx, h, w});
    }
  }
  return pool;
}

FeatureDataset subset(const FeatureDataset& dataset, std::span<const std::size_t> indices) {
  FeatureDataset out;
  if (dataset.truth_labels) out.truth_labels.emplace();
  if (dataset.pixel_masks) out.pixel_masks.emplace();
  for (std::size_t i : indices) {
    if (i >= dataset.size()) throw ContractError("subset index out of range");
    out.images.push_back(dataset.images[i]);
    out.class_ids.push_back(dataset.class_ids[i]);
    if (out.truth_labels) out.truth_labels->push_back((*dataset.truth_labels)[i]);
    if (out.pixel_masks) out.pixel_masks->push_back((*dataset.pixel_masks)[i]);
  }
  return out;
}

std::pair<FeatureDataset, FeatureDataset> split_per_class(const FeatureDataset& dataset,
                                                          std::size_t count) {
  std::vector<std::size_t> left, right;
  std::map<std::uint32_t, std::size_t> seen;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto& n = seen[dataset.class_ids[i]];
    (n < count ? left : right).push_back(i);
    ++n;
  }
  return {subset(dataset, left), subset(dataset, right)};
}

FeatureDataset concat(const FeatureDataset& a, const FeatureDataset& b) {
  FeatureDataset out;
  out.images = a.images;
  out.images.insert(out.images.end(), b.images.begin(), b.images.end());
  out.class_ids = a.class_ids;
  out.class_ids.insert(out.class_ids.end(), b.class_ids.begin(), b.class_ids.end());
  if (a.truth_labels && b.truth_labels) {
    out.truth_labels = *a.truth_labels;
    out.truth_labels->insert(out.truth_labels->end(), b.truth_labels->begin(), b.truth_labels->end());
  }
  if (a.pixel_masks && b.pixel_masks) {
    out.pixel_masks = *a.pixel_masks;
    out.pixel_masks->insert(out.pixel_masks->end(), b.pixel_masks->begin(), b.pixel_masks->end());
  }
  return out;
}

std::vector<std::uint8_t> encode_feature_file(const FeatureDataset& dataset) {
  dataset.validate();
  std::uint32_t h = 0, w = 0, c = 0;
  if (!dataset.empty()) {
    h = dataset.images.front().height;
    w = dataset.images.front().width;
    c = dataset.images.front().channels;
    for (const auto& img : dataset.images) {
      if (img.height != h || img.width != w || img.channels != c) {
        throw ContractError("feature file requires a single (H, W, C) across all images");
      }
    }
  }
  std::uint16_t flags = 0;
  if (dataset.truth_labels) flags |= kFlagLabels;
  if (dataset.pixel_masks) flags |= kFlagMasks;

  binio::Writer out;
  out.magic("MEDS");
  out.u16(kFeatureFileVersion);
  out.u16(flags);
  out.u64(dataset.size());
  out.u32(h);
  out.u32(w);
  out.u32(c);
  for (auto id : dataset.class_ids) out.u32(id);
  for (const auto& img : dataset.images) {
    for (double v : img.values) out.f32(static_cast<float>(v));
  }
  if (dataset.truth_labels) {
    for (auto l : *dataset.truth_labels) out.u8(l);
  }
  if (dataset.pixel_masks) {
    for (const auto& m : *dataset.pixel_masks) out.bytes(m);
  }
  return out.data();
}

FeatureDataset decode_feature_file(std::span<const std::uint8_t> bytes) {
  binio::Reader in(bytes, "feature file");
  in.expect_magic("MEDS");
  const auto version = in.u16();
  if (version != kFeatureFileVersion) {
    throw ParseError(ParseErrorCode::kVersionMismatch,
                     "feature file: unsupported version " + std::to_string(version));
  }
  const auto flags = in.u16();
  if ((flags & ~(kFlagLabels | kFlagMasks)) != 0) {
    throw ParseError(ParseErrorCode::kMalformed, "feature file: unknown flag bits");
  }
  const auto n = in.u64();
  const auto h = in.u32();
  const auto w = in.u32();
  const auto c = in.u32();
  if (n > 0 && (h == 0 || w == 0 || c == 0)) {
    throw ParseError(ParseErrorCode::kMalformed, "feature file: zero dimension with images present");
  }
  const std::uint64_t per_image = binio::checked_product({h, w, c}, "feature file");
  const std::uint64_t grid = std::uint64_t{h} * w;
  std::uint64_t total = 0;
  auto add = [&total](std::uint64_t bytes) {
    if (bytes > ~std::uint64_t{0} - total) {
      throw ParseError(ParseErrorCode::kDimensionOverflow, "feature file: payload size overflows");
    }
    total += bytes;
  };
  add(binio::checked_product({n, 4}, "feature file"));
  add(binio::checked_product({n, per_image, 4}, "feature file"));
  if (flags & kFlagLabels) add(n);
  if (flags & kFlagMasks) add(binio::checked_product({n, grid}, "feature file"));
  in.require(total);

  FeatureDataset out;
  out.class_ids.resize(n);
  for (auto& id : out.class_ids) id = in.u32();
  out.images.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    PatchFeatureMap img(h, w, c);
    for (double& v : img.values) v = static_cast<double>(in.f32());
    out.images.push_back(std::move(img));
  }
  if (flags & kFlagLabels) {
    out.truth_labels.emplace(n);
    for (auto& l : *out.truth_labels) l = in.u8();
  }
  if (flags & kFlagMasks) {
    out.pixel_masks.emplace();
    out.pixel_masks->reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      Mask m(grid);
      for (auto& b : m) b = in.u8();
      out.pixel_masks->push_back(std::move(m));
    }
  }
  in.expect_end();
  try {
    out.validate();
  } catch (const ContractError& e) {
    throw ParseError(ParseErrorCode::kMalformed, std::string("feature file: ") + e.what());
  }
  return out;
}

void write_feature_file(const FeatureDataset& dataset, const std::filesystem::path& path) {
  binio::write_file(path, encode_feature_file(dataset));
}

FeatureDataset read_feature_file(const std::filesystem::path& path) {
  return decode_feature_file(binio::read_file(path));
}

}  // namespace meds
