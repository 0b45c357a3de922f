// SPDX-License-Identifier: Apache-2.0

#include "meds/memory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "meds/binary_io.hpp"
#include "meds/error.hpp"

namespace meds {

namespace {

constexpr std::uint16_t kScoreCacheVersion = 1;

// Slack for products like 0.3 * 10 that land just above an integer.
constexpr double kCountSlack = 1e-9;

}  // namespace

const std::vector<MemoryBank>& MemoryEnsemble::banks_of(std::uint32_t class_id) const {
  auto it = banks.find(class_id);
  if (it == banks.end()) {
    throw LookupError("memory ensemble has no banks for class " + std::to_string(class_id));
  }
  return it->second;
}

double nn_distance(std::span<const double> query, const MemoryBank& bank) {
  if (query.size() != bank.dim) {
    throw ContractError("query dimension " + std::to_string(query.size()) +
                        " does not match bank dimension " + std::to_string(bank.dim));
  }
  const std::size_t n = bank.size();
  if (n == 0) throw ContractError("nearest-neighbour query against an empty bank");
  const std::size_t dim = bank.dim;
  const double* data = bank.vectors.data();
  const double* q = query.data();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = data + i * dim;
    double acc = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double d = z[c] - q[c];
      acc += d * d;
    }
    best = std::min(best, acc);
  }
  return std::sqrt(best);
}

std::size_t subsample_image_count(std::size_t images, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("subsample ratio must lie in (0, 1]");
  const double exact = ratio * static_cast<double>(images);
  auto count = static_cast<std::size_t>(std::ceil(exact - kCountSlack * std::max(1.0, exact)));
  return std::clamp<std::size_t>(count, 1, images);
}

MemoryBank subsample_bank(const PatchPool& pool, double ratio, Rng& rng) {
  if (pool.image_ids.empty() || pool.size() == 0) {
    throw ContractError("cannot subsample an empty pool");
  }
  const std::size_t images = pool.image_ids.size();
  const std::size_t take = subsample_image_count(images, ratio);
  auto chosen = rng.sample_without_replacement(images, take);
  std::sort(chosen.begin(), chosen.end());

  MemoryBank bank;
  bank.dim = pool.dim;
  bank.source_class = pool.class_id;
  const std::size_t stride = pool.patches_per_image * pool.dim;
  bank.vectors.reserve(take * stride);
  for (std::size_t slot : chosen) {
    const auto first = pool.features.begin() + static_cast<std::ptrdiff_t>(slot * stride);
    bank.vectors.insert(bank.vectors.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return bank;
}

MemoryEnsemble build_ensemble(const FeatureDataset& dataset, std::size_t ensemble_size,
                              double subsample_ratio, std::uint64_t seed) {
  if (ensemble_size < 1) throw ContractError("ensemble size must be >= 1");
  if (!(subsample_ratio > 0.0 && subsample_ratio <= 1.0)) {
    throw ContractError("subsample ratio must lie in (0, 1]");
  }
  MemoryEnsemble ensemble;
  ensemble.ensemble_size = ensemble_size;
  ensemble.subsample_ratio = subsample_ratio;
  ensemble.seed = seed;
  for (std::uint32_t c : dataset.classes()) {
    const PatchPool pool = pool_patch_features(dataset, c);
    Rng rng(derive_seed(seed, c));
    auto& banks = ensemble.banks[c];
    banks.reserve(ensemble_size);
    for (std::size_t b = 0; b < ensemble_size; ++b) banks.push_back(subsample_bank(pool, subsample_ratio, rng));
  }
  return ensemble;
}

ScoreMap score_map_single(const PatchFeatureMap& image, const MemoryBank& bank) {
  ScoreMap out(image.height, image.width);
  for (std::size_t p = 0; p < image.patch_count(); ++p) out.values[p] = nn_distance(image.patch(p), bank);
  return out;
}

ScoreMap ensemble_score(const PatchFeatureMap& image, std::uint32_t class_id,
                        const MemoryEnsemble& ensemble) {
  const auto& banks = ensemble.banks_of(class_id);
  ScoreMap out(image.height, image.width);
  for (const MemoryBank& bank : banks) {
    for (std::size_t p = 0; p < image.patch_count(); ++p) out.values[p] += nn_distance(image.patch(p), bank);
  }
  const double inv = 1.0 / static_cast<double>(banks.size());
  for (double& v : out.values) v *= inv;
  return out;
}

ScoreCache cache_ensemble_scores(const FeatureDataset& dataset, const MemoryEnsemble& ensemble) {
  std::vector<ScoreMap> maps;
  maps.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    maps.push_back(ensemble_score(dataset.images[i], dataset.class_ids[i], ensemble));
  }
  return ScoreCache(std::move(maps));
}

std::vector<std::uint8_t> encode_score_cache(const ScoreCache& cache) {
  std::uint32_t h = 0, w = 0;
  if (cache.size() > 0) {
    h = cache[0].height;
    w = cache[0].width;
  }
  binio::Writer out;
  out.magic("MEDC");
  out.u16(kScoreCacheVersion);
  out.u64(cache.size());
  out.u32(h);
  out.u32(w);
  for (const ScoreMap& m : cache.maps()) {
    if (m.height != h || m.width != w) {
      throw ContractError("score cache file requires a single (H, W) across all images");
    }
    for (double v : m.values) out.f32(static_cast<float>(v));
  }
  return out.data();
}

ScoreCache decode_score_cache(std::span<const std::uint8_t> bytes) {
  binio::Reader in(bytes, "score cache");
  in.expect_magic("MEDC");
  const auto version = in.u16();
  if (version != kScoreCacheVersion) {
    throw ParseError(ParseErrorCode::kVersionMismatch,
                     "score cache: unsupported version " + std::to_string(version));
  }
  const auto n = in.u64();
  const auto h = in.u32();
  const auto w = in.u32();
  in.require(binio::checked_product({n, h, w, 4}, "score cache"));
  std::vector<ScoreMap> maps;
  maps.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ScoreMap m(h, w);
    for (double& v : m.values) v = static_cast<double>(in.f32());
    maps.push_back(std::move(m));
  }
  in.expect_end();
  return ScoreCache(std::move(maps));
}

void write_score_cache(const ScoreCache& cache, const std::filesystem::path& path) {
  binio::write_file(path, encode_score_cache(cache));
}

ScoreCache read_score_cache(const std::filesystem::path& path) {
  return decode_score_cache(binio::read_file(path));
}

}  // namespace meds
