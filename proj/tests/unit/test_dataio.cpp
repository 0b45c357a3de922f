// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "meds/error.hpp"
#include "meds/binary_io.hpp"
#include "meds/dataio.hpp"
#include "test_support.hpp"

namespace meds {
namespace {

SynthSpec small_spec(std::uint64_t seed) {
  SynthSpec s;
  s.classes = 1;
  s.images_per_class = 50;
  s.height = 8;
  s.width = 8;
  s.channels = 4;
  s.seed = seed;
  return s;
}

double brute_nn(std::span<const double> q, const std::vector<std::vector<double>>& pool) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& v : pool) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) s += (q[c] - v[c]) * (q[c] - v[c]);
    best = std::min(best, std::sqrt(s));
  }
  return best;
}

TEST(PatchFeatureMap, ValidateRejectsBadShapesAndValues) {
  PatchFeatureMap img(2, 2, 3);
  EXPECT_NO_THROW(img.validate());
  img.values.pop_back();
  EXPECT_THROW(img.validate(), ContractError);
  img.values.push_back(std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(img.validate(), ContractError);
  img.values.back() = std::numeric_limits<double>::infinity();
  EXPECT_THROW(img.validate(), ContractError);
  EXPECT_THROW(PatchFeatureMap(1, 1, 1, {std::numeric_limits<double>::quiet_NaN()}), ContractError);
}

TEST(FeatureDataset, NoiseRatioIsExactCount) {
  auto ds = testing::random_dataset(9, 1, 2, 2, 2, 1);
  const auto ones = std::count(ds.truth_labels->begin(), ds.truth_labels->end(), 1);
  EXPECT_DOUBLE_EQ(ds.noise_ratio(), static_cast<double>(ones) / 9.0);
  EXPECT_EQ(ds.indices_of_class(0).size(), 9u);
  EXPECT_THROW(ds.indices_of_class(4), LookupError);
}

TEST(FeatureDataset, ValidateEnforcesMaskConsistency) {
  auto ds = testing::random_dataset(6, 2, 2, 2, 2, 3);
  EXPECT_NO_THROW(ds.validate());
  (*ds.pixel_masks)[0][0] = 1;  // label 0 with a nonempty mask
  EXPECT_THROW(ds.validate(), ContractError);
}

TEST(FeatureDataset, ValidateRequiresSharedShapeWithinClass) {
  auto ds = testing::random_dataset(4, 1, 2, 2, 2, 3, false);
  ds.images[1] = PatchFeatureMap(3, 2, 2);
  EXPECT_THROW(ds.validate(), ContractError);
}

TEST(Synthetic, DeterministicInSeed) {
  const auto a = generate_synthetic_dataset(small_spec(7));
  const auto b = generate_synthetic_dataset(small_spec(7));
  EXPECT_EQ(a.clean, b.clean);
  EXPECT_EQ(a.anomaly_pool, b.anomaly_pool);
  const auto c = generate_synthetic_dataset(small_spec(8));
  EXPECT_NE(a.clean, c.clean);
}

TEST(Synthetic, ShapesLabelsAndMasks) {
  SynthSpec s = small_spec(2);
  s.classes = 3;
  s.images_per_class = 5;
  const auto out = generate_synthetic_dataset(s);
  EXPECT_EQ(out.clean.size(), 15u);
  EXPECT_EQ(out.anomaly_pool.size(), 15u);
  for (std::size_t i = 0; i < out.clean.size(); ++i) {
    EXPECT_EQ((*out.clean.truth_labels)[i], 0);
    EXPECT_EQ(std::count((*out.clean.pixel_masks)[i].begin(), (*out.clean.pixel_masks)[i].end(), 1), 0);
  }
  for (std::size_t i = 0; i < out.anomaly_pool.size(); ++i) {
    EXPECT_EQ((*out.anomaly_pool.truth_labels)[i], 1);
    const auto& m = (*out.anomaly_pool.pixel_masks)[i];
    const auto area = std::count(m.begin(), m.end(), 1);
    EXPECT_GE(area, 4);
    EXPECT_LE(area, 9);
  }
  EXPECT_NO_THROW(out.clean.validate());
  EXPECT_NO_THROW(out.anomaly_pool.validate());
  EXPECT_EQ(out.clean.classes(), (std::vector<std::uint32_t>{0, 1, 2}));
}

TEST(Synthetic, ZeroShiftIsAccepted) {
  SynthSpec s = small_spec(3);
  s.anomaly_shift = 0.0;
  EXPECT_NO_THROW(generate_synthetic_dataset(s));
}

TEST(Synthetic, InvalidSpecsRejected) {
  SynthSpec s = small_spec(3);
  s.region_max = 9;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec(3);
  s.region_min = 3;
  s.region_max = 2;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec(3);
  s.classes = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec(3);
  s.anomaly_shift = -1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Synthetic, AnomalousPatchesAreFartherFromCleanPool) {
  SynthSpec s = small_spec(11);
  s.images_per_class = 20;
  s.anomaly_shift = 10.0 * s.cluster_spread;
  const auto out = generate_synthetic_dataset(s);
  // Reference pool: first 15 clean images; held-out normals: the rest.
  std::vector<std::vector<double>> pool;
  for (std::size_t i = 0; i < 15; ++i) {
    const auto& img = out.clean.images[i];
    for (std::size_t p = 0; p < img.patch_count(); ++p) pool.emplace_back(img.patch(p).begin(), img.patch(p).end());
  }
  double normal_sum = 0.0, anomaly_sum = 0.0;
  std::size_t normal_n = 0, anomaly_n = 0;
  for (std::size_t i = 15; i < 20; ++i) {
    const auto& img = out.clean.images[i];
    for (std::size_t p = 0; p < img.patch_count(); ++p, ++normal_n) normal_sum += brute_nn(img.patch(p), pool);
  }
  for (std::size_t i = 0; i < out.anomaly_pool.size(); ++i) {
    const auto& img = out.anomaly_pool.images[i];
    const auto& m = (*out.anomaly_pool.pixel_masks)[i];
    for (std::size_t p = 0; p < img.patch_count(); ++p) {
      if (!m[p]) continue;
      anomaly_sum += brute_nn(img.patch(p), pool);
      ++anomaly_n;
    }
  }
  EXPECT_GT(anomaly_sum / static_cast<double>(anomaly_n), normal_sum / static_cast<double>(normal_n));
}

TEST(Injection, ZeroRatioIsIdentity) {
  const auto out = generate_synthetic_dataset(small_spec(1));
  EXPECT_EQ(inject_contamination(out.clean, out.anomaly_pool, 0.0, 5), out.clean);
}

TEST(Injection, FortyPercentOfSixtyAddsForty) {
  SynthSpec s = small_spec(4);
  s.classes = 2;
  s.images_per_class = 60;
  const auto out = generate_synthetic_dataset(s);
  const auto mixed = inject_contamination(out.clean, out.anomaly_pool, 0.4, 9);
  EXPECT_EQ(mixed.size(), 200u);
  for (std::uint32_t c : {0u, 1u}) {
    std::size_t total = 0, anomalies = 0;
    for (std::size_t i = 0; i < mixed.size(); ++i) {
      if (mixed.class_ids[i] != c) continue;
      ++total;
      anomalies += (*mixed.truth_labels)[i];
    }
    EXPECT_EQ(total, 100u);
    EXPECT_EQ(anomalies, 40u);
  }
  EXPECT_DOUBLE_EQ(mixed.noise_ratio(), 0.4);
  EXPECT_NO_THROW(mixed.validate());
}

TEST(Injection, DeterministicAndStratified) {
  SynthSpec s = small_spec(5);
  s.classes = 3;
  s.images_per_class = 37;
  const auto out = generate_synthetic_dataset(s);
  for (double ratio : {0.1, 0.2, 0.25, 0.4}) {
    const auto a = inject_contamination(out.clean, out.anomaly_pool, ratio, 17);
    const auto b = inject_contamination(out.clean, out.anomaly_pool, ratio, 17);
    EXPECT_EQ(a, b);
    for (std::uint32_t c = 0; c < 3; ++c) {
      std::size_t total = 0, anomalies = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.class_ids[i] != c) continue;
        ++total;
        anomalies += (*a.truth_labels)[i];
      }
      const double class_ratio = static_cast<double>(anomalies) / static_cast<double>(total);
      EXPECT_LE(std::abs(class_ratio - ratio), 1.0 / static_cast<double>(total)) << ratio;
    }
  }
}

TEST(Injection, InjectedImagesComeFromThePool) {
  const auto out = generate_synthetic_dataset(small_spec(6));
  const auto mixed = inject_contamination(out.clean, out.anomaly_pool, 0.1, 3);
  for (std::size_t i = out.clean.size(); i < mixed.size(); ++i) {
    const bool found = std::any_of(out.anomaly_pool.images.begin(), out.anomaly_pool.images.end(),
                                   [&](const PatchFeatureMap& p) { return p == mixed.images[i]; });
    EXPECT_TRUE(found);
  }
}

TEST(Injection, InsufficientPoolThrows) {
  SynthSpec s = small_spec(6);
  s.images_per_class = 10;
  const auto out = generate_synthetic_dataset(s);
  try {
    inject_contamination(out.clean, out.anomaly_pool, 0.9, 1);
    FAIL() << "expected an insufficient-pool error";
  } catch (const InsufficientPoolError& e) {
    EXPECT_EQ(std::string(e.kind()), "insufficient-pool");
  }
  EXPECT_THROW(inject_contamination(out.clean, out.anomaly_pool, 1.0, 1), ConfigError);
}

TEST(PatchPool, CountingAndOrder) {
  FeatureDataset ds;
  for (int i = 0; i < 2; ++i) {
    PatchFeatureMap img(2, 2, 2);
    for (std::size_t k = 0; k < img.values.size(); ++k) img.values[k] = 10.0 * i + static_cast<double>(k);
    ds.images.push_back(img);
    ds.class_ids.push_back(0);
  }
  const PatchPool pool = pool_patch_features(ds, 0);
  ASSERT_EQ(pool.size(), 8u);
  EXPECT_EQ(pool.dim, 2u);
  EXPECT_EQ(pool.features.size(), 16u);
  EXPECT_EQ(pool.refs[5], (PatchRef{1, 0, 1}));
  EXPECT_EQ(pool.vector(5)[0], 12.0);
  EXPECT_EQ(pool.vector(5)[1], 13.0);
}

TEST(PatchPool, SinglePatchAndRegroupRoundTrip) {
  FeatureDataset one;
  one.images.push_back(PatchFeatureMap(1, 1, 3, {1.0, 2.0, 3.0}));
  one.class_ids.push_back(4);
  const PatchPool p1 = pool_patch_features(one, 4);
  ASSERT_EQ(p1.size(), 1u);
  EXPECT_EQ(std::vector<double>(p1.vector(0).begin(), p1.vector(0).end()), one.images[0].values);

  const auto ds = testing::random_dataset(7, 2, 3, 2, 4, 12, false);
  const PatchPool pool = pool_patch_features(ds, 1);
  std::map<std::size_t, PatchFeatureMap> rebuilt;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const PatchRef r = pool.refs[i];
    auto [it, inserted] = rebuilt.try_emplace(r.image, 3, 2, 4);
    auto dst = it->second.patch(std::size_t{r.h} * 2 + r.w);
    std::copy(pool.vector(i).begin(), pool.vector(i).end(), dst.begin());
  }
  ASSERT_EQ(rebuilt.size(), ds.indices_of_class(1).size());
  for (const auto& [idx, img] : rebuilt) EXPECT_EQ(img, ds.images[idx]);
}

TEST(Splits, SplitPerClassAndConcat) {
  const auto ds = testing::random_dataset(10, 2, 2, 2, 2, 21);
  const auto [left, right] = split_per_class(ds, 2);
  EXPECT_EQ(left.size(), 4u);
  EXPECT_EQ(right.size(), 6u);
  EXPECT_EQ(left.images[0], ds.images[0]);
  EXPECT_EQ(left.images[1], ds.images[1]);
  const auto joined = concat(left, right);
  EXPECT_EQ(joined.size(), 10u);
  ASSERT_TRUE(joined.truth_labels.has_value());
  const std::vector<std::size_t> idx{3, 1};
  const auto sub = subset(ds, idx);
  EXPECT_EQ(sub.images[0], ds.images[3]);
  EXPECT_EQ((*sub.truth_labels)[1], (*ds.truth_labels)[1]);
}

TEST(FeatureFile, EmptyDatasetRoundTrips) {
  FeatureDataset empty;
  const auto bytes = encode_feature_file(empty);
  EXPECT_EQ(bytes.size(), 4u + 2 + 2 + 8 + 12);
  EXPECT_EQ(decode_feature_file(bytes), empty);
}

TEST(FeatureFile, ByteExactRoundTripWithLabelsAndMasks) {
  SynthSpec s = small_spec(13);
  s.classes = 2;
  s.images_per_class = 6;
  const auto out = generate_synthetic_dataset(s);
  const auto mixed = inject_contamination(out.clean, out.anomaly_pool, 0.25, 2);
  const auto dir = testing::scratch_dir("featurefile");
  write_feature_file(mixed, dir / "train.meds");
  const auto back = read_feature_file(dir / "train.meds");
  EXPECT_EQ(back, mixed);
  EXPECT_EQ(encode_feature_file(back), binio::read_file(dir / "train.meds"));
}

TEST(FeatureFile, HeaderLayout) {
  FeatureDataset ds;
  ds.images.push_back(PatchFeatureMap(1, 2, 1, {0.5, -2.0}));
  ds.class_ids.push_back(3);
  ds.truth_labels = std::vector<std::uint8_t>{1};
  ds.pixel_masks = std::vector<Mask>{{0, 1}};
  const auto bytes = encode_feature_file(ds);
  ASSERT_EQ(bytes.size(), 4u + 2 + 2 + 8 + 12 + 4 + 8 + 1 + 2);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MEDS");
  EXPECT_EQ(bytes[4], 1);  // version
  EXPECT_EQ(bytes[6], 3);  // labels | masks
  EXPECT_EQ(bytes[8], 1);  // N
  EXPECT_EQ(bytes[28], 3); // class id
  EXPECT_EQ(bytes[40], 1); // label
  EXPECT_EQ(bytes[42], 1); // second mask byte
}

TEST(FeatureFile, CorruptionIsReportedNotCrashing) {
  const auto ds = testing::random_dataset(3, 1, 2, 2, 2, 4);
  // f32 narrowing: compare on the decoded copy.
  const auto good = encode_feature_file(ds);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  try {
    decode_feature_file(bad_magic);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.code(), ParseErrorCode::kBadMagic);
  }

  auto bad_version = good;
  bad_version[4] = 9;
  try {
    decode_feature_file(bad_version);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.code(), ParseErrorCode::kVersionMismatch);
  }

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() - 1}) {
    const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    try {
      decode_feature_file(truncated);
      FAIL() << cut;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.code(), ParseErrorCode::kTruncated) << cut;
    }
  }

  auto huge = good;
  for (int i = 0; i < 8; ++i) huge[8 + i] = 0xFF;  // N = 2^64 - 1
  try {
    decode_feature_file(huge);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.code(), ParseErrorCode::kDimensionOverflow);
  }

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_feature_file(trailing), ParseError);

  auto bad_label = good;
  // labels start after header (28) + ids (12) + payload (3 * 8 * 4)
  bad_label[28 + 12 + 96] = 7;
  EXPECT_THROW(decode_feature_file(bad_label), ParseError);
}

TEST(FeatureFile, Float32RoundTripOfGeneratedValuesIsExact) {
  const auto out = generate_synthetic_dataset(small_spec(99));
  EXPECT_EQ(decode_feature_file(encode_feature_file(out.anomaly_pool)), out.anomaly_pool);
}

}  // namespace
}  // namespace meds
