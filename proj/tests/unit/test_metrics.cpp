// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>

#include "meds/error.hpp"
#include "meds/metrics.hpp"
#include "meds/random.hpp"
#include "oracles.hpp"

namespace meds::metrics {
namespace {

using namespace meds::oracles;

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.9}, std::vector<std::uint8_t>{0, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>(6, 0.3), std::vector<std::uint8_t>{0, 1, 0, 1, 1, 0}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1, 1}), UndefinedMetricError);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1}), ContractError);
}

TEST(AveragePrecision, Examples) {
  EXPECT_EQ(average_precision(std::vector<double>{0.2, 0.9}, std::vector<std::uint8_t>{1, 0}), 0.5);
  EXPECT_EQ(average_precision(std::vector<double>{3, 2, 1, 0}, std::vector<std::uint8_t>{1, 1, 0, 0}), 1.0);
  EXPECT_THROW(average_precision(std::vector<double>{1}, std::vector<std::uint8_t>{0}), UndefinedMetricError);
}

TEST(Alc, Examples) {
  std::vector<double> eta(10);
  std::vector<std::uint8_t> y(10, 0);
  for (std::size_t i = 0; i < 10; ++i) eta[i] = static_cast<double>(10 - i);
  y[9] = 1;  // ranked last
  EXPECT_DOUBLE_EQ(alc_auprc(eta, y), 0.1);
  EXPECT_EQ(inspection_depth(eta, y), 1.0);
  y = {1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(alc_auprc(eta, y), 1.0);
  EXPECT_DOUBLE_EQ(inspection_depth(eta, y), 0.3);
  const std::vector<double> five{5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(inspection_depth(five, std::vector<std::uint8_t>{1, 0, 1, 0, 0}), 0.6);
  EXPECT_THROW(inspection_depth(five, std::vector<std::uint8_t>(5, 0)), UndefinedMetricError);
}

TEST(RankingMetrics, MatchBruteForceOracles) {
  Rng rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rng.uniform_index(99);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    const bool coarse = rep % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(rng.uniform_index(5)) : rng.normal();
      y[i] = rng.uniform() < 0.3 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(auroc(s, y), brute_auroc(s, y), 1e-12);
    EXPECT_NEAR(average_precision(s, y), brute_ap(s, y), 1e-12);
    EXPECT_NEAR(alc_auprc(s, y), brute_ap(s, y), 1e-12);
    EXPECT_NEAR(inspection_depth(s, y), brute_depth(s, y), 1e-12);
  }
}

TEST(RankingMetrics, InvariantUnderMonotoneTransforms) {
  Rng rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 5 + rng.uniform_index(40);
    std::vector<double> s(n), t(n), neg(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.normal();
      t[i] = std::exp(3.0 * s[i]) + 1.0;
      neg[i] = -s[i];
      y[i] = i % 3 == 0;
    }
    EXPECT_NEAR(auroc(s, y), auroc(t, y), 1e-12);
    EXPECT_NEAR(average_precision(s, y), average_precision(t, y), 1e-12);
    EXPECT_NEAR(inspection_depth(s, y), inspection_depth(t, y), 1e-12);
    EXPECT_NEAR(auroc(neg, y), 1.0 - auroc(s, y), 1e-12);
  }
}

TEST(Regions, FourConnectivity) {
  // 1 1 0
  // 0 0 1
  // 1 0 1
  const Mask m{1, 1, 0, 0, 0, 1, 1, 0, 1};
  const auto regions = connected_regions(m, 3, 3);
  ASSERT_EQ(regions.size(), 3u);
  EXPECT_EQ(regions[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(regions[1], (std::vector<std::size_t>{5, 8}));
  EXPECT_EQ(regions[2], (std::vector<std::size_t>{6}));
}

TEST(Aupro, PerfectSegmentationIsOne) {
  Mask m(16, 0);
  m[5] = m[6] = m[12] = 1;
  ScoreMap s(4, 4);
  for (std::size_t p = 0; p < 16; ++p) s.values[p] = m[p];
  const std::vector<ScoreMap> maps{s};
  const std::vector<Mask> masks{m};
  EXPECT_DOUBLE_EQ(aupro(maps, masks, 0.3), 1.0);
  EXPECT_DOUBLE_EQ(aupro(maps, masks, 1.0), 1.0);
}

TEST(Aupro, ConstantMapsFollowTheDiagonal) {
  Mask m(16, 0);
  m[0] = m[1] = 1;
  const std::vector<ScoreMap> maps{ScoreMap(4, 4)};
  const std::vector<Mask> masks{m};
  const auto curve = pro_curve(maps, masks);
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_EQ(curve[1].fpr, 1.0);
  EXPECT_EQ(curve[1].pro, 1.0);
  // Diagonal area over [0, L] is L^2 / 2, so the normalized value is L / 2.
  EXPECT_DOUBLE_EQ(aupro(maps, masks, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(aupro(maps, masks, 0.3), 0.15);
}

TEST(Aupro, MatchesExhaustiveThresholdEnumeration) {
  Rng rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t count = 1 + rng.uniform_index(3);
    std::vector<ScoreMap> maps;
    std::vector<Mask> masks;
    for (std::size_t i = 0; i < count; ++i) {
      ScoreMap s(4, 4);
      Mask m(16, 0);
      for (std::size_t p = 0; p < 16; ++p) {
        s.values[p] = rep % 2 ? static_cast<double>(rng.uniform_index(6)) : rng.uniform();
        m[p] = rng.uniform() < 0.25;
      }
      maps.push_back(s);
      masks.push_back(m);
    }
    masks[0][0] = 1;
    masks[0][15] = 0;
    // Two regions in the first image at least.
    masks[0][1] = 0;
    masks[0][4] = 0;
    masks[0][10] = 1;
    for (double limit : {0.3, 1.0}) {
      EXPECT_NEAR(aupro(maps, masks, limit), brute_aupro(maps, masks, limit), 1e-12) << rep;
      const double v = aupro(maps, masks, limit);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Aupro, UndefinedCases) {
  const std::vector<ScoreMap> maps{ScoreMap(2, 2)};
  EXPECT_THROW(aupro(maps, std::vector<Mask>{Mask(4, 0)}), UndefinedMetricError);
  EXPECT_THROW(aupro(maps, std::vector<Mask>{Mask(4, 1)}), UndefinedMetricError);
  EXPECT_THROW(aupro(maps, std::vector<Mask>{Mask(3, 1)}), ContractError);
  EXPECT_THROW(integrate_pro(std::vector<ProPoint>{}, 0.0), ContractError);
}

TEST(Evaluate, ImageAndPixelMetrics) {
  FeatureDataset test;
  std::vector<ScoreMap> maps;
  std::vector<std::uint8_t> labels;
  std::vector<Mask> masks;
  for (int i = 0; i < 4; ++i) {
    test.images.emplace_back(2, 2, 1);
    test.class_ids.push_back(0);
    ScoreMap s(2, 2);
    Mask m(4, 0);
    if (i >= 2) {
      s.values[3] = 1.0;
      m[3] = 1;
    }
    maps.push_back(s);
    labels.push_back(i >= 2);
    masks.push_back(m);
  }
  test.truth_labels = labels;
  test.pixel_masks = masks;
  const auto r = evaluate(test, maps, 1.0, 0.3);
  EXPECT_EQ(r.image_auroc, 1.0);
  EXPECT_EQ(r.image_ap, 1.0);
  EXPECT_EQ(r.pixel_ap, 1.0);
  EXPECT_EQ(r.pixel_aupro, 1.0);
  test.pixel_masks.reset();
  const auto no_pixels = evaluate(test, maps, 1.0, 0.3);
  EXPECT_TRUE(std::isnan(no_pixels.pixel_ap));
  test.truth_labels.reset();
  EXPECT_THROW(evaluate(test, maps, 1.0, 0.3), UndefinedMetricError);
}

TEST(Report, TextRoundTripAndTable) {
  KeyValueReport r;
  r.set("a.b", 0.1);
  r.set("c", 2.0);
  r.set("name", std::string("synthetic"));
  r.set("a.b", 0.25);
  EXPECT_EQ(r.entries().size(), 3u);
  EXPECT_EQ(r.number("a.b"), 0.25);
  EXPECT_THROW(r.number("zzz"), LookupError);
  const auto back = KeyValueReport::parse(r.to_text());
  EXPECT_EQ(back, r);
  EXPECT_NE(r.to_table().find("0.2500"), std::string::npos);
  EXPECT_THROW(KeyValueReport::parse("no separator here\n"), ParseError);
}

}  // namespace
}  // namespace meds::metrics
