// SPDX-License-Identifier: Apache-2.0
// Empirical trends of the sweep axes on fixed-seed synthetic data.

#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "meds/pipeline.hpp"
#include "synthetic_configs.hpp"

namespace meds {
namespace {

std::vector<SweepRow> ok_rows(const PipelineConfig& c, SweepAxis axis, std::vector<double> values) {
  auto rows = sweep(c, axis, values);
  for (const auto& r : rows) EXPECT_TRUE(r.ok) << r.value << ": " << r.error;
  return rows;
}

TEST(SweepTrends, PatchAurocPeaksAtInteriorSubsampleRatio) {
  const auto rows = ok_rows(testing::multimodal_memory_config(), SweepAxis::kSubsampleRatio, {0.02, 0.1, 0.5, 1.0});
  const auto best = std::max_element(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.train_patch_auroc < b.train_patch_auroc;
  });
  const auto at = best - rows.begin();
  EXPECT_TRUE(at == 1 || at == 2) << "peak at rho = " << best->value;
  EXPECT_LT(rows.back().train_patch_auroc, best->train_patch_auroc);
}

TEST(SweepTrends, EnsembleSizeDoesNotHurt) {
  const auto rows = ok_rows(testing::directional_config(0.4), SweepAxis::kEnsembleSize, {1, 10, 100});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GE(rows[i].image_auroc, rows[i - 1].image_auroc - 0.005) << "B = " << rows[i].value;
  }
}

TEST(SweepTrends, CriticalValueIsNotSensitive) {
  const auto rows = ok_rows(testing::directional_config(0.4), SweepAxis::kCriticalValue, {0.5, 1.0, 2.0});
  const auto [lo, hi] = std::minmax_element(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.image_auroc < b.image_auroc;
  });
  EXPECT_LE(hi->image_auroc - lo->image_auroc, 0.02);
}

}  // namespace
}  // namespace meds
