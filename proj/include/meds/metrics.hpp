// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "meds/dataio.hpp"
#include "meds/memory.hpp"

namespace meds::metrics {

/// Probability that a random positive outranks a random negative, ties 1/2.
/// Throws UndefinedMetricError unless both labels occur.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Step-wise precision * delta-recall over a descending sweep; equal scores
/// keep their original index order.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// 4-connected components of a binary H x W mask. Each region lists flat
/// pixel indices in scan order.
std::vector<std::vector<std::size_t>> connected_regions(std::span<const std::uint8_t> mask,
                                                        std::uint32_t height, std::uint32_t width);

struct ProPoint {
  double fpr = 0.0;
  double pro = 0.0;
};

/// PRO/FPR curve from the strictest threshold down, one point per distinct score.
std::vector<ProPoint> pro_curve(std::span<const ScoreMap> maps, std::span<const Mask> masks);

/// Trapezoidal area under a PRO curve up to fpr_limit, divided by fpr_limit.
double integrate_pro(std::span<const ProPoint> curve, double fpr_limit);

/// Area under the per-region-overlap curve up to fpr_limit, normalized.
double aupro(std::span<const ScoreMap> maps, std::span<const Mask> masks, double fpr_limit = 0.3);

/// Average precision with contaminated samples as positives.
double alc_auprc(std::span<const double> etas, std::span<const std::uint8_t> contaminated);

/// (rank of the last contaminated sample in a descending sweep) / N.
double inspection_depth(std::span<const double> etas, std::span<const std::uint8_t> contaminated);

/// Image and pixel metrics for one scored test set.
struct EvaluationReport {
  double image_auroc = 0.0;
  double image_ap = 0.0;
  double pixel_ap = 0.0;
  double pixel_aupro = 0.0;
};

EvaluationReport evaluate(const FeatureDataset& test, std::span<const ScoreMap> maps,
                          double top_percent, double fpr_limit);

/// Ordered `name = value` report.
class KeyValueReport {
 public:
  void set(const std::string& key, double value);
  void set(const std::string& key, const std::string& value);

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  double number(const std::string& key) const;
  bool contains(const std::string& key) const;

  std::string to_text() const;
  std::string to_table() const;
  static KeyValueReport parse(const std::string& text);

  bool operator==(const KeyValueReport&) const = default;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace meds::metrics
