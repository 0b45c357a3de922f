// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meds/dataio.hpp"
#include "meds/memory.hpp"
#include "meds/reconstructor.hpp"

namespace meds {

/// Number of top patches averaged by robust_max: ceil(n * count / 100).
std::size_t robust_max_count(std::size_t patches, double n_percent);

/// Mean of the top n% patch scores.
double robust_max(std::span<const double> scores, double n_percent);
inline double robust_max(const ScoreMap& map, double n_percent) { return robust_max(map.values, n_percent); }

struct Schedule {
  double alpha = 0.0;     // min(1, 2t/T)
  double critical = 0.0;  // k * t / T
};

/// Throws ContractError unless 1 <= t <= T.
Schedule schedule(std::size_t t, std::size_t total, double final_critical);

/// (1 - alpha) * frozen + alpha * current.
double selection_score(double frozen, double current, double alpha);
double selection_score(const PatchFeatureMap& image, const ReconstructorParams& frozen_params,
                       const ReconstructorParams& current_params, double alpha, double n_percent);

/// Median; even lengths average the two central order statistics.
double median(std::span<const double> values);
double median_absolute_deviation(std::span<const double> values);

/// median + k * MAD over one class.
double class_threshold(std::span<const double> etas, double critical);

/// Images with eta strictly below their class threshold. A class left empty
/// by the strict filter (e.g. all etas tied) keeps its lowest ceil(n/2) etas,
/// ties by index.
std::vector<std::size_t> select_subset(std::span<const std::uint32_t> class_ids,
                                       std::span<const double> etas,
                                       const std::map<std::uint32_t, double>& thresholds);

struct SelectionConfig {
  double final_critical = 1.0;  // k
  double top_percent = 1.0;     // n
  bool enabled = true;          // false: every image is always selected

  void validate() const;
};

struct AuditRow {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  std::uint32_t class_id = 0;
  double alpha = 0.0;
  double critical = 0.0;
  double threshold = 0.0;
  std::size_t class_size = 0;
  std::size_t selected = 0;
  std::optional<std::size_t> contaminated;  // only when truth is supplied for auditing
};

/// Tab-separated audit log with a header line.
std::string format_audit(std::span<const AuditRow> rows);

struct FinetuneResult {
  ReconstructorParams params;
  std::vector<double> losses;
  std::vector<AuditRow> audit;
  std::size_t epochs = 0;
  /// Selection scores and subset re-evaluated with the final parameters at t = T.
  std::vector<double> final_etas;
  std::vector<std::size_t> final_selection;
};

/// Robust max of the frozen model's scores, one per image.
std::vector<double> frozen_selection_scores(const ReconstructorParams& frozen,
                                            const FeatureDataset& dataset, double n_percent);
/// Robust max of cached memory scores, one per image (memory-criterion ablation).
std::vector<double> memory_selection_scores(const ScoreCache& cache, double n_percent);

/// Fine-tunes `initial` on the progressively selected subset. At every epoch
/// boundary (t = 1 and after each full pass over the current subset) the
/// schedule, selection scores, class thresholds and subset are refreshed.
/// `audit_truth` is read only to annotate audit rows.
FinetuneResult finetune_with_selection(const ReconstructorParams& initial,
                                       const FeatureDataset& dataset, const TrainConfig& config,
                                       const SelectionConfig& selection,
                                       std::span<const double> frozen_scores,
                                       const std::vector<std::uint8_t>* audit_truth = nullptr);

}  // namespace meds
