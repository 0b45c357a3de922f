// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meds/dataio.hpp"
#include "meds/error.hpp"
#include "meds/memory.hpp"
#include "meds/metrics.hpp"
#include "meds/reconstructor.hpp"
#include "meds/selection.hpp"

namespace meds {

enum class FinetuneInit { kDistilled, kRandom };
enum class SelectionCriterion { kDistilled, kMemory };

/// Everything needed to run the three training phases end to end.
struct PipelineConfig {
  // Data: either feature files or a synthetic spec. With a synthetic spec the
  // clean set is split per class into train / test normals and the anomaly
  // pool into test anomalies (first) and the injection pool (rest).
  std::filesystem::path train_file;
  std::filesystem::path test_file;
  SynthSpec synth{.images_per_class = 100};  // enough for the default split
  double noise_ratio = 0.4;
  std::size_t train_normal_per_class = 60;
  std::size_t test_normal_per_class = 40;
  std::size_t test_anomalies_per_class = 40;

  std::size_t ensemble_size = 100;
  double subsample_ratio = 0.1;

  // Shared by distillation and fine-tuning.
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  std::size_t distill_iterations = 500;
  std::size_t finetune_iterations = 10000;
  double critical_value = 1.0;
  double top_percent = 1.0;
  bool selection_enabled = true;
  FinetuneInit finetune_init = FinetuneInit::kDistilled;
  SelectionCriterion criterion = SelectionCriterion::kDistilled;

  double aupro_fpr_limit = 0.3;

  std::uint64_t data_seed = 0;
  std::uint64_t ensemble_seed = 0;
  std::uint64_t training_seed = 0;

  /// Empty: nothing is persisted.
  std::filesystem::path output_dir;

  void validate() const;
  TrainConfig train_config(std::size_t iterations) const;
  SelectionConfig selection_config() const;

  /// Structured text form; keys mirror the fields above grouped by phase.
  /// The output directory is not serialized.
  std::string to_json() const;
  /// Overlays a (possibly partial) JSON document onto `base`. Unknown keys are
  /// configuration errors.
  static PipelineConfig from_json(const std::string& text, PipelineConfig base);
  static PipelineConfig from_json(const std::string& text);
};

/// Error raised inside a pipeline phase; keeps the original kind.
class PhaseError : public Error {
 public:
  PhaseError(std::string phase, const Error& cause)
      : Error(cause.kind(), cause.what()), phase_(std::move(phase)) {}
  PhaseError(std::string phase, const std::string& kind, const std::string& message)
      : Error(kind, message), phase_(std::move(phase)) {}

  const std::string& phase() const noexcept { return phase_; }

 private:
  std::string phase_;
};

struct PreparedData {
  FeatureDataset train;
  FeatureDataset test;  // may be empty when no test file is given
};

PreparedData prepare_data(const PipelineConfig& config);

struct MemoryPhase {
  MemoryEnsemble ensemble;
  ScoreCache cache;
};

MemoryPhase run_memory_phase(const FeatureDataset& train, const PipelineConfig& config);
DistillResult run_distill_phase(const FeatureDataset& train, const ScoreCache& cache,
                                const PipelineConfig& config);
/// Applies the init and criterion ablations, then fine-tunes with selection.
FinetuneResult run_finetune_phase(const FeatureDataset& train, const ReconstructorParams& theta0,
                                  const ScoreCache& cache, const PipelineConfig& config);

/// Patch-level AUROC of cached memory scores against the training masks.
double training_patch_auroc(const FeatureDataset& train, const ScoreCache& cache);

struct AlcEntry {
  std::size_t rank = 0;  // 1-based
  std::size_t image = 0;
  std::uint32_t class_id = 0;
  double score = 0.0;
  std::uint8_t contaminated = 0;
  bool operator==(const AlcEntry&) const = default;
};

struct AlcListing {
  std::vector<AlcEntry> entries;
  double auprc = 0.0;
  double inspection_depth = 0.0;

  std::string to_text() const;
  static AlcListing parse(const std::string& text);
  bool operator==(const AlcListing&) const = default;
};

/// Ranks training images by descending selection score for manual review.
AlcListing alc_rank(std::span<const double> etas, const FeatureDataset& train);

struct PipelineResult {
  PreparedData data;
  MemoryPhase memory;
  DistillResult distill;
  FinetuneResult finetune;
  metrics::KeyValueReport report;
  AlcListing alc;
};

/// Phase 1 -> 2 -> 3, evaluation and, with an output directory, persistence:
///   cache/memory_scores.medc  checkpoints/theta0.medp  checkpoints/theta.medp
///   reports/{metrics.txt, metrics_table.txt, selection_audit.tsv,
///            ensemble.txt, alc_listing.tsv, config.json}
PipelineResult run_pipeline(const PipelineConfig& config);

struct InferenceResult {
  ScoreMap map;          // upsampled
  double image_score = 0.0;  // robust max of the grid-resolution map
};

/// Nearest-neighbour upsampling; the target must be at least the grid size.
ScoreMap upsample_nearest(const ScoreMap& map, std::uint32_t height, std::uint32_t width);

InferenceResult infer(const ReconstructorParams& params, const PatchFeatureMap& image,
                      std::uint32_t height, std::uint32_t width, double top_percent);

enum class SweepAxis { kNoiseRatio, kSubsampleRatio, kEnsembleSize, kDistillIters, kCriticalValue };

SweepAxis parse_sweep_axis(const std::string& name);
std::string to_string(SweepAxis axis);

struct SweepRow {
  double value = 0.0;
  bool ok = false;
  std::string error;
  double image_auroc = 0.0;
  double image_ap = 0.0;
  double pixel_ap = 0.0;
  double pixel_aupro = 0.0;
  double selection_precision = 0.0;
  double train_patch_auroc = 0.0;
};

/// One pipeline run per value with shared seeds. A failing row is recorded and
/// the sweep continues. With an output directory each row persists under
/// sweeps/<axis>_<index>/.
std::vector<SweepRow> sweep(const PipelineConfig& config, SweepAxis axis,
                            std::span<const double> values);
std::string format_sweep(SweepAxis axis, std::span<const SweepRow> rows);

}  // namespace meds
