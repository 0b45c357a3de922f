// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "meds/dataio.hpp"
#include "meds/memory.hpp"

namespace meds {

enum class Activation : std::uint16_t {
  kTanh = 0,
  kLinear = 1,
};

/// Per-patch bottleneck map R^C -> R^h -> R^C:
///   f(z) = W2 act(W1 z + b1) + b2
///
/// Parameters live in one flat vector in the order W1 (h x C, row-major), b1,
/// W2 (C x h, row-major), b2. Gradients use the same layout.
class ReconstructorParams {
 public:
  ReconstructorParams() = default;
  ReconstructorParams(std::size_t channels, std::size_t hidden, Activation activation);

  /// max(2, ceil(C / 4)).
  static std::size_t default_hidden(std::size_t channels);

  std::size_t channels() const { return channels_; }
  std::size_t hidden() const { return hidden_; }
  Activation activation() const { return activation_; }
  std::size_t parameter_count() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  double& w1(std::size_t j, std::size_t c) { return values_[j * channels_ + c]; }
  double& b1(std::size_t j) { return values_[hidden_ * channels_ + j]; }
  double& w2(std::size_t c, std::size_t j) { return values_[w2_offset() + c * hidden_ + j]; }
  double& b2(std::size_t c) { return values_[b2_offset() + c]; }
  double w1(std::size_t j, std::size_t c) const { return values_[j * channels_ + c]; }
  double b1(std::size_t j) const { return values_[hidden_ * channels_ + j]; }
  double w2(std::size_t c, std::size_t j) const { return values_[w2_offset() + c * hidden_ + j]; }
  double b2(std::size_t c) const { return values_[b2_offset() + c]; }

  std::size_t w2_offset() const { return hidden_ * channels_ + hidden_; }
  std::size_t b2_offset() const { return w2_offset() + channels_ * hidden_; }

  bool same_architecture(const ReconstructorParams& other) const {
    return channels_ == other.channels_ && hidden_ == other.hidden_ &&
           activation_ == other.activation_;
  }

  /// Reconstruction of a single patch into `out` (size C).
  void forward(std::span<const double> z, std::span<double> out) const;

  bool operator==(const ReconstructorParams&) const = default;

 private:
  std::size_t channels_ = 0;
  std::size_t hidden_ = 0;
  Activation activation_ = Activation::kTanh;
  std::vector<double> values_;
};

/// Gaussian weights with variance 1/fan_in, zero biases.
ReconstructorParams init_reconstructor(std::size_t channels, std::uint64_t seed,
                                       Activation activation = Activation::kTanh);
ReconstructorParams init_reconstructor(std::size_t channels, std::size_t hidden,
                                       std::uint64_t seed, Activation activation);

/// Per-patch distance between the feature and its reconstruction.
ScoreMap reconstruction_score(const ReconstructorParams& params, const PatchFeatureMap& image);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Batch mean of the Frobenius norm of (target - reconstruction score) per image.
LossAndGrad distill_loss_and_grad(const ReconstructorParams& params,
                                  std::span<const PatchFeatureMap* const> batch,
                                  std::span<const ScoreMap* const> targets);

/// Mean over batch and patches of the reconstruction score.
LossAndGrad finetune_loss_and_grad(const ReconstructorParams& params,
                                   std::span<const PatchFeatureMap* const> batch);

struct TrainConfig {
  std::size_t iterations = 500;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// First/second moment accumulators for the adaptive-moment update.
struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;
};

void optimizer_step(ReconstructorParams& params, std::span<const double> grad,
                    OptimizerState& state, const TrainConfig& config);

struct DistillResult {
  ReconstructorParams params;
  std::vector<double> losses;  // one per iteration
};

/// Minibatch score distillation from random init. Batches are drawn by
/// shuffling the dataset each pass, without replacement within a pass.
DistillResult train_distill(const FeatureDataset& dataset, const ScoreCache& cache,
                            const TrainConfig& config);

/// "MEDP" checkpoint: magic | u16 version | u16 activation | u32 C | u32 hidden
/// | u64 count | f64 parameters in the flat order above.
std::vector<std::uint8_t> encode_checkpoint(const ReconstructorParams& params);
ReconstructorParams decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const ReconstructorParams& params, const std::filesystem::path& path);
ReconstructorParams read_checkpoint(const std::filesystem::path& path);

}  // namespace meds
