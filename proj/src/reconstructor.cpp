// SPDX-License-Identifier: Apache-2.0

#include "meds/reconstructor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "meds/binary_io.hpp"
#include "meds/error.hpp"
#include "meds/random.hpp"

namespace meds {

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

double activate(Activation act, double a) { return act == Activation::kTanh ? std::tanh(a) : a; }

// Derivative expressed through the activation output.
double activate_slope(Activation act, double u) { return act == Activation::kTanh ? 1.0 - u * u : 1.0; }

/// Forward intermediates of one patch, kept for the backward pass.
struct PatchPass {
  std::vector<double> hidden;    // act(W1 z + b1)
  std::vector<double> residual;  // z - f(z)
  double score = 0.0;

  explicit PatchPass(const ReconstructorParams& p) : hidden(p.hidden()), residual(p.channels()) {}

  void run(const ReconstructorParams& p, std::span<const double> z) {
    const std::size_t C = p.channels();
    const std::size_t H = p.hidden();
    for (std::size_t j = 0; j < H; ++j) {
      double a = p.b1(j);
      for (std::size_t c = 0; c < C; ++c) a += p.w1(j, c) * z[c];
      hidden[j] = activate(p.activation(), a);
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double y = p.b2(c);
      for (std::size_t j = 0; j < H; ++j) y += p.w2(c, j) * hidden[j];
      residual[c] = z[c] - y;
      acc += residual[c] * residual[c];
    }
    score = std::sqrt(acc);
  }

  /// Adds coeff * d(score)/d(theta) into grad. The score is not differentiable
  /// at zero; the subgradient 0 is used there.
  void backward(const ReconstructorParams& p, std::span<const double> z, double coeff,
                std::span<double> grad, std::vector<double>& hidden_grad) const {
    if (score == 0.0 || coeff == 0.0) return;
    const std::size_t C = p.channels();
    const std::size_t H = p.hidden();
    const std::size_t w2 = p.w2_offset();
    const std::size_t b2 = p.b2_offset();
    const std::size_t b1 = H * C;
    std::fill(hidden_grad.begin(), hidden_grad.end(), 0.0);
    // d score / d y = -(z - y) / score
    const double scale = -coeff / score;
    for (std::size_t c = 0; c < C; ++c) {
      const double gy = scale * residual[c];
      grad[b2 + c] += gy;
      for (std::size_t j = 0; j < H; ++j) {
        grad[w2 + c * H + j] += gy * hidden[j];
        hidden_grad[j] += p.w2(c, j) * gy;
      }
    }
    for (std::size_t j = 0; j < H; ++j) {
      const double ga = hidden_grad[j] * activate_slope(p.activation(), hidden[j]);
      grad[b1 + j] += ga;
      for (std::size_t c = 0; c < C; ++c) grad[j * C + c] += ga * z[c];
    }
  }
};

void check_image(const ReconstructorParams& params, const PatchFeatureMap& image) {
  if (image.channels != params.channels()) {
    throw ContractError("image has " + std::to_string(image.channels) +
                        " channels, reconstructor expects " + std::to_string(params.channels()));
  }
}

}  // namespace

ReconstructorParams::ReconstructorParams(std::size_t channels, std::size_t hidden,
                                         Activation activation)
    : channels_(channels), hidden_(hidden), activation_(activation),
      values_(2 * channels * hidden + hidden + channels, 0.0) {
  if (channels == 0 || hidden == 0) throw ContractError("reconstructor dimensions must be positive");
}

std::size_t ReconstructorParams::default_hidden(std::size_t channels) {
  return std::max<std::size_t>(2, (channels + 3) / 4);
}

void ReconstructorParams::forward(std::span<const double> z, std::span<double> out) const {
  PatchPass pass(*this);
  pass.run(*this, z);
  for (std::size_t c = 0; c < channels_; ++c) out[c] = z[c] - pass.residual[c];
}

ReconstructorParams init_reconstructor(std::size_t channels, std::uint64_t seed,
                                       Activation activation) {
  if (channels < 1) throw ContractError("channel count must be >= 1");
  return init_reconstructor(channels, ReconstructorParams::default_hidden(channels), seed, activation);
}

ReconstructorParams init_reconstructor(std::size_t channels, std::size_t hidden,
                                       std::uint64_t seed, Activation activation) {
  ReconstructorParams p(channels, hidden, activation);
  Rng rng(seed);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(channels));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (std::size_t j = 0; j < hidden; ++j) {
    for (std::size_t c = 0; c < channels; ++c) p.w1(j, c) = s1 * rng.normal();
  }
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t j = 0; j < hidden; ++j) p.w2(c, j) = s2 * rng.normal();
  }
  return p;
}

ScoreMap reconstruction_score(const ReconstructorParams& params, const PatchFeatureMap& image) {
  check_image(params, image);
  ScoreMap out(image.height, image.width);
  PatchPass pass(params);
  for (std::size_t p = 0; p < image.patch_count(); ++p) {
    pass.run(params, image.patch(p));
    out.values[p] = pass.score;
  }
  return out;
}

LossAndGrad distill_loss_and_grad(const ReconstructorParams& params,
                                  std::span<const PatchFeatureMap* const> batch,
                                  std::span<const ScoreMap* const> targets) {
  if (batch.empty()) throw ContractError("distillation batch is empty");
  if (batch.size() != targets.size()) throw ContractError("targets are not aligned with the batch");
  LossAndGrad out;
  out.grad.assign(params.parameter_count(), 0.0);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  PatchPass pass(params);
  std::vector<double> hidden_grad(params.hidden());
  std::vector<double> diff;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const PatchFeatureMap& img = *batch[i];
    const ScoreMap& target = *targets[i];
    check_image(params, img);
    if (target.size() != img.patch_count()) throw ContractError("target map does not match image grid");
    diff.assign(img.patch_count(), 0.0);
    double sq = 0.0;
    for (std::size_t p = 0; p < img.patch_count(); ++p) {
      pass.run(params, img.patch(p));
      diff[p] = target.values[p] - pass.score;
      sq += diff[p] * diff[p];
    }
    const double norm = std::sqrt(sq);
    out.loss += norm * inv_batch;
    if (norm == 0.0) continue;
    // d norm / d s_p = -(t_p - s_p) / norm
    for (std::size_t p = 0; p < img.patch_count(); ++p) {
      const double coeff = -diff[p] / norm * inv_batch;
      pass.run(params, img.patch(p));
      pass.backward(params, img.patch(p), coeff, out.grad, hidden_grad);
    }
  }
  return out;
}

LossAndGrad finetune_loss_and_grad(const ReconstructorParams& params,
                                   std::span<const PatchFeatureMap* const> batch) {
  if (batch.empty()) throw ContractError("fine-tuning batch is empty");
  LossAndGrad out;
  out.grad.assign(params.parameter_count(), 0.0);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  PatchPass pass(params);
  std::vector<double> hidden_grad(params.hidden());
  for (const PatchFeatureMap* img : batch) {
    check_image(params, *img);
    const double coeff = inv_batch / static_cast<double>(img->patch_count());
    double sum = 0.0;
    for (std::size_t p = 0; p < img->patch_count(); ++p) {
      pass.run(params, img->patch(p));
      sum += pass.score;
      pass.backward(params, img->patch(p), coeff, out.grad, hidden_grad);
    }
    out.loss += sum * coeff;
  }
  return out;
}

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("moment coefficients must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
}

void optimizer_step(ReconstructorParams& params, std::span<const double> grad,
                    OptimizerState& state, const TrainConfig& config) {
  const std::size_t n = params.parameter_count();
  if (grad.size() != n) throw ContractError("gradient shape does not match parameters");
  if (state.first_moment.empty()) {
    state.first_moment.assign(n, 0.0);
    state.second_moment.assign(n, 0.0);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(config.beta1, t);
  const double bias2 = 1.0 - std::pow(config.beta2, t);
  auto theta = params.values();
  for (std::size_t i = 0; i < n; ++i) {
    state.first_moment[i] = config.beta1 * state.first_moment[i] + (1.0 - config.beta1) * grad[i];
    state.second_moment[i] =
        config.beta2 * state.second_moment[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    const double m_hat = state.first_moment[i] / bias1;
    const double v_hat = state.second_moment[i] / bias2;
    theta[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
  }
}

DistillResult train_distill(const FeatureDataset& dataset, const ScoreCache& cache,
                            const TrainConfig& config) {
  config.validate();
  if (dataset.empty()) throw ContractError("cannot distill on an empty dataset");
  if (cache.size() != dataset.size()) {
    throw ContractError("score cache holds " + std::to_string(cache.size()) + " maps for " +
                        std::to_string(dataset.size()) + " images");
  }
  DistillResult result;
  result.params = init_reconstructor(dataset.images.front().channels, derive_seed(config.seed, 0));
  Rng rng(derive_seed(config.seed, 1));
  OptimizerState state;

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::vector<const PatchFeatureMap*> batch;
  std::vector<const ScoreMap*> targets;
  result.losses.reserve(config.iterations);

  for (std::size_t t = 0; t < config.iterations; ++t) {
    if (cursor >= order.size()) {
      rng.shuffle(order);
      cursor = 0;
    }
    const std::size_t end = std::min(order.size(), cursor + config.batch_size);
    batch.clear();
    targets.clear();
    for (; cursor < end; ++cursor) {
      batch.push_back(&dataset.images[order[cursor]]);
      targets.push_back(&cache[order[cursor]]);
    }
    const LossAndGrad lg = distill_loss_and_grad(result.params, batch, targets);
    result.losses.push_back(lg.loss);
    optimizer_step(result.params, lg.grad, state, config);
  }
  return result;
}

std::vector<std::uint8_t> encode_checkpoint(const ReconstructorParams& params) {
  binio::Writer out;
  out.magic("MEDP");
  out.u16(kCheckpointVersion);
  out.u16(static_cast<std::uint16_t>(params.activation()));
  out.u32(static_cast<std::uint32_t>(params.channels()));
  out.u32(static_cast<std::uint32_t>(params.hidden()));
  out.u64(params.parameter_count());
  for (double v : params.values()) out.f64(v);
  return out.data();
}

ReconstructorParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader in(bytes, "checkpoint");
  in.expect_magic("MEDP");
  const auto version = in.u16();
  if (version != kCheckpointVersion) {
    throw ParseError(ParseErrorCode::kVersionMismatch,
                     "checkpoint: unsupported version " + std::to_string(version));
  }
  const auto act = in.u16();
  if (act > static_cast<std::uint16_t>(Activation::kLinear)) {
    throw ParseError(ParseErrorCode::kMalformed, "checkpoint: unknown activation");
  }
  const auto channels = in.u32();
  const auto hidden = in.u32();
  const auto count = in.u64();
  if (channels == 0 || hidden == 0) throw ParseError(ParseErrorCode::kMalformed, "checkpoint: zero dims");
  ReconstructorParams p(channels, hidden, static_cast<Activation>(act));
  if (count != p.parameter_count()) {
    throw ParseError(ParseErrorCode::kMalformed, "checkpoint: parameter count does not match dims");
  }
  in.require(binio::checked_product({count, 8}, "checkpoint"));
  for (double& v : p.values()) {
    v = in.f64();
    if (!std::isfinite(v)) throw ParseError(ParseErrorCode::kMalformed, "checkpoint: non-finite value");
  }
  in.expect_end();
  return p;
}

void write_checkpoint(const ReconstructorParams& params, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(params));
}

ReconstructorParams read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path));
}

}  // namespace meds
