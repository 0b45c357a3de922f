// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "meds/error.hpp"
#include "meds/memory.hpp"
#include "meds/reconstructor.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace meds {
namespace {

using testing::random_image;
using oracles::max_fd_error;

std::vector<const PatchFeatureMap*> ptrs(const std::vector<PatchFeatureMap>& v) {
  std::vector<const PatchFeatureMap*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

std::vector<const ScoreMap*> ptrs(const std::vector<ScoreMap>& v) {
  std::vector<const ScoreMap*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

ReconstructorParams linear_identity(std::size_t c) {
  ReconstructorParams p(c, c, Activation::kLinear);
  for (std::size_t i = 0; i < c; ++i) {
    p.w1(i, i) = 1.0;
    p.w2(i, i) = 1.0;
  }
  return p;
}

TEST(Params, HiddenWidthAndLayout) {
  EXPECT_EQ(ReconstructorParams::default_hidden(4), 2u);
  EXPECT_EQ(ReconstructorParams::default_hidden(1), 2u);
  EXPECT_EQ(ReconstructorParams::default_hidden(8), 2u);
  EXPECT_EQ(ReconstructorParams::default_hidden(9), 3u);
  EXPECT_EQ(ReconstructorParams::default_hidden(64), 16u);
  const auto p = init_reconstructor(4, 1);
  EXPECT_EQ(p.hidden(), 2u);
  EXPECT_EQ(p.parameter_count(), 2u * 4 + 2 + 4 * 2 + 4);
  EXPECT_EQ(p.w2_offset(), 10u);
  EXPECT_EQ(p.b2_offset(), 18u);
}

TEST(Params, InitDeterministicAndFinite) {
  EXPECT_EQ(init_reconstructor(6, 3), init_reconstructor(6, 3));
  EXPECT_NE(init_reconstructor(6, 3), init_reconstructor(6, 4));
  const auto p = init_reconstructor(6, 3);
  for (std::size_t j = 0; j < p.hidden(); ++j) EXPECT_EQ(p.b1(j), 0.0);
  Rng rng(1);
  const auto img = random_image(3, 3, 6, rng, 5.0);
  for (double v : reconstruction_score(p, img).values) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
  EXPECT_THROW(init_reconstructor(0, 1), ContractError);
}

TEST(Score, IdentityMapGivesZero) {
  Rng rng(2);
  const auto img = random_image(4, 3, 5, rng);
  for (double v : reconstruction_score(linear_identity(5), img).values) EXPECT_EQ(v, 0.0);
}

TEST(Score, HandComputedForwardPass) {
  ReconstructorParams p(2, 2, Activation::kTanh);
  // W1 = [[0.5, -1], [2, 0.25]], b1 = [0.1, -0.2], W2 = [[1, -0.5], [0.3, 2]], b2 = [0.05, -0.1]
  p.w1(0, 0) = 0.5; p.w1(0, 1) = -1.0; p.w1(1, 0) = 2.0; p.w1(1, 1) = 0.25;
  p.b1(0) = 0.1; p.b1(1) = -0.2;
  p.w2(0, 0) = 1.0; p.w2(0, 1) = -0.5; p.w2(1, 0) = 0.3; p.w2(1, 1) = 2.0;
  p.b2(0) = 0.05; p.b2(1) = -0.1;
  const PatchFeatureMap img(1, 1, 2, {0.7, -0.4});
  const double a0 = std::tanh(0.5 * 0.7 - 1.0 * -0.4 + 0.1);
  const double a1 = std::tanh(2.0 * 0.7 + 0.25 * -0.4 - 0.2);
  const double f0 = 1.0 * a0 - 0.5 * a1 + 0.05;
  const double f1 = 0.3 * a0 + 2.0 * a1 - 0.1;
  const double expected = std::hypot(0.7 - f0, -0.4 - f1);
  EXPECT_NEAR(reconstruction_score(p, img).values[0], expected, 1e-12);
}

TEST(Score, PermutationEquivariant) {
  Rng rng(3);
  const auto p = init_reconstructor(4, 9);
  const auto img = random_image(3, 3, 4, rng);
  const auto base = reconstruction_score(p, img);
  std::vector<std::size_t> perm{4, 0, 8, 2, 7, 1, 3, 6, 5};
  PatchFeatureMap shuffled(3, 3, 4);
  for (std::size_t k = 0; k < 9; ++k) {
    std::copy(img.patch(perm[k]).begin(), img.patch(perm[k]).end(), shuffled.patch(k).begin());
  }
  const auto s = reconstruction_score(p, shuffled);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(s.values[k], base.values[perm[k]]);
}

TEST(Score, DimensionMismatch) {
  const auto p = init_reconstructor(4, 1);
  const PatchFeatureMap img(2, 2, 3);
  EXPECT_THROW(reconstruction_score(p, img), ContractError);
}

TEST(Distill, FixedPointHasZeroLossAndGrad) {
  Rng rng(4);
  const auto p = init_reconstructor(3, 5);
  std::vector<PatchFeatureMap> imgs{random_image(2, 2, 3, rng), random_image(2, 2, 3, rng)};
  std::vector<ScoreMap> targets{reconstruction_score(p, imgs[0]), reconstruction_score(p, imgs[1])};
  const auto lg = distill_loss_and_grad(p, ptrs(imgs), ptrs(targets));
  EXPECT_EQ(lg.loss, 0.0);
  for (double g : lg.grad) EXPECT_EQ(g, 0.0);
}

TEST(Distill, ClosedFormSinglePatchLinear) {
  // f(z) = w2 (w1 z + b1) + b2, e = z - f(z), s = |e|, L = |t - s|.
  // dL/dtheta = -sign(t - s) sign(e) de/dtheta with
  // de/dw1 = -w2 z, de/db1 = -w2, de/dw2 = -(w1 z + b1), de/db2 = -1.
  ReconstructorParams p(1, 1, Activation::kLinear);
  const double w1 = 0.8, b1 = 0.3, w2 = -1.2, b2 = 0.4, z = 1.5, t = 0.25;
  p.w1(0, 0) = w1; p.b1(0) = b1; p.w2(0, 0) = w2; p.b2(0) = b2;
  const double e = z - (w2 * (w1 * z + b1) + b2);
  const double s = std::abs(e);
  const double outer = -((t - s) > 0 ? 1.0 : -1.0) * (e > 0 ? 1.0 : -1.0);
  std::vector<PatchFeatureMap> imgs{PatchFeatureMap(1, 1, 1, {z})};
  ScoreMap target(1, 1);
  target.values[0] = t;
  std::vector<ScoreMap> targets{target};
  const auto lg = distill_loss_and_grad(p, ptrs(imgs), ptrs(targets));
  EXPECT_NEAR(lg.loss, std::abs(t - s), 1e-15);
  EXPECT_NEAR(lg.grad[0], outer * (-w2 * z), 1e-12);
  EXPECT_NEAR(lg.grad[1], outer * (-w2), 1e-12);
  EXPECT_NEAR(lg.grad[2], outer * (-(w1 * z + b1)), 1e-12);
  EXPECT_NEAR(lg.grad[3], outer * -1.0, 1e-12);
}

TEST(Distill, FiniteDifferenceGradient) {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t c = 2 + rng.uniform_index(6);
    const auto p = init_reconstructor(c, 100 + rep);
    std::vector<PatchFeatureMap> imgs;
    std::vector<ScoreMap> targets;
    for (int b = 0; b < 3; ++b) {
      imgs.push_back(random_image(2, 3, static_cast<std::uint32_t>(c), rng));
      ScoreMap t(2, 3);
      for (double& v : t.values) v = 2.0 * rng.uniform();
      targets.push_back(t);
    }
    const auto lg = distill_loss_and_grad(p, ptrs(imgs), ptrs(targets));
    const double err = max_fd_error(p, lg.grad, [&](const ReconstructorParams& q) {
      return distill_loss_and_grad(q, ptrs(imgs), ptrs(targets)).loss;
    });
    EXPECT_LE(err, 1e-4) << "instance " << rep;
  }
}

TEST(Distill, TargetsMustAlign) {
  Rng rng(6);
  const auto p = init_reconstructor(3, 1);
  std::vector<PatchFeatureMap> imgs{random_image(2, 2, 3, rng)};
  std::vector<ScoreMap> targets{ScoreMap(2, 3)};
  EXPECT_THROW(distill_loss_and_grad(p, ptrs(imgs), ptrs(targets)), ContractError);
  std::vector<ScoreMap> none;
  EXPECT_THROW(distill_loss_and_grad(p, ptrs(imgs), ptrs(none)), ContractError);
}

TEST(Finetune, IdentityGivesZeroLoss) {
  Rng rng(7);
  std::vector<PatchFeatureMap> imgs{random_image(2, 2, 3, rng)};
  EXPECT_EQ(finetune_loss_and_grad(linear_identity(3), ptrs(imgs)).loss, 0.0);
}

TEST(Finetune, FiniteDifferenceGradient) {
  Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t c = 2 + rng.uniform_index(6);
    const auto p = init_reconstructor(c, 200 + rep);
    std::vector<PatchFeatureMap> imgs;
    for (int b = 0; b < 4; ++b) imgs.push_back(random_image(3, 2, static_cast<std::uint32_t>(c), rng));
    const auto lg = finetune_loss_and_grad(p, ptrs(imgs));
    const double err = max_fd_error(p, lg.grad, [&](const ReconstructorParams& q) {
      return finetune_loss_and_grad(q, ptrs(imgs)).loss;
    });
    EXPECT_LE(err, 1e-4) << "instance " << rep;
  }
}

TEST(Finetune, DuplicatingTheBatchIsInvariant) {
  Rng rng(9);
  const auto p = init_reconstructor(4, 3);
  std::vector<PatchFeatureMap> imgs{random_image(2, 2, 4, rng), random_image(2, 2, 4, rng)};
  auto doubled = imgs;
  doubled.insert(doubled.end(), imgs.begin(), imgs.end());
  const auto a = finetune_loss_and_grad(p, ptrs(imgs));
  const auto b = finetune_loss_and_grad(p, ptrs(doubled));
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  for (std::size_t k = 0; k < a.grad.size(); ++k) EXPECT_NEAR(a.grad[k], b.grad[k], 1e-14);
  std::vector<PatchFeatureMap> empty;
  EXPECT_THROW(finetune_loss_and_grad(p, ptrs(empty)), ContractError);
}

TEST(Optimizer, ZeroGradientLeavesParams) {
  auto p = init_reconstructor(4, 2);
  const auto before = p;
  OptimizerState state;
  TrainConfig cfg;
  std::vector<double> zero(p.parameter_count(), 0.0);
  optimizer_step(p, zero, state, cfg);
  EXPECT_EQ(p, before);
}

TEST(Optimizer, FirstStepClosedForm) {
  auto p = init_reconstructor(3, 2);
  const auto before = p;
  OptimizerState state;
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  Rng rng(3);
  std::vector<double> g(p.parameter_count());
  for (double& x : g) x = rng.normal();
  optimizer_step(p, g, state, cfg);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double step = p.values()[k] - before.values()[k];
    const double expected = -cfg.learning_rate * g[k] / (std::abs(g[k]) + cfg.epsilon);
    EXPECT_NEAR(step, expected, 1e-15);
    EXPECT_LE(std::abs(step), cfg.learning_rate * (1.0 + cfg.epsilon));
  }
  std::vector<double> wrong(3, 0.0);
  EXPECT_THROW(optimizer_step(p, wrong, state, cfg), ContractError);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.iterations = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainDistill, LossDecreasesAndIsDeterministic) {
  SynthSpec spec;
  spec.images_per_class = 30;
  spec.channels = 8;
  spec.cluster_count = 1;
  spec.seed = 3;
  const auto synth = generate_synthetic_dataset(spec);
  const auto ds = inject_contamination(synth.clean, synth.anomaly_pool, 0.4, 1);
  const auto cache = cache_ensemble_scores(ds, build_ensemble(ds, 10, 0.1, 2));
  TrainConfig cfg;
  cfg.iterations = 300;
  cfg.learning_rate = 3e-3;
  cfg.seed = 4;
  const auto a = train_distill(ds, cache, cfg);
  ASSERT_EQ(a.losses.size(), 300u);
  EXPECT_LT(a.losses.back(), a.losses.front());
  const auto b = train_distill(ds, cache, cfg);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.params, b.params);
  cfg.iterations = 0;
  EXPECT_THROW(train_distill(ds, cache, cfg), ConfigError);
  TrainConfig ok;
  EXPECT_THROW(train_distill(ds, ScoreCache{}, ok), ContractError);
}

TEST(TrainDistill, NormalPatchesReconstructBetterThanAnomalous) {
  SynthSpec spec;
  spec.classes = 2;
  spec.images_per_class = 60;
  spec.channels = 8;
  spec.cluster_count = 1;
  spec.seed = 21;
  const auto synth = generate_synthetic_dataset(spec);
  const auto ds = inject_contamination(synth.clean, synth.anomaly_pool, 0.4, 2);
  const auto cache = cache_ensemble_scores(ds, build_ensemble(ds, 20, 0.1, 3));
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  const auto d = train_distill(ds, cache, cfg);
  double normal = 0.0, anomalous = 0.0;
  std::size_t nn = 0, na = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto s = reconstruction_score(d.params, ds.images[i]);
    for (std::size_t p = 0; p < s.size(); ++p) {
      if ((*ds.pixel_masks)[i][p]) {
        anomalous += s.values[p];
        ++na;
      } else {
        normal += s.values[p];
        ++nn;
      }
    }
  }
  EXPECT_LT(normal / static_cast<double>(nn), anomalous / static_cast<double>(na));
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto p = init_reconstructor(5, 3, 9, Activation::kLinear);
  const auto dir = testing::scratch_dir("ckpt");
  write_checkpoint(p, dir / "theta.medp");
  EXPECT_EQ(read_checkpoint(dir / "theta.medp"), p);
  auto bytes = encode_checkpoint(p);
  EXPECT_EQ(bytes.size(), 4u + 2 + 2 + 4 + 4 + 8 + 8 * p.parameter_count());
  auto bad = bytes;
  bad[0] = 'Q';
  EXPECT_THROW(decode_checkpoint(bad), ParseError);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bad), ParseError);
  bad = bytes;
  bad[6] = 7;  // unknown activation
  EXPECT_THROW(decode_checkpoint(bad), ParseError);
  bad = bytes;
  bad[20] ^= 1;  // parameter count disagrees with the architecture
  EXPECT_THROW(decode_checkpoint(bad), ParseError);
}

}  // namespace
}  // namespace meds
