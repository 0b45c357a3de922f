// SPDX-License-Identifier: Apache-2.0
// meds: command-line front end for the training pipeline and the theory checks.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "meds/binary_io.hpp"
#include "meds/dataio.hpp"
#include "meds/memory.hpp"
#include "meds/metrics.hpp"
#include "meds/pipeline.hpp"
#include "meds/reconstructor.hpp"
#include "meds/selection.hpp"
#include "meds/theory.hpp"

namespace fs = std::filesystem;
using namespace meds;

namespace {

/// Flag values; unset optionals leave the config file (or defaults) alone.
struct Overrides {
  std::string config_file;
  std::string out_dir;
  std::string train_file;
  std::string test_file;
  std::optional<double> noise_ratio;
  std::optional<std::size_t> ensemble_size;
  std::optional<double> subsample_ratio;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::uint64_t> training_seed;
  std::optional<std::size_t> distill_iters;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> finetune_iters;
  std::optional<double> critical_value;
  std::optional<double> top_percent;
  bool no_distill_init = false;
  bool memory_criteria = false;
  bool no_selection = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_file, "JSON configuration file")->check(CLI::ExistingFile);
  app->add_option("--out", o.out_dir, "output root (default: $MEDS_OUTPUT_ROOT or ./meds_out)");
  app->add_option("--train", o.train_file, "training feature file (default: synthetic data)");
  app->add_option("--test", o.test_file, "test feature file");
  app->add_option("--noise-ratio", o.noise_ratio, "synthetic contamination ratio");
  app->add_option("--ensemble-size", o.ensemble_size, "memories per class (B)");
  app->add_option("--subsample-ratio", o.subsample_ratio, "image-level subsampling ratio (rho)");
  app->add_option("--seed", o.seed, "ensemble seed");
  app->add_option("--data-seed", o.data_seed, "synthetic data seed");
  app->add_option("--training-seed", o.training_seed, "distillation / fine-tuning seed");
  app->add_option("--distill-iters", o.distill_iters, "distillation iterations");
  app->add_option("--lr", o.lr, "learning rate");
  app->add_option("--batch-size", o.batch_size, "minibatch size");
  app->add_option("--finetune-iters", o.finetune_iters, "fine-tuning iterations");
  app->add_option("--critical-value", o.critical_value, "final critical value k");
  app->add_option("--top-percent", o.top_percent, "robust max top-n percent");
  app->add_flag("--no-distill-init", o.no_distill_init, "fine-tune from a random init");
  app->add_flag("--memory-criteria", o.memory_criteria, "select with memory scores instead of the distilled model");
  app->add_flag("--no-selection", o.no_selection, "plain fine-tune on all data");
}

std::string read_text(const fs::path& path) {
  const auto bytes = binio::read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& path, const std::string& text) {
  binio::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                        text.size()));
}

fs::path default_out_root() {
  if (const char* env = std::getenv("MEDS_OUTPUT_ROOT"); env && *env) return env;
  return "meds_out";
}

PipelineConfig build_config(const Overrides& o) {
  PipelineConfig c;
  if (!o.config_file.empty()) c = PipelineConfig::from_json(read_text(o.config_file));
  if (!o.out_dir.empty()) {
    c.output_dir = o.out_dir;
  } else if (c.output_dir.empty()) {
    c.output_dir = default_out_root();
  }
  if (!o.train_file.empty()) c.train_file = o.train_file;
  if (!o.test_file.empty()) c.test_file = o.test_file;
  if (o.noise_ratio) c.noise_ratio = *o.noise_ratio;
  if (o.ensemble_size) c.ensemble_size = *o.ensemble_size;
  if (o.subsample_ratio) c.subsample_ratio = *o.subsample_ratio;
  if (o.seed) c.ensemble_seed = *o.seed;
  if (o.data_seed) c.data_seed = *o.data_seed;
  if (o.training_seed) c.training_seed = *o.training_seed;
  if (o.distill_iters) c.distill_iterations = *o.distill_iters;
  if (o.lr) c.learning_rate = *o.lr;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.finetune_iters) c.finetune_iterations = *o.finetune_iters;
  if (o.critical_value) c.critical_value = *o.critical_value;
  if (o.top_percent) c.top_percent = *o.top_percent;
  if (o.no_distill_init) c.finetune_init = FinetuneInit::kRandom;
  if (o.memory_criteria) c.criterion = SelectionCriterion::kMemory;
  if (o.no_selection) c.selection_enabled = false;
  c.validate();
  return c;
}

/// Runs `body` with errors tagged by `phase` unless they already carry one.
template <typename F>
auto phase(const std::string& name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const PhaseError&) {
    throw;
  } catch (const Error& e) {
    throw PhaseError(name, e);
  } catch (const std::exception& e) {
    throw PhaseError(name, "internal", e.what());
  }
}

fs::path or_default(const std::string& flag, const fs::path& fallback) {
  return flag.empty() ? fallback : fs::path(flag);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<ScoreMap> score_all(const ReconstructorParams& params, const FeatureDataset& data) {
  std::vector<ScoreMap> maps;
  maps.reserve(data.size());
  for (const auto& img : data.images) maps.push_back(reconstruction_score(params, img));
  return maps;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_synth(const Overrides& o) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const PreparedData data = phase("data", [&] { return prepare_data(c); });
  const fs::path dir = c.output_dir / "data";
  phase("persist", [&] {
    write_feature_file(data.train, dir / "train.medf");
    if (!data.test.empty()) write_feature_file(data.test, dir / "test.medf");
    return 0;
  });
  std::cout << "train = " << (dir / "train.medf").string() << " (" << data.train.size() << " images, noise "
            << num(data.train.truth_labels ? data.train.noise_ratio() : 0.0) << ")\n";
  if (!data.test.empty()) std::cout << "test = " << (dir / "test.medf").string() << " (" << data.test.size() << " images)\n";
  return 0;
}

int cmd_memory_score(const Overrides& o) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const PreparedData data = phase("data", [&] { return prepare_data(c); });
  const MemoryPhase mem = phase("memory", [&] { return run_memory_phase(data.train, c); });
  const fs::path cache_path = c.output_dir / "cache" / "memory_scores.medc";
  phase("persist", [&] {
    write_score_cache(mem.cache, cache_path);
    return 0;
  });
  metrics::KeyValueReport report;
  report.set("memory.images", static_cast<double>(mem.cache.size()));
  report.set("memory.ensemble_size", static_cast<double>(c.ensemble_size));
  report.set("memory.subsample_ratio", c.subsample_ratio);
  if (data.train.pixel_masks && data.train.truth_labels && data.train.noise_ratio() > 0.0) {
    report.set("memory.train_patch_auroc", training_patch_auroc(data.train, mem.cache));
  }
  phase("persist", [&] {
    write_text(c.output_dir / "reports" / "memory.txt", report.to_text());
    return 0;
  });
  std::cout << "cache = " << cache_path.string() << '\n' << report.to_table();
  return 0;
}

int cmd_distill(const Overrides& o, const std::string& cache_flag) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const PreparedData data = phase("data", [&] { return prepare_data(c); });
  const ScoreCache cache = phase("distill", [&] {
    return read_score_cache(or_default(cache_flag, c.output_dir / "cache" / "memory_scores.medc"));
  });
  const DistillResult d = phase("distill", [&] { return run_distill_phase(data.train, cache, c); });
  const fs::path out = c.output_dir / "checkpoints" / "theta0.medp";
  phase("persist", [&] {
    write_checkpoint(d.params, out);
    return 0;
  });
  std::cout << "theta0 = " << out.string() << "\nloss_first = " << num(d.losses.front())
            << "\nloss_last = " << num(d.losses.back()) << '\n';
  return 0;
}

int cmd_finetune(const Overrides& o, const std::string& theta0_flag, const std::string& cache_flag) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const PreparedData data = phase("data", [&] { return prepare_data(c); });
  const ReconstructorParams theta0 = phase("finetune", [&] {
    return read_checkpoint(or_default(theta0_flag, c.output_dir / "checkpoints" / "theta0.medp"));
  });
  ScoreCache cache;
  if (c.criterion == SelectionCriterion::kMemory) {
    cache = phase("finetune", [&] {
      return read_score_cache(or_default(cache_flag, c.output_dir / "cache" / "memory_scores.medc"));
    });
  }
  const FinetuneResult f = phase("finetune", [&] { return run_finetune_phase(data.train, theta0, cache, c); });
  const fs::path out = c.output_dir / "checkpoints" / "theta.medp";
  phase("persist", [&] {
    write_checkpoint(f.params, out);
    write_text(c.output_dir / "reports" / "selection_audit.tsv", format_audit(f.audit));
    return 0;
  });
  std::cout << "theta = " << out.string() << "\nepochs = " << f.epochs
            << "\nfinal_selection = " << f.final_selection.size() << "\nloss_last = " << num(f.losses.back())
            << '\n';
  return 0;
}

int cmd_run(const Overrides& o) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const PipelineResult r = run_pipeline(c);
  std::cout << r.report.to_table();
  std::cout << "artifacts = " << c.output_dir.string() << '\n';
  return 0;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> values;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("bad sweep value '" + item + "'");
    values.push_back(v);
  }
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  return values;
}

int cmd_sweep(const Overrides& o, const std::string& axis_name, const std::string& values_text) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const SweepAxis axis = phase("config", [&] { return parse_sweep_axis(axis_name); });
  const std::vector<double> values = phase("config", [&] { return parse_values(values_text); });
  const auto rows = sweep(c, axis, values);
  const std::string table = format_sweep(axis, rows);
  phase("persist", [&] {
    write_text(c.output_dir / "sweeps" / ("sweep_" + to_string(axis) + ".tsv"), table);
    return 0;
  });
  std::cout << table;
  std::size_t failed = 0;
  for (const auto& r : rows) failed += !r.ok;
  if (failed > 0) std::cerr << "warning: " << failed << " sweep row(s) failed\n";
  return 0;
}

struct TheoryOptions {
  std::string features;
  std::uint32_t class_id = 0;
  std::size_t pool_size = 100;
  std::size_t dim = 4;
  std::uint64_t seed = 0;
  std::size_t pairs = 20;
  std::size_t m_max = 50;
  double tolerance = 1e-9;
  bool strict = false;
};

int cmd_theory_verify(const Overrides& o, const TheoryOptions& t) {
  const fs::path out = o.out_dir.empty() ? default_out_root() : fs::path(o.out_dir);
  const theory::FinitePool pool = phase("data", [&] {
    if (t.features.empty()) {
      Rng rng(t.seed);
      std::vector<double> v(t.pool_size * t.dim);
      for (double& x : v) x = rng.normal();
      return theory::FinitePool(t.dim, std::move(v));
    }
    const FeatureDataset ds = read_feature_file(t.features);
    const PatchPool patches = pool_patch_features(ds, t.class_id);
    return theory::FinitePool(patches.dim, patches.features);
  });
  const theory::TheoryReport report = phase("theory", [&] {
    if (t.m_max < 1) throw ConfigError("--m-max must be >= 1");
    std::vector<theory::QueryPair> pairs;
    for (std::size_t k = 0; k < t.pairs; ++k) {
      pairs.push_back(theory::make_separable_pair(pool, derive_seed(t.seed, 100 + k)));
    }
    std::vector<std::size_t> grid;
    for (std::size_t m = 1; m <= t.m_max; ++m) grid.push_back(m);
    return theory::verify_theorem(pool, pairs, grid, t.tolerance);
  });
  phase("persist", [&] {
    write_text(out / "reports" / "theory_table.txt", report.to_table());
    write_text(out / "reports" / "theory.txt", report.to_key_value());
    return 0;
  });
  std::cout << report.to_table();
  std::cout << "all_pass = " << (report.all_pass() ? "true" : "false") << '\n';
  return t.strict && !report.all_pass() ? 3 : 0;
}

int cmd_alc_rank(const Overrides& o, const std::string& theta_flag) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const PreparedData data = phase("data", [&] { return prepare_data(c); });
  const ReconstructorParams theta = phase("alc", [&] {
    return read_checkpoint(or_default(theta_flag, c.output_dir / "checkpoints" / "theta.medp"));
  });
  // At t = T the interpolation weight is 1, so eta is the current model's robust max.
  const AlcListing listing = phase("alc", [&] {
    return alc_rank(frozen_selection_scores(theta, data.train, c.top_percent), data.train);
  });
  const fs::path out = c.output_dir / "reports" / "alc_listing.tsv";
  phase("persist", [&] {
    write_text(out, listing.to_text());
    return 0;
  });
  std::cout << "listing = " << out.string() << "\nauprc = " << num(listing.auprc)
            << "\ninspection_depth = " << num(listing.inspection_depth) << '\n';
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& theta_flag) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const PreparedData data = phase("data", [&] { return prepare_data(c); });
  const metrics::KeyValueReport report = phase("eval", [&] {
    if (data.test.empty()) throw ContractError("evaluation needs a test set");
    const ReconstructorParams theta =
        read_checkpoint(or_default(theta_flag, c.output_dir / "checkpoints" / "theta.medp"));
    const auto e = metrics::evaluate(data.test, score_all(theta, data.test), c.top_percent, c.aupro_fpr_limit);
    metrics::KeyValueReport r;
    r.set("test.images", static_cast<double>(data.test.size()));
    r.set("test.image_auroc", e.image_auroc);
    r.set("test.image_ap", e.image_ap);
    r.set("test.pixel_ap", e.pixel_ap);
    r.set("test.pixel_aupro", e.pixel_aupro);
    return r;
  });
  phase("persist", [&] {
    write_text(c.output_dir / "reports" / "eval.txt", report.to_text());
    return 0;
  });
  std::cout << report.to_table();
  return 0;
}

struct InferOptions {
  std::string theta;
  std::string input;
  std::optional<std::size_t> image;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
};

int cmd_infer(const Overrides& o, const InferOptions& opt) {
  const PipelineConfig c = phase("config", [&] { return build_config(o); });
  const ReconstructorParams theta = phase("infer", [&] {
    return read_checkpoint(or_default(opt.theta, c.output_dir / "checkpoints" / "theta.medp"));
  });
  const FeatureDataset ds = phase("data", [&] { return read_feature_file(opt.input); });
  std::vector<std::size_t> which;
  if (opt.image) {
    if (*opt.image >= ds.size()) {
      throw PhaseError("infer", "lookup", "image index " + std::to_string(*opt.image) + " out of range");
    }
    which.push_back(*opt.image);
  } else {
    for (std::size_t i = 0; i < ds.size(); ++i) which.push_back(i);
  }
  std::ostringstream scores;
  scores << "image\tclass\tscore\n";
  phase("infer", [&] {
    for (std::size_t i : which) {
      const auto& img = ds.images[i];
      const std::uint32_t h = opt.height ? opt.height : img.height;
      const std::uint32_t w = opt.width ? opt.width : img.width;
      const InferenceResult r = infer(theta, img, h, w, c.top_percent);
      scores << i << '\t' << ds.class_ids[i] << '\t' << num(r.image_score) << '\n';
      if (opt.image) {
        std::ostringstream grid;
        for (std::uint32_t y = 0; y < r.map.height; ++y) {
          for (std::uint32_t x = 0; x < r.map.width; ++x) {
            grid << (x ? "\t" : "") << num(r.map.at(y, x));
          }
          grid << '\n';
        }
        write_text(c.output_dir / "reports" / ("score_map_" + std::to_string(i) + ".tsv"), grid.str());
      }
    }
    write_text(c.output_dir / "reports" / "inference.tsv", scores.str());
    return 0;
  });
  std::cout << scores.str();
  return 0;
}

void print_error(const std::string& phase_name, const std::string& kind, const std::string& message) {
  std::string flat = message;
  for (char& ch : flat) {
    if (ch == '\n') ch = ' ';
  }
  std::cerr << "error: phase=" << phase_name << " kind=" << kind << " message=" << flat << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-robust anomaly detection: memory ensembles, score distillation, progressive selection"};
  app.require_subcommand(1);
  Overrides o;
  std::string cache_flag, theta0_flag, theta_flag, axis, values;
  TheoryOptions theory_opt;
  InferOptions infer_opt;

  auto* gen = app.add_subcommand("gen-synth", "generate and contaminate a synthetic feature dataset");
  add_common(gen, o);
  auto* mem = app.add_subcommand("memory-score", "build the memory ensemble and cache training scores");
  add_common(mem, o);
  auto* dis = app.add_subcommand("distill", "distill cached memory scores into a reconstructor");
  add_common(dis, o);
  dis->add_option("--cache", cache_flag, "score cache (default: <out>/cache/memory_scores.medc)");
  auto* fin = app.add_subcommand("finetune", "fine-tune with progressive self-selection");
  add_common(fin, o);
  fin->add_option("--theta0", theta0_flag, "distilled checkpoint (default: <out>/checkpoints/theta0.medp)");
  fin->add_option("--cache", cache_flag, "score cache for --memory-criteria");
  auto* run = app.add_subcommand("run", "all phases, evaluation and reports");
  add_common(run, o);
  auto* swp = app.add_subcommand("sweep", "one full run per value of a configuration axis");
  add_common(swp, o);
  swp->add_option("--axis", axis,
                  "noise_ratio | subsample_ratio | ensemble_size | distill_iters | critical_value")
      ->required();
  swp->add_option("--values", values, "comma-separated values")->required();
  auto* thy = app.add_subcommand("theory-verify", "check the expected-gap inequalities on a finite pool");
  thy->add_option("--out", o.out_dir, "output root (default: $MEDS_OUTPUT_ROOT or ./meds_out)");
  thy->add_option("--features", theory_opt.features, "feature file providing the pool")->check(CLI::ExistingFile);
  thy->add_option("--class", theory_opt.class_id, "class whose patches form the pool");
  thy->add_option("--pool-size", theory_opt.pool_size, "random pool size");
  thy->add_option("--dim", theory_opt.dim, "random pool dimension");
  thy->add_option("--seed", theory_opt.seed, "seed for the pool and the query pairs");
  thy->add_option("--pairs", theory_opt.pairs, "query pairs");
  thy->add_option("--m-max", theory_opt.m_max, "largest memory size checked");
  thy->add_option("--tolerance", theory_opt.tolerance, "comparison tolerance");
  thy->add_flag("--strict", theory_opt.strict, "exit with status 3 when any check fails");
  auto* alc = app.add_subcommand("alc-rank", "rank training images for manual label review");
  add_common(alc, o);
  alc->add_option("--theta", theta_flag, "fine-tuned checkpoint (default: <out>/checkpoints/theta.medp)");
  auto* ev = app.add_subcommand("eval", "image and pixel metrics of a checkpoint on the test set");
  add_common(ev, o);
  ev->add_option("--theta", theta_flag, "checkpoint (default: <out>/checkpoints/theta.medp)");
  auto* inf = app.add_subcommand("infer", "score maps for a feature file");
  add_common(inf, o);
  inf->add_option("--theta", infer_opt.theta, "checkpoint (default: <out>/checkpoints/theta.medp)");
  inf->add_option("--input", infer_opt.input, "feature file to score")->required()->check(CLI::ExistingFile);
  inf->add_option("--image", infer_opt.image, "score one image and write its upsampled map");
  inf->add_option("--height", infer_opt.height, "output map height (default: grid height)");
  inf->add_option("--width", infer_opt.width, "output map width (default: grid width)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("cli", "usage", e.what());
    return 2;
  }

  try {
    if (*gen) return cmd_gen_synth(o);
    if (*mem) return cmd_memory_score(o);
    if (*dis) return cmd_distill(o, cache_flag);
    if (*fin) return cmd_finetune(o, theta0_flag, cache_flag);
    if (*run) return cmd_run(o);
    if (*swp) return cmd_sweep(o, axis, values);
    if (*thy) return cmd_theory_verify(o, theory_opt);
    if (*alc) return cmd_alc_rank(o, theta_flag);
    if (*ev) return cmd_eval(o, theta_flag);
    if (*inf) return cmd_infer(o, infer_opt);
  } catch (const PhaseError& e) {
    print_error(e.phase(), e.kind(), e.what());
    return 1;
  } catch (const Error& e) {
    print_error("unknown", e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("unknown", "internal", e.what());
    return 1;
  }
  return 0;
}
