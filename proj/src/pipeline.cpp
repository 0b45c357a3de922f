// SPDX-License-Identifier: Apache-2.0

#include "meds/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "meds/binary_io.hpp"
#include "meds/random.hpp"

namespace meds {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  if (train_file.empty()) synth.validate();
  if (!(noise_ratio >= 0.0 && noise_ratio < 1.0)) throw ConfigError("noise_ratio must lie in [0, 1)");
  if (train_file.empty() && train_normal_per_class < 1) {
    throw ConfigError("train_normal_per_class must be >= 1");
  }
  if (ensemble_size < 1) throw ConfigError("ensemble size must be >= 1");
  if (!(subsample_ratio > 0.0 && subsample_ratio <= 1.0)) {
    throw ConfigError("subsample ratio must lie in (0, 1]");
  }
  train_config(std::max<std::size_t>(1, distill_iterations)).validate();
  if (distill_iterations < 1) throw ConfigError("distill iterations must be >= 1");
  if (finetune_iterations < 1) throw ConfigError("finetune iterations must be >= 1");
  selection_config().validate();
  if (!(aupro_fpr_limit > 0.0 && aupro_fpr_limit <= 1.0)) {
    throw ConfigError("AUPRO FPR limit must lie in (0, 1]");
  }
}

TrainConfig PipelineConfig::train_config(std::size_t iterations) const {
  TrainConfig tc;
  tc.iterations = iterations;
  tc.batch_size = batch_size;
  tc.learning_rate = learning_rate;
  tc.beta1 = beta1;
  tc.beta2 = beta2;
  tc.epsilon = epsilon;
  tc.seed = training_seed;
  return tc;
}

SelectionConfig PipelineConfig::selection_config() const {
  SelectionConfig sc;
  sc.final_critical = critical_value;
  sc.top_percent = top_percent;
  sc.enabled = selection_enabled;
  return sc;
}

std::string PipelineConfig::to_json() const {
  json j;
  j["data"]["train_file"] = train_file.string();
  j["data"]["test_file"] = test_file.string();
  j["data"]["noise_ratio"] = noise_ratio;
  j["data"]["train_normal_per_class"] = train_normal_per_class;
  j["data"]["test_normal_per_class"] = test_normal_per_class;
  j["data"]["test_anomalies_per_class"] = test_anomalies_per_class;
  auto& s = j["data"]["synth"];
  s["classes"] = synth.classes;
  s["images_per_class"] = synth.images_per_class;
  s["height"] = synth.height;
  s["width"] = synth.width;
  s["channels"] = synth.channels;
  s["cluster_count"] = synth.cluster_count;
  s["cluster_spread"] = synth.cluster_spread;
  s["anomaly_shift"] = synth.anomaly_shift;
  s["region_min"] = synth.region_min;
  s["region_max"] = synth.region_max;
  j["ensemble"]["size"] = ensemble_size;
  j["ensemble"]["subsample_ratio"] = subsample_ratio;
  j["optimizer"]["learning_rate"] = learning_rate;
  j["optimizer"]["batch_size"] = batch_size;
  j["optimizer"]["beta1"] = beta1;
  j["optimizer"]["beta2"] = beta2;
  j["optimizer"]["epsilon"] = epsilon;
  j["distill"]["iterations"] = distill_iterations;
  j["finetune"]["iterations"] = finetune_iterations;
  j["finetune"]["critical_value"] = critical_value;
  j["finetune"]["top_percent"] = top_percent;
  j["finetune"]["selection"] = selection_enabled;
  j["finetune"]["init"] = finetune_init == FinetuneInit::kDistilled ? "distilled" : "random";
  j["finetune"]["criterion"] = criterion == SelectionCriterion::kDistilled ? "distilled" : "memory";
  j["eval"]["aupro_fpr_limit"] = aupro_fpr_limit;
  j["seeds"]["data"] = data_seed;
  j["seeds"]["ensemble"] = ensemble_seed;
  j["seeds"]["training"] = training_seed;
  return j.dump(2) + "\n";
}

namespace {

class JsonOverlay {
 public:
  explicit JsonOverlay(const json& root) : root_(root) {}

  template <typename T>
  void read(const std::string& section, const std::string& key, T& target) {
    const json* node = find(section, key);
    if (!node) return;
    try {
      target = node->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key " + section + "." + key + ": " + e.what());
    }
  }

  void read_path(const std::string& section, const std::string& key, std::filesystem::path& target) {
    std::string value = target.string();
    read(section, key, value);
    target = value;
  }

  /// Every key present in the document must have been consumed.
  void check_unknown(const json& node, const std::string& prefix) const {
    for (auto it = node.begin(); it != node.end(); ++it) {
      const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (it->is_object()) {
        check_unknown(*it, path);
      } else if (!consumed_.count(path)) {
        throw ConfigError("unknown config key '" + path + "'");
      }
    }
  }

 private:
  const json* find(const std::string& section, const std::string& key) {
    const json* node = &root_;
    std::string path;
    std::istringstream parts(section);
    std::string part;
    while (std::getline(parts, part, '.')) {
      if (!node->is_object() || !node->contains(part)) return nullptr;
      node = &(*node)[part];
      path += (path.empty() ? "" : ".") + part;
    }
    if (!node->is_object() || !node->contains(key)) return nullptr;
    consumed_.insert(path.empty() ? key : path + "." + key);
    return &(*node)[key];
  }

  const json& root_;
  std::set<std::string> consumed_;
};

}  // namespace

PipelineConfig PipelineConfig::from_json(const std::string& text, PipelineConfig base) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");
  PipelineConfig c = std::move(base);
  JsonOverlay in(root);
  in.read_path("data", "train_file", c.train_file);
  in.read_path("data", "test_file", c.test_file);
  in.read("data", "noise_ratio", c.noise_ratio);
  in.read("data", "train_normal_per_class", c.train_normal_per_class);
  in.read("data", "test_normal_per_class", c.test_normal_per_class);
  in.read("data", "test_anomalies_per_class", c.test_anomalies_per_class);
  in.read("data.synth", "classes", c.synth.classes);
  in.read("data.synth", "images_per_class", c.synth.images_per_class);
  in.read("data.synth", "height", c.synth.height);
  in.read("data.synth", "width", c.synth.width);
  in.read("data.synth", "channels", c.synth.channels);
  in.read("data.synth", "cluster_count", c.synth.cluster_count);
  in.read("data.synth", "cluster_spread", c.synth.cluster_spread);
  in.read("data.synth", "anomaly_shift", c.synth.anomaly_shift);
  in.read("data.synth", "region_min", c.synth.region_min);
  in.read("data.synth", "region_max", c.synth.region_max);
  in.read("ensemble", "size", c.ensemble_size);
  in.read("ensemble", "subsample_ratio", c.subsample_ratio);
  in.read("optimizer", "learning_rate", c.learning_rate);
  in.read("optimizer", "batch_size", c.batch_size);
  in.read("optimizer", "beta1", c.beta1);
  in.read("optimizer", "beta2", c.beta2);
  in.read("optimizer", "epsilon", c.epsilon);
  in.read("distill", "iterations", c.distill_iterations);
  in.read("finetune", "iterations", c.finetune_iterations);
  in.read("finetune", "critical_value", c.critical_value);
  in.read("finetune", "top_percent", c.top_percent);
  in.read("finetune", "selection", c.selection_enabled);
  std::string init = c.finetune_init == FinetuneInit::kDistilled ? "distilled" : "random";
  in.read("finetune", "init", init);
  if (init != "distilled" && init != "random") throw ConfigError("finetune.init must be distilled|random");
  c.finetune_init = init == "distilled" ? FinetuneInit::kDistilled : FinetuneInit::kRandom;
  std::string criterion = c.criterion == SelectionCriterion::kDistilled ? "distilled" : "memory";
  in.read("finetune", "criterion", criterion);
  if (criterion != "distilled" && criterion != "memory") {
    throw ConfigError("finetune.criterion must be distilled|memory");
  }
  c.criterion = criterion == "distilled" ? SelectionCriterion::kDistilled : SelectionCriterion::kMemory;
  in.read("eval", "aupro_fpr_limit", c.aupro_fpr_limit);
  in.read("seeds", "data", c.data_seed);
  in.read("seeds", "ensemble", c.ensemble_seed);
  in.read("seeds", "training", c.training_seed);
  in.read_path("", "output_dir", c.output_dir);
  in.check_unknown(root, "");
  return c;
}

PipelineConfig PipelineConfig::from_json(const std::string& text) { return from_json(text, PipelineConfig{}); }

// ---------------------------------------------------------------------------
// Phases

namespace {

template <typename F>
auto in_phase(const std::string& phase, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const PhaseError&) {
    throw;
  } catch (const Error& e) {
    throw PhaseError(phase, e);
  } catch (const std::exception& e) {
    throw PhaseError(phase, "internal", e.what());
  }
}

}  // namespace

PreparedData prepare_data(const PipelineConfig& config) {
  PreparedData data;
  if (!config.train_file.empty()) {
    data.train = read_feature_file(config.train_file);
    if (!config.test_file.empty()) data.test = read_feature_file(config.test_file);
    return data;
  }
  SynthSpec spec = config.synth;
  spec.seed = config.data_seed;
  const SynthOutput synth = generate_synthetic_dataset(spec);
  auto [train_clean, rest] = split_per_class(synth.clean, config.train_normal_per_class);
  auto [test_normal, unused_clean] = split_per_class(rest, config.test_normal_per_class);
  auto [test_anomalies, injection_pool] =
      split_per_class(synth.anomaly_pool, config.test_anomalies_per_class);
  for (std::uint32_t c : train_clean.classes()) {
    std::size_t normals = 0, anomalies = 0;
    for (auto id : test_normal.class_ids) normals += (id == c);
    for (auto id : test_anomalies.class_ids) anomalies += (id == c);
    if (normals < config.test_normal_per_class || anomalies < config.test_anomalies_per_class) {
      throw InsufficientPoolError(c, "synthetic spec too small for the requested test split of class " +
                                         std::to_string(c));
    }
  }
  data.train = inject_contamination(train_clean, injection_pool, config.noise_ratio,
                                    derive_seed(config.data_seed, 0x1A7EC7ULL));
  if (config.test_normal_per_class + config.test_anomalies_per_class > 0) {
    data.test = concat(test_normal, test_anomalies);
  }
  return data;
}

MemoryPhase run_memory_phase(const FeatureDataset& train, const PipelineConfig& config) {
  MemoryPhase phase;
  phase.ensemble = build_ensemble(train, config.ensemble_size, config.subsample_ratio, config.ensemble_seed);
  phase.cache = cache_ensemble_scores(train, phase.ensemble);
  return phase;
}

DistillResult run_distill_phase(const FeatureDataset& train, const ScoreCache& cache,
                                const PipelineConfig& config) {
  if (cache.size() != train.size()) throw ContractError("distillation requires a complete score cache");
  return train_distill(train, cache, config.train_config(config.distill_iterations));
}

FinetuneResult run_finetune_phase(const FeatureDataset& train, const ReconstructorParams& theta0,
                                  const ScoreCache& cache, const PipelineConfig& config) {
  const TrainConfig tc = config.train_config(config.finetune_iterations);
  const SelectionConfig sc = config.selection_config();
  const ReconstructorParams initial =
      config.finetune_init == FinetuneInit::kDistilled
          ? theta0
          : init_reconstructor(theta0.channels(), theta0.hidden(), derive_seed(config.training_seed, 3),
                               theta0.activation());
  const std::vector<double> frozen = config.criterion == SelectionCriterion::kDistilled
                                         ? frozen_selection_scores(theta0, train, config.top_percent)
                                         : memory_selection_scores(cache, config.top_percent);
  const std::vector<std::uint8_t>* truth = train.truth_labels ? &*train.truth_labels : nullptr;
  return finetune_with_selection(initial, train, tc, sc, frozen, truth);
}

double training_patch_auroc(const FeatureDataset& train, const ScoreCache& cache) {
  if (!train.pixel_masks) throw UndefinedMetricError("training patch AUROC needs pixel masks");
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t i = 0; i < train.size(); ++i) {
    scores.insert(scores.end(), cache[i].values.begin(), cache[i].values.end());
    labels.insert(labels.end(), (*train.pixel_masks)[i].begin(), (*train.pixel_masks)[i].end());
  }
  return metrics::auroc(scores, labels);
}

// ---------------------------------------------------------------------------
// Active label correction listing

AlcListing alc_rank(std::span<const double> etas, const FeatureDataset& train) {
  if (!train.truth_labels) throw UndefinedMetricError("ALC ranking needs truth labels");
  if (etas.size() != train.size()) throw ContractError("one selection score per image is required");
  AlcListing listing;
  std::vector<std::size_t> order(etas.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&etas](std::size_t a, std::size_t b) { return etas[a] > etas[b]; });
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    listing.entries.push_back({k + 1, i, train.class_ids[i], etas[i], (*train.truth_labels)[i]});
  }
  listing.auprc = metrics::alc_auprc(etas, *train.truth_labels);
  listing.inspection_depth = metrics::inspection_depth(etas, *train.truth_labels);
  return listing;
}

std::string AlcListing::to_text() const {
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "# auprc = %.17g\n# inspection_depth = %.17g\n", auprc, inspection_depth);
  out << buf << "rank\timage\tclass\tscore\tcontaminated\n";
  for (const AlcEntry& e : entries) {
    std::snprintf(buf, sizeof(buf), "%zu\t%zu\t%u\t%.17g\t%u\n", e.rank, e.image, e.class_id, e.score,
                  static_cast<unsigned>(e.contaminated));
    out << buf;
  }
  return out.str();
}

AlcListing AlcListing::parse(const std::string& text) {
  AlcListing listing;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line.rfind("# auprc = ", 0) == 0) {
        listing.auprc = std::stod(line.substr(10));
      } else if (line.rfind("# inspection_depth = ", 0) == 0) {
        listing.inspection_depth = std::stod(line.substr(21));
      } else if (line.rfind("rank\t", 0) == 0) {
        header = true;
      } else {
        std::istringstream row(line);
        AlcEntry e;
        unsigned contaminated = 0;
        std::string score;
        if (!(row >> e.rank >> e.image >> e.class_id >> score >> contaminated)) {
          throw ParseError(ParseErrorCode::kMalformed, "ALC listing: bad row '" + line + "'");
        }
        e.score = std::stod(score);
        e.contaminated = static_cast<std::uint8_t>(contaminated);
        listing.entries.push_back(e);
      }
    }
  } catch (const std::logic_error& e) {
    throw ParseError(ParseErrorCode::kMalformed, std::string("ALC listing: ") + e.what());
  }
  if (!header) throw ParseError(ParseErrorCode::kMalformed, "ALC listing: missing header");
  return listing;
}

// ---------------------------------------------------------------------------
// Full run

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  binio::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                        text.size()));
}

std::vector<ScoreMap> score_all(const ReconstructorParams& params, const FeatureDataset& data) {
  std::vector<ScoreMap> maps;
  maps.reserve(data.size());
  for (const auto& img : data.images) maps.push_back(reconstruction_score(params, img));
  return maps;
}

void add_evaluation(metrics::KeyValueReport& report, const std::string& prefix,
                    const metrics::EvaluationReport& e) {
  report.set(prefix + ".image_auroc", e.image_auroc);
  report.set(prefix + ".image_ap", e.image_ap);
  report.set(prefix + ".pixel_ap", e.pixel_ap);
  report.set(prefix + ".pixel_aupro", e.pixel_aupro);
}

std::string ensemble_summary(const MemoryEnsemble& ensemble) {
  std::ostringstream out;
  out << "ensemble.size = " << ensemble.ensemble_size << '\n';
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", ensemble.subsample_ratio);
  out << "ensemble.subsample_ratio = " << buf << '\n';
  out << "ensemble.seed = " << ensemble.seed << '\n';
  for (const auto& [c, banks] : ensemble.banks) {
    std::size_t total = 0;
    for (const auto& b : banks) total += b.size();
    out << "class." << c << ".banks = " << banks.size() << '\n';
    out << "class." << c << ".bank_vectors = " << (banks.empty() ? 0 : banks.front().size()) << '\n';
    out << "class." << c << ".total_vectors = " << total << '\n';
  }
  return out.str();
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config) {
  in_phase("config", [&] {
    config.validate();
    return 0;
  });
  PipelineResult result;
  const bool persist = !config.output_dir.empty();
  const auto& out = config.output_dir;

  result.data = in_phase("data", [&] { return prepare_data(config); });
  const FeatureDataset& train = result.data.train;
  const FeatureDataset& test = result.data.test;

  result.memory = in_phase("memory", [&] {
    MemoryPhase phase = run_memory_phase(train, config);
    if (persist) write_score_cache(phase.cache, out / "cache" / "memory_scores.medc");
    return phase;
  });

  result.distill = in_phase("distill", [&] {
    DistillResult d = run_distill_phase(train, result.memory.cache, config);
    if (persist) write_checkpoint(d.params, out / "checkpoints" / "theta0.medp");
    return d;
  });

  result.finetune = in_phase("finetune", [&] {
    FinetuneResult f = run_finetune_phase(train, result.distill.params, result.memory.cache, config);
    if (persist) write_checkpoint(f.params, out / "checkpoints" / "theta.medp");
    return f;
  });

  in_phase("eval", [&] {
    auto& report = result.report;
    report.set("data.train_images", static_cast<double>(train.size()));
    report.set("data.test_images", static_cast<double>(test.size()));
    if (train.truth_labels) report.set("data.noise_ratio", train.noise_ratio());
    if (train.pixel_masks && train.truth_labels && train.noise_ratio() > 0.0) {
      report.set("memory.train_patch_auroc", training_patch_auroc(train, result.memory.cache));
    }
    report.set("distill.loss_first", result.distill.losses.front());
    report.set("distill.loss_last", result.distill.losses.back());
    report.set("finetune.loss_first", result.finetune.losses.front());
    report.set("finetune.loss_last", result.finetune.losses.back());
    report.set("selection.epochs", static_cast<double>(result.finetune.epochs));
    report.set("selection.final_size", static_cast<double>(result.finetune.final_selection.size()));
    if (train.truth_labels) {
      std::size_t clean = 0;
      for (std::size_t i : result.finetune.final_selection) clean += ((*train.truth_labels)[i] == 0);
      report.set("selection.final_precision",
                 static_cast<double>(clean) / static_cast<double>(result.finetune.final_selection.size()));
    }
    if (!test.empty() && test.truth_labels) {
      std::vector<ScoreMap> memory_maps;
      memory_maps.reserve(test.size());
      for (std::size_t i = 0; i < test.size(); ++i) {
        memory_maps.push_back(ensemble_score(test.images[i], test.class_ids[i], result.memory.ensemble));
      }
      add_evaluation(report, "memory.test",
                     metrics::evaluate(test, memory_maps, config.top_percent, config.aupro_fpr_limit));
      add_evaluation(report, "distilled.test",
                     metrics::evaluate(test, score_all(result.distill.params, test), config.top_percent,
                                       config.aupro_fpr_limit));
      add_evaluation(report, "final.test",
                     metrics::evaluate(test, score_all(result.finetune.params, test), config.top_percent,
                                       config.aupro_fpr_limit));
    }
    if (train.truth_labels && train.noise_ratio() > 0.0) {
      result.alc = alc_rank(result.finetune.final_etas, train);
      report.set("alc.auprc", result.alc.auprc);
      report.set("alc.inspection_depth", result.alc.inspection_depth);
    }
    return 0;
  });

  if (persist) {
    in_phase("persist", [&] {
      write_text(out / "reports" / "metrics.txt", result.report.to_text());
      write_text(out / "reports" / "metrics_table.txt", result.report.to_table());
      write_text(out / "reports" / "selection_audit.tsv", format_audit(result.finetune.audit));
      write_text(out / "reports" / "ensemble.txt", ensemble_summary(result.memory.ensemble));
      write_text(out / "reports" / "config.json", config.to_json());
      if (!result.alc.entries.empty()) write_text(out / "reports" / "alc_listing.tsv", result.alc.to_text());
      return 0;
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Inference

ScoreMap upsample_nearest(const ScoreMap& map, std::uint32_t height, std::uint32_t width) {
  if (height < map.height || width < map.width) {
    throw ContractError("target size is smaller than the score grid");
  }
  ScoreMap out(height, width);
  for (std::uint32_t y = 0; y < height; ++y) {
    const std::size_t sy = std::size_t{y} * map.height / height;
    for (std::uint32_t x = 0; x < width; ++x) {
      const std::size_t sx = std::size_t{x} * map.width / width;
      out.values[std::size_t{y} * width + x] = map.values[sy * map.width + sx];
    }
  }
  return out;
}

InferenceResult infer(const ReconstructorParams& params, const PatchFeatureMap& image,
                      std::uint32_t height, std::uint32_t width, double top_percent) {
  const ScoreMap grid = reconstruction_score(params, image);
  InferenceResult r;
  r.map = upsample_nearest(grid, height, width);
  r.image_score = robust_max(grid, top_percent);
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "noise_ratio") return SweepAxis::kNoiseRatio;
  if (name == "subsample_ratio") return SweepAxis::kSubsampleRatio;
  if (name == "ensemble_size") return SweepAxis::kEnsembleSize;
  if (name == "distill_iters") return SweepAxis::kDistillIters;
  if (name == "critical_value") return SweepAxis::kCriticalValue;
  throw ConfigError("unknown sweep axis '" + name + "'");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kNoiseRatio: return "noise_ratio";
    case SweepAxis::kSubsampleRatio: return "subsample_ratio";
    case SweepAxis::kEnsembleSize: return "ensemble_size";
    case SweepAxis::kDistillIters: return "distill_iters";
    case SweepAxis::kCriticalValue: return "critical_value";
  }
  return "unknown";
}

namespace {

std::size_t as_count(double v) {
  if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError("sweep value must be a positive integer");
  return static_cast<std::size_t>(v);
}

double value_or_nan(const metrics::KeyValueReport& r, const std::string& key) {
  return r.contains(key) ? r.number(key) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

std::vector<SweepRow> sweep(const PipelineConfig& config, SweepAxis axis, std::span<const double> values) {
  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < values.size(); ++k) {
    SweepRow row;
    row.value = values[k];
    try {
      PipelineConfig c = config;
      switch (axis) {
        case SweepAxis::kNoiseRatio: c.noise_ratio = values[k]; break;
        case SweepAxis::kSubsampleRatio: c.subsample_ratio = values[k]; break;
        case SweepAxis::kEnsembleSize: c.ensemble_size = as_count(values[k]); break;
        case SweepAxis::kDistillIters: c.distill_iterations = as_count(values[k]); break;
        case SweepAxis::kCriticalValue: c.critical_value = values[k]; break;
      }
      if (!config.output_dir.empty()) {
        c.output_dir = config.output_dir / "sweeps" / (to_string(axis) + "_" + std::to_string(k));
      }
      const PipelineResult r = run_pipeline(c);
      row.image_auroc = value_or_nan(r.report, "final.test.image_auroc");
      row.image_ap = value_or_nan(r.report, "final.test.image_ap");
      row.pixel_ap = value_or_nan(r.report, "final.test.pixel_ap");
      row.pixel_aupro = value_or_nan(r.report, "final.test.pixel_aupro");
      row.selection_precision = value_or_nan(r.report, "selection.final_precision");
      row.train_patch_auroc = value_or_nan(r.report, "memory.train_patch_auroc");
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_sweep(SweepAxis axis, std::span<const SweepRow> rows) {
  std::ostringstream out;
  out << to_string(axis)
      << "\tstatus\ti_auroc\ti_ap\tp_ap\tp_aupro\tselection_precision\ttrain_patch_auroc\n";
  char buf[256];
  for (const SweepRow& r : rows) {
    if (!r.ok) {
      std::snprintf(buf, sizeof(buf), "%.10g\tfailed", r.value);
      out << buf << '\t' << r.error << '\n';
      continue;
    }
    std::snprintf(buf, sizeof(buf), "%.10g\tok\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", r.value, r.image_auroc,
                  r.image_ap, r.pixel_ap, r.pixel_aupro, r.selection_precision, r.train_patch_auroc);
    out << buf;
  }
  return out.str();
}

}  // namespace meds
