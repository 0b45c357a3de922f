// SPDX-License-Identifier: Apache-2.0

#include "meds/selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>

#include "meds/error.hpp"
#include "meds/random.hpp"

namespace meds {

std::size_t robust_max_count(std::size_t patches, double n_percent) {
  if (patches == 0) throw ContractError("robust max of an empty score map");
  if (!(n_percent > 0.0 && n_percent <= 100.0)) throw ContractError("top percent must lie in (0, 100]");
  const double exact = n_percent * static_cast<double>(patches) / 100.0;
  const auto count = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::size_t>(count, 1, patches);
}

double robust_max(std::span<const double> scores, double n_percent) {
  const std::size_t k = robust_max_count(scores.size(), n_percent);
  std::vector<double> sorted(scores.begin(), scores.end());
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end(),
                    std::greater<>());
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += sorted[i];
  return sum / static_cast<double>(k);
}

Schedule schedule(std::size_t t, std::size_t total, double final_critical) {
  if (total < 1 || t < 1 || t > total) {
    throw ContractError("schedule requires 1 <= t <= T (t=" + std::to_string(t) +
                        ", T=" + std::to_string(total) + ")");
  }
  const double progress = static_cast<double>(t) / static_cast<double>(total);
  return {std::min(1.0, 2.0 * progress), final_critical * progress};
}

double selection_score(double frozen, double current, double alpha) {
  return (1.0 - alpha) * frozen + alpha * current;
}

double selection_score(const PatchFeatureMap& image, const ReconstructorParams& frozen_params,
                       const ReconstructorParams& current_params, double alpha, double n_percent) {
  if (!frozen_params.same_architecture(current_params)) {
    throw ContractError("frozen and current reconstructors differ in architecture");
  }
  return selection_score(robust_max(reconstruction_score(frozen_params, image), n_percent),
                         robust_max(reconstruction_score(current_params, image), n_percent), alpha);
}

double median(std::span<const double> values) {
  if (values.empty()) throw ContractError("median of an empty set");
  std::vector<double> v(values.begin(), values.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

double median_absolute_deviation(std::span<const double> values) {
  const double m = median(values);
  std::vector<double> dev(values.size());
  std::transform(values.begin(), values.end(), dev.begin(), [m](double x) { return std::abs(x - m); });
  return median(dev);
}

double class_threshold(std::span<const double> etas, double critical) {
  const double m = median(etas);
  if (critical == 0.0) return m;
  return m + critical * median_absolute_deviation(etas);
}

std::vector<std::size_t> select_subset(std::span<const std::uint32_t> class_ids,
                                       std::span<const double> etas,
                                       const std::map<std::uint32_t, double>& thresholds) {
  if (class_ids.size() != etas.size()) throw ContractError("etas are not aligned with images");
  std::map<std::uint32_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < class_ids.size(); ++i) members[class_ids[i]].push_back(i);

  std::vector<std::size_t> selected;
  for (const auto& [c, idx] : members) {
    auto it = thresholds.find(c);
    if (it == thresholds.end()) throw LookupError("no threshold for class " + std::to_string(c));
    std::vector<std::size_t> chosen;
    for (std::size_t i : idx) {
      if (etas[i] < it->second) chosen.push_back(i);
    }
    if (chosen.empty()) {
      // Everything ties at or above tau: keep the lowest half, ties by index.
      chosen = idx;
      std::stable_sort(chosen.begin(), chosen.end(),
                       [&etas](std::size_t a, std::size_t b) { return etas[a] < etas[b]; });
      chosen.resize((chosen.size() + 1) / 2);
    }
    selected.insert(selected.end(), chosen.begin(), chosen.end());
  }
  std::sort(selected.begin(), selected.end());
  return selected;
}

void SelectionConfig::validate() const {
  if (!(final_critical >= 0.0) || !std::isfinite(final_critical)) {
    throw ConfigError("critical value must be finite and non-negative");
  }
  if (!(top_percent > 0.0 && top_percent <= 100.0)) throw ConfigError("top percent must lie in (0, 100]");
}

std::string format_audit(std::span<const AuditRow> rows) {
  std::ostringstream out;
  out << "epoch\titeration\tclass\talpha\tcritical\ttau\tclass_size\tselected\tcontaminated\n";
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return std::string(buf);
  };
  for (const AuditRow& r : rows) {
    out << r.epoch << '\t' << r.iteration << '\t' << r.class_id << '\t' << num(r.alpha) << '\t'
        << num(r.critical) << '\t' << num(r.threshold) << '\t' << r.class_size << '\t' << r.selected
        << '\t';
    if (r.contaminated) {
      out << *r.contaminated;
    } else {
      out << '-';
    }
    out << '\n';
  }
  return out.str();
}

std::vector<double> frozen_selection_scores(const ReconstructorParams& frozen,
                                            const FeatureDataset& dataset, double n_percent) {
  std::vector<double> out(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out[i] = robust_max(reconstruction_score(frozen, dataset.images[i]), n_percent);
  }
  return out;
}

std::vector<double> memory_selection_scores(const ScoreCache& cache, double n_percent) {
  std::vector<double> out(cache.size());
  for (std::size_t i = 0; i < cache.size(); ++i) out[i] = robust_max(cache[i], n_percent);
  return out;
}

namespace {

struct SelectionRound {
  std::vector<double> etas;
  std::map<std::uint32_t, double> thresholds;
  std::vector<std::size_t> selected;
};

SelectionRound run_selection(const ReconstructorParams& params, const FeatureDataset& dataset,
                             const SelectionConfig& selection, std::span<const double> frozen,
                             const Schedule& sched) {
  SelectionRound round;
  if (!selection.enabled) {
    for (std::uint32_t c : dataset.classes()) {
      round.thresholds[c] = std::numeric_limits<double>::infinity();
    }
    round.selected.resize(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) round.selected[i] = i;
    return round;
  }
  round.etas.resize(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const double current = sched.alpha == 0.0
                               ? 0.0
                               : robust_max(reconstruction_score(params, dataset.images[i]),
                                            selection.top_percent);
    round.etas[i] = selection_score(frozen[i], current, sched.alpha);
  }
  std::map<std::uint32_t, std::vector<double>> per_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) per_class[dataset.class_ids[i]].push_back(round.etas[i]);
  for (const auto& [c, etas] : per_class) round.thresholds[c] = class_threshold(etas, sched.critical);
  round.selected = select_subset(dataset.class_ids, round.etas, round.thresholds);
  return round;
}

void append_audit(std::vector<AuditRow>& audit, std::size_t epoch, std::size_t t,
                  const Schedule& sched, const SelectionRound& round, const FeatureDataset& dataset,
                  const std::vector<std::uint8_t>* truth) {
  for (const auto& [c, tau] : round.thresholds) {
    AuditRow row;
    row.epoch = epoch;
    row.iteration = t;
    row.class_id = c;
    row.alpha = sched.alpha;
    row.critical = sched.critical;
    row.threshold = tau;
    for (std::uint32_t id : dataset.class_ids) row.class_size += (id == c);
    std::size_t contaminated = 0;
    for (std::size_t i : round.selected) {
      if (dataset.class_ids[i] != c) continue;
      ++row.selected;
      if (truth && (*truth)[i] == 1) ++contaminated;
    }
    if (truth) row.contaminated = contaminated;
    audit.push_back(row);
  }
}

}  // namespace

FinetuneResult finetune_with_selection(const ReconstructorParams& initial,
                                       const FeatureDataset& dataset, const TrainConfig& config,
                                       const SelectionConfig& selection,
                                       std::span<const double> frozen_scores,
                                       const std::vector<std::uint8_t>* audit_truth) {
  config.validate();
  selection.validate();
  if (dataset.empty()) throw ContractError("cannot fine-tune on an empty dataset");
  if (frozen_scores.size() != dataset.size()) {
    throw ContractError("frozen selection scores are not aligned with the dataset");
  }
  if (audit_truth && audit_truth->size() != dataset.size()) {
    throw ContractError("audit truth labels are not aligned with the dataset");
  }

  FinetuneResult result;
  result.params = initial;
  Rng rng(derive_seed(config.seed, 2));
  OptimizerState state;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::vector<const PatchFeatureMap*> batch;
  result.losses.reserve(config.iterations);

  for (std::size_t t = 1; t <= config.iterations; ++t) {
    if (t == 1 || cursor >= order.size()) {
      const Schedule sched = schedule(t, config.iterations, selection.final_critical);
      const SelectionRound round = run_selection(result.params, dataset, selection, frozen_scores, sched);
      ++result.epochs;
      append_audit(result.audit, result.epochs, t, sched, round, dataset, audit_truth);
      order = round.selected;
      rng.shuffle(order);
      cursor = 0;
    }
    const std::size_t end = std::min(order.size(), cursor + config.batch_size);
    batch.clear();
    for (; cursor < end; ++cursor) batch.push_back(&dataset.images[order[cursor]]);
    const LossAndGrad lg = finetune_loss_and_grad(result.params, batch);
    result.losses.push_back(lg.loss);
    optimizer_step(result.params, lg.grad, state, config);
  }

  SelectionConfig final_selection = selection;
  final_selection.enabled = true;
  const Schedule last = schedule(config.iterations, config.iterations, selection.final_critical);
  SelectionRound round = run_selection(result.params, dataset, final_selection, frozen_scores, last);
  result.final_etas = std::move(round.etas);
  result.final_selection = selection.enabled ? std::move(round.selected) : order;
  if (!selection.enabled) std::sort(result.final_selection.begin(), result.final_selection.end());
  return result;
}

}  // namespace meds
